"""Dataset construction pipeline over ingested per-song artifacts.

Songs arrive as separated vocal/accompaniment WAVs plus optional sidecar
files (VAD labels, diarization, per-segment quality scores, transcripts).
Voiced runs are merged into segments under a Gaussian length threshold,
paired accompaniment is sliced at identical timestamps, per-segment quality
metrics decide a subset tier, and a statistics pass summarizes the result.
The upstream separation / VAD / diarization / scoring / ASR models are out
of scope: their outputs are consumed through file formats only.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .formats import (
    read_diarization,
    read_manifest,
    read_scores,
    read_transcripts,
    read_vad_labels,
    read_wav,
    write_manifest,
    write_wav,
)

__all__ = [
    "VAD_RATE_HZ",
    "MIN_SEGMENT_S",
    "Subset",
    "SubsetRule",
    "SubsetThresholds",
    "DEFAULT_THRESHOLDS",
    "SongRecord",
    "VadLabels",
    "Segment",
    "StatsReport",
    "energy_vad",
    "segment_vad",
    "slice_accompaniment",
    "estimate_phoneme_count",
    "compute_pps",
    "primary_singer_fraction",
    "assign_subset",
    "derive_song_seed",
    "process_song",
    "run_pipeline",
    "dataset_stats",
    "write_stats_report",
]

log = logging.getLogger(__name__)

VAD_RATE_HZ = 100.0
MIN_SEGMENT_S = 3.0
DEFAULT_MERGE_GAP_S = 3.0
DEFAULT_THRESHOLD_MEAN_S = 18.0
DEFAULT_THRESHOLD_STD_S = 3.0


class Subset(Enum):
    PREMIUM = "Premium"
    STANDARD = "Standard"
    BASIC = "Basic"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class SubsetRule:
    dnsmos_min: float
    pps_min: float
    pps_max: float
    primary_min: float


@dataclass(frozen=True)
class SubsetThresholds:
    """Per-tier acceptance rules; tiers must strictly tighten coordinatewise."""

    basic: SubsetRule = SubsetRule(2.5, 12.0, 35.0, 0.8)
    standard: SubsetRule = SubsetRule(3.5, 16.0, 32.0, 0.9)
    premium: SubsetRule = SubsetRule(3.8, 18.0, 30.0, 1.0)

    def __post_init__(self) -> None:
        b, s, p = self.basic, self.standard, self.premium
        ok = (b.dnsmos_min < s.dnsmos_min < p.dnsmos_min
              and b.pps_min < s.pps_min < p.pps_min
              and b.pps_max > s.pps_max > p.pps_max
              and b.primary_min < s.primary_min < p.primary_min)
        if not ok:
            raise InvalidInputError(
                "subset thresholds must be strictly nested (Premium inside Standard inside Basic)")


DEFAULT_THRESHOLDS = SubsetThresholds()


@dataclass
class SongRecord:
    """One ingested song; paths point at separated stems and sidecar files."""

    song_id: str
    language: str
    duration_s: float
    vocal_path: str
    accomp_path: str
    transcript_path: str | None = None
    diarization_path: str | None = None
    dnsmos_path: str | None = None
    vad_path: str | None = None

    def __post_init__(self) -> None:
        if not self.song_id:
            raise InvalidInputError("song_id must be non-empty")
        if not self.duration_s > 0:
            raise InvalidInputError(f"duration_s must be positive, got {self.duration_s}")

    @classmethod
    def from_manifest_row(cls, row: dict[str, str]) -> "SongRecord":
        try:
            return cls(
                song_id=row["song_id"],
                language=row.get("language", "und"),
                duration_s=float(row["duration_s"]),
                vocal_path=row["vocal_path"],
                accomp_path=row["accomp_path"],
                transcript_path=row.get("transcript_path"),
                diarization_path=row.get("diarization_path"),
                dnsmos_path=row.get("dnsmos_path"),
                vad_path=row.get("vad_path"),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidInputError(f"bad song manifest row: {exc}") from exc


@dataclass
class VadLabels:
    """Binary voiced/unvoiced labels at a fixed frame rate."""

    labels: np.ndarray
    rate_hz: float = VAD_RATE_HZ

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.labels.size and not np.all((self.labels == 0) | (self.labels == 1)):
            raise InvalidInputError("VAD labels must be 0/1")
        if not self.rate_hz > 0:
            raise InvalidInputError("VAD rate must be positive")


@dataclass
class Segment:
    """A voiced span with optional quality metrics and a subset decision."""

    start_s: float
    end_s: float
    pps: float | None = None
    dnsmos: float | None = None
    primary_frac: float | None = None
    subset: Subset | None = None

    def __post_init__(self) -> None:
        if self.end_s - self.start_s < MIN_SEGMENT_S - 1e-9:
            raise InvalidInputError(
                f"segments must last at least {MIN_SEGMENT_S} s, got "
                f"[{self.start_s}, {self.end_s}]")
        for name in ("pps", "dnsmos", "primary_frac"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise InvalidInputError(f"{name} must be finite when present")
        if self.primary_frac is not None and not 0.0 <= self.primary_frac <= 1.0:
            raise InvalidInputError("primary_frac must lie in [0, 1]")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def energy_vad(samples: np.ndarray, sample_rate_hz: int = 44100, *,
               rate_hz: float = VAD_RATE_HZ, threshold: float = 1e-3) -> VadLabels:
    """Fallback VAD when no label file is supplied: frame RMS above a floor."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    frame = int(round(sample_rate_hz / rate_hz))
    if frame < 1:
        raise InvalidInputError("VAD rate exceeds the sample rate")
    n_frames = samples.size // frame
    if n_frames == 0:
        return VadLabels(np.zeros(0, dtype=np.uint8), rate_hz)
    chunks = samples[:n_frames * frame].reshape(n_frames, frame)
    rms = np.sqrt(np.mean(chunks * chunks, axis=1))
    return VadLabels((rms > threshold).astype(np.uint8), rate_hz)


def _voiced_runs(labels: VadLabels) -> list[tuple[float, float]]:
    padded = np.concatenate(([0], labels.labels, [0]))
    changes = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(changes == 1)
    ends = np.flatnonzero(changes == -1)
    return [(s / labels.rate_hz, e / labels.rate_hz) for s, e in zip(starts, ends)]


def segment_vad(labels: VadLabels, merge_gap_s: float = DEFAULT_MERGE_GAP_S,
                threshold_mean_s: float = DEFAULT_THRESHOLD_MEAN_S,
                threshold_std_s: float = DEFAULT_THRESHOLD_STD_S,
                min_len_s: float = MIN_SEGMENT_S, seed: int = 0) -> list[Segment]:
    """Merge voiced runs into segments under a per-group Gaussian length cap.

    Scanning left to right, a group absorbs the next run while the silence
    gap is under merge_gap_s and the group's current span has not yet
    exceeded a threshold drawn (per group, seeded) from
    N(threshold_mean_s, threshold_std_s); groups shorter than min_len_s are
    dropped.  Output is sorted and non-overlapping by construction.
    """
    if not merge_gap_s > 0:
        raise InvalidInputError("merge_gap_s must be positive")
    if min_len_s < MIN_SEGMENT_S:
        raise InvalidInputError(
            f"min_len_s may only tighten the {MIN_SEGMENT_S} s segment floor")
    if threshold_std_s < 0:
        raise InvalidInputError("threshold_std_s must be >= 0")
    runs = _voiced_runs(labels)
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    segments: list[Segment] = []
    i = 0
    while i < len(runs):
        threshold = float(rng.normal(threshold_mean_s, threshold_std_s))
        start, end = runs[i]
        i += 1
        while i < len(runs) and runs[i][0] - end < merge_gap_s and end - start <= threshold:
            end = runs[i][1]
            i += 1
        if end - start >= min_len_s:
            segments.append(Segment(start, end))
    return segments


def slice_accompaniment(segments: list[Segment], accomp) -> list:
    """Cut sample-accurate accompaniment slices at the segment timestamps."""
    from .spectral import AudioClip

    clip = accomp if isinstance(accomp, AudioClip) else AudioClip(accomp)
    out = []
    for seg in segments:
        lo = int(round(seg.start_s * clip.sample_rate_hz))
        hi = int(round(seg.end_s * clip.sample_rate_hz))
        if lo < 0 or hi > clip.num_samples or lo >= hi:
            raise InvalidInputError(
                f"segment [{seg.start_s}, {seg.end_s}] s lies outside the "
                f"{clip.duration_s:.2f} s clip")
        out.append(AudioClip(clip.samples[lo:hi].copy()))
    return out


def estimate_phoneme_count(text: str) -> int:
    """Desk-scale proxy for a phonemizer: count alphanumeric characters."""
    return sum(1 for ch in text if ch.isalnum())


def compute_pps(phoneme_count: int, duration_s: float) -> float:
    """Phonemes per second."""
    if phoneme_count < 0:
        raise InvalidInputError("phoneme_count must be >= 0")
    if not duration_s > 0:
        raise InvalidInputError(f"duration_s must be positive, got {duration_s}")
    return phoneme_count / duration_s


def primary_singer_fraction(diarization: list[tuple[str, float, float]],
                            segment: Segment | tuple[float, float]) -> float:
    """Share of clipped voiced time held by the most-voiced speaker.

    Intervals are clipped to the segment span first.  With no overlapping
    speech at all the fraction is defined as 1.0 and a warning is emitted.
    """
    if isinstance(segment, Segment):
        lo, hi = segment.start_s, segment.end_s
    else:
        lo, hi = float(segment[0]), float(segment[1])
    totals: dict[str, float] = {}
    for speaker, start, end in diarization:
        overlap = min(end, hi) - max(start, lo)
        if overlap > 0:
            totals[speaker] = totals.get(speaker, 0.0) + overlap
    grand = sum(totals.values())
    if grand <= 0.0:
        warnings.warn("no diarized speech overlaps the segment; primary fraction defaults to 1.0")
        return 1.0
    return max(totals.values()) / grand


def _satisfies(seg: Segment, rule: SubsetRule) -> bool:
    return (seg.dnsmos >= rule.dnsmos_min
            and rule.pps_min <= seg.pps <= rule.pps_max
            and seg.primary_frac >= rule.primary_min)


def assign_subset(seg: Segment, thresholds: SubsetThresholds = DEFAULT_THRESHOLDS) -> Subset:
    """Highest tier whose dnsmos / pps-band / primary-singer rules all hold."""
    if seg.pps is None or seg.dnsmos is None or seg.primary_frac is None:
        raise InvalidInputError("cannot assign a subset with missing metrics")
    for subset, rule in ((Subset.PREMIUM, thresholds.premium),
                         (Subset.STANDARD, thresholds.standard),
                         (Subset.BASIC, thresholds.basic)):
        if _satisfies(seg, rule):
            return subset
    return Subset.REJECTED


def derive_song_seed(global_seed: int, song_id: str) -> int:
    """Stable per-song RNG seed, independent of processing order."""
    digest = hashlib.sha256(f"{global_seed}:{song_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def process_song(record: SongRecord, *, global_seed: int = 0,
                 thresholds: SubsetThresholds = DEFAULT_THRESHOLDS,
                 merge_gap_s: float = DEFAULT_MERGE_GAP_S,
                 threshold_mean_s: float = DEFAULT_THRESHOLD_MEAN_S,
                 threshold_std_s: float = DEFAULT_THRESHOLD_STD_S,
                 min_len_s: float = MIN_SEGMENT_S,
                 out_dir: Path | None = None,
                 write_audio: bool = True) -> list[dict[str, str]]:
    """Segment one song, score each segment, and return manifest rows.

    Missing sidecar files degrade gracefully: affected metrics stay unknown
    and those segments land in Rejected with a logged warning.
    """
    vocal, rate = read_wav(record.vocal_path)
    if rate != 44100:
        raise InvalidInputError(f"{record.vocal_path}: expected 44.1 kHz audio, got {rate}")
    if record.vad_path:
        labels_arr, vad_rate = read_vad_labels(record.vad_path)
        labels = VadLabels(labels_arr, vad_rate)
    else:
        labels = energy_vad(vocal, rate)
    segments = segment_vad(labels, merge_gap_s, threshold_mean_s, threshold_std_s,
                           min_len_s, seed=derive_song_seed(global_seed, record.song_id))
    if not segments:
        return []

    accomp, accomp_rate = read_wav(record.accomp_path)
    if accomp_rate != 44100:
        raise InvalidInputError(f"{record.accomp_path}: expected 44.1 kHz audio, got {accomp_rate}")
    transcripts = read_transcripts(record.transcript_path) if record.transcript_path else None
    scores = read_scores(record.dnsmos_path) if record.dnsmos_path else None
    diarization = read_diarization(record.diarization_path) if record.diarization_path else None
    if transcripts is None or scores is None:
        log.warning("song %s: missing transcript or dnsmos sidecar; its segments are Rejected",
                    record.song_id)

    audio_dir = None
    if out_dir is not None and write_audio:
        audio_dir = Path(out_dir) / "audio"
        audio_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict[str, str]] = []
    for i, seg in enumerate(segments):
        seg_id = f"{record.song_id}_{i:04d}"
        text = transcripts.get(seg_id) if transcripts else None
        if text is not None:
            seg.pps = compute_pps(estimate_phoneme_count(text), seg.duration_s)
        if scores is not None and seg_id in scores:
            seg.dnsmos = scores[seg_id]
        if diarization is not None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                seg.primary_frac = primary_singer_fraction(diarization, seg)
        if seg.pps is None or seg.dnsmos is None or seg.primary_frac is None:
            seg.subset = Subset.REJECTED
            log.warning("segment %s: missing metrics, assigned Rejected", seg_id)
        else:
            seg.subset = assign_subset(seg, thresholds)

        row = {
            "segment_id": seg_id,
            "song_id": record.song_id,
            "language": record.language,
            "start_s": f"{seg.start_s:.3f}",
            "end_s": f"{seg.end_s:.3f}",
            "duration_s": f"{seg.duration_s:.3f}",
            "subset": seg.subset.value,
        }
        if seg.pps is not None:
            row["pps"] = f"{seg.pps:.4f}"
        if seg.dnsmos is not None:
            row["dnsmos"] = f"{seg.dnsmos:.4f}"
        if seg.primary_frac is not None:
            row["primary_frac"] = f"{seg.primary_frac:.4f}"
        if text is not None:
            row["text"] = text
        if audio_dir is not None:
            lo = int(round(seg.start_s * 44100))
            hi = int(round(seg.end_s * 44100))
            hi_v = min(hi, vocal.size)
            hi_a = min(hi, accomp.size)
            vocal_out = audio_dir / f"{seg_id}.vocal.wav"
            accomp_out = audio_dir / f"{seg_id}.accomp.wav"
            write_wav(vocal_out, vocal[lo:hi_v])
            write_wav(accomp_out, accomp[lo:hi_a])
            row["vocal_wav"] = str(vocal_out)
            row["accomp_wav"] = str(accomp_out)
        rows.append(row)
    return rows


def run_pipeline(manifest_path: str | Path, out_dir: str | Path, seed: int = 0,
                 thresholds: SubsetThresholds = DEFAULT_THRESHOLDS, *,
                 write_audio: bool = True) -> dict:
    """Process every song in a manifest; writes segments.tsv plus audio slices.

    Returns a summary dict with per-subset counts and skip statistics.
    Unreadable songs are skipped and counted, not fatal.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_all: list[dict[str, str]] = []
    skipped = 0
    seen_ids: set[str] = set()
    song_rows = read_manifest(manifest_path)
    for row in song_rows:
        try:
            record = SongRecord.from_manifest_row(row)
            if record.song_id in seen_ids:
                raise InvalidInputError(f"duplicate song_id {record.song_id}")
            seen_ids.add(record.song_id)
            rows_all.extend(process_song(
                record, global_seed=seed, thresholds=thresholds,
                out_dir=out, write_audio=write_audio))
        except (InvalidInputError, OSError) as exc:
            skipped += 1
            log.warning("skipping song row (%s)", exc)
    write_manifest(out / "segments.tsv", rows_all)
    counts: dict[str, int] = {s.value: 0 for s in Subset}
    for row in rows_all:
        counts[row["subset"]] += 1
    summary = {
        "songs_total": len(song_rows),
        "songs_skipped": skipped,
        "segments_total": len(rows_all),
        "subset_counts": counts,
        "segments_manifest": str(out / "segments.tsv"),
    }
    return summary


_HIST_EDGES_S = list(np.arange(0.0, 61.0, 5.0)) + [float("inf")]


@dataclass
class StatsReport:
    """Aggregate statistics over a segments manifest."""

    total_segments: int
    total_duration_s: float
    mean_segment_s: float
    per_language_s: dict[str, float]
    subset_counts: dict[str, int]
    histogram_edges_s: list[float]
    histogram_counts: list[int]
    skipped_rows: int

    @property
    def total_hours(self) -> float:
        return self.total_duration_s / 3600.0


def dataset_stats(manifest_path: str | Path) -> StatsReport:
    """Summarize a segments manifest; malformed rows are skipped and counted."""
    durations: list[float] = []
    per_language: dict[str, float] = {}
    subset_counts: dict[str, int] = {s.value: 0 for s in Subset}
    skipped = 0
    for row in read_manifest(manifest_path):
        try:
            duration = float(row["duration_s"])
            language = row.get("language", "und")
            subset = row.get("subset", Subset.REJECTED.value)
            if not np.isfinite(duration) or duration <= 0:
                raise ValueError("bad duration")
        except (KeyError, ValueError):
            skipped += 1
            continue
        durations.append(duration)
        per_language[language] = per_language.get(language, 0.0) + duration
        subset_counts[subset] = subset_counts.get(subset, 0) + 1
    counts, _ = np.histogram(durations, bins=_HIST_EDGES_S)
    total = float(np.sum(durations))
    return StatsReport(
        total_segments=len(durations),
        total_duration_s=total,
        mean_segment_s=total / len(durations) if durations else 0.0,
        per_language_s=per_language,
        subset_counts=subset_counts,
        histogram_edges_s=list(_HIST_EDGES_S),
        histogram_counts=[int(c) for c in counts],
        skipped_rows=skipped,
    )


def write_stats_report(report: StatsReport, out_dir: str | Path) -> dict[str, str]:
    """Write the machine-readable report plus plot-data files; returns paths."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "stats.json"
    payload = asdict(report)
    payload["total_hours"] = report.total_hours
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    hist_path = out / "duration_hist.tsv"
    with open(hist_path, "w", encoding="utf-8") as f:
        f.write("bin_lo_s\tbin_hi_s\tcount\n")
        for lo, hi, count in zip(report.histogram_edges_s[:-1],
                                 report.histogram_edges_s[1:],
                                 report.histogram_counts):
            f.write(f"{lo}\t{hi}\t{count}\n")
    lang_path = out / "language_hours.tsv"
    with open(lang_path, "w", encoding="utf-8") as f:
        f.write("language\thours\n")
        for lang in sorted(report.per_language_s):
            f.write(f"{lang}\t{report.per_language_s[lang] / 3600.0:.6f}\n")
    return {"report": str(report_path), "histogram": str(hist_path),
            "languages": str(lang_path)}
