"""Objective evaluation metrics over ingested artifacts.

Transcription error, speaker cosine similarity, Frechet distance and KL
divergence all operate on files produced by external recognizers / embedding
models (never run here); the beat-alignment analysis works directly on audio
via energy envelopes and emits plot-ready text columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .errors import InvalidInputError
from .formats import MAGIC_FEATURES, read_frame_matrix

__all__ = [
    "EmbeddingSet",
    "AlignmentReport",
    "load_embeddings",
    "normalize_text",
    "wer",
    "secs",
    "fad",
    "kld",
    "energy_envelope",
    "matched_fraction",
    "beat_alignment_report",
    "write_alignment_plot_data",
]

ENVELOPE_HOP = 512
DEFAULT_BEAT_TOLERANCE_S = 0.07
DEFAULT_MIN_PEAK_GAP_S = 0.25


@dataclass
class EmbeddingSet:
    """A bag of fixed-dimension embedding vectors from one source."""

    vectors: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidInputError(f"embeddings must be 2-D, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("non-finite embedding values")

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def load_embeddings(path: str | Path, source: str = "") -> EmbeddingSet:
    vectors, _ = read_frame_matrix(path, magic=MAGIC_FEATURES)
    return EmbeddingSet(vectors, source or str(path))


def normalize_text(text: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    cleaned = "".join(ch if ch.isalnum() else " " for ch in text.lower())
    return cleaned.split()


def wer(ref_words: list[str], hyp_words: list[str]) -> float:
    """Word error rate: unit-cost edit distance over the reference length."""
    ref = list(ref_words)
    hyp = list(hyp_words)
    if not ref:
        raise InvalidInputError("reference word list must be non-empty")
    # two-row Levenshtein; tests hold this against a full-matrix oracle
    prev = np.arange(len(hyp) + 1, dtype=np.int64)
    curr = np.empty_like(prev)
    for i, ref_word in enumerate(ref, 1):
        curr[0] = i
        for j, hyp_word in enumerate(hyp, 1):
            cost = 0 if ref_word == hyp_word else 1
            curr[j] = min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + cost)
        prev, curr = curr, prev
    return float(prev[len(hyp)]) / len(ref)


def secs(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine similarity between two embedding vectors."""
    a = np.asarray(e1, dtype=np.float64).reshape(-1)
    b = np.asarray(e2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("non-finite embedding values")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a <= 0.0 or norm_b <= 0.0:
        raise InvalidInputError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fad(a: EmbeddingSet | np.ndarray, b: EmbeddingSet | np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the product
    square root taken through the symmetrized eigendecomposition and tiny
    negative eigenvalues floored at zero.
    """
    a = a if isinstance(a, EmbeddingSet) else EmbeddingSet(a)
    b = b if isinstance(b, EmbeddingSet) else EmbeddingSet(b)
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.count < 2 or b.count < 2:
        raise InvalidInputError("need at least 2 vectors per set to fit a covariance")
    mu_a = a.vectors.mean(axis=0)
    mu_b = b.vectors.mean(axis=0)
    cov_a = np.cov(a.vectors, rowvar=False, ddof=1).reshape(a.dim, a.dim)
    cov_b = np.cov(b.vectors, rowvar=False, ddof=1).reshape(b.dim, b.dim)
    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    eigvals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    trace_term = np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(eigvals))
    return float(np.sum((mu_a - mu_b) ** 2) + trace_term)


def kld(p_rows: np.ndarray, q_rows: np.ndarray, *, eps: float = 1e-8) -> float:
    """Mean KL(p || q) over paired posterior rows, with epsilon smoothing."""
    p = np.asarray(p_rows, dtype=np.float64)
    q = np.asarray(q_rows, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if q.ndim == 1:
        q = q[None, :]
    if p.shape != q.shape or p.ndim != 2 or p.shape[0] == 0:
        raise InvalidInputError(f"posterior shapes must match: {p.shape} vs {q.shape}")
    for name, rows in (("p", p), ("q", q)):
        if np.any(rows < 0) or not np.all(np.isfinite(rows)):
            raise InvalidInputError(f"{name} rows must be nonnegative and finite")
        if np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
            raise InvalidInputError(f"{name} rows must sum to 1 within 1e-6")
    per_row = np.sum(p * (np.log(p + eps) - np.log(q + eps)), axis=1)
    return float(max(np.mean(per_row), 0.0))


def energy_envelope(samples: np.ndarray, *, hop: int = ENVELOPE_HOP) -> np.ndarray:
    """Smoothed per-frame energy over non-overlapping hop-length frames."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n_frames = x.size // hop
    if n_frames == 0:
        raise InvalidInputError(f"audio shorter than one {hop}-sample frame")
    frames = x[:n_frames * hop].reshape(n_frames, hop)
    energy = np.sum(frames * frames, axis=1)
    # short Hann smoothing keeps single-frame jitter out of the peak picker
    kernel = np.hanning(5)
    kernel /= kernel.sum()
    return np.convolve(energy, kernel, mode="same")


def matched_fraction(query_times: np.ndarray, anchor_times: np.ndarray,
                     tolerance_s: float) -> float:
    """Fraction of query times within tolerance of some anchor; 0.0 if no queries."""
    query = np.asarray(query_times, dtype=np.float64)
    anchors = np.asarray(anchor_times, dtype=np.float64)
    if query.size == 0:
        return 0.0
    if anchors.size == 0:
        return 0.0
    gaps = np.min(np.abs(query[:, None] - anchors[None, :]), axis=1)
    return float(np.mean(gaps <= tolerance_s))


def beat_alignment_report(accomp, vocal, tolerance_s: float = DEFAULT_BEAT_TOLERANCE_S,
                          *, min_gap_s: float = DEFAULT_MIN_PEAK_GAP_S) -> "AlignmentReport":
    """Relate vocal onsets to accompaniment beats via energy peaks.

    Beats are peaks of the accompaniment energy envelope; onsets are peaks
    of the vocal's positive energy flux; aligned_fraction is the share of
    onsets within tolerance_s of any beat.
    """
    from .spectral import SAMPLE_RATE_HZ, AudioClip

    accomp_samples = accomp.samples if isinstance(accomp, AudioClip) else np.asarray(accomp)
    vocal_samples = vocal.samples if isinstance(vocal, AudioClip) else np.asarray(vocal)
    if tolerance_s <= 0:
        raise InvalidInputError("tolerance_s must be positive")
    env_a = energy_envelope(accomp_samples)
    env_v = energy_envelope(vocal_samples)
    frame_s = ENVELOPE_HOP / SAMPLE_RATE_HZ
    distance = max(1, int(round(min_gap_s / frame_s)))

    beat_idx, _ = find_peaks(env_a, height=float(np.mean(env_a)), distance=distance)
    beat_times = (beat_idx + 0.5) * frame_s

    flux = np.clip(np.diff(env_v), 0.0, None)
    if flux.size:
        onset_idx, _ = find_peaks(flux, height=float(np.mean(flux)), distance=distance)
    else:
        onset_idx = np.empty(0, dtype=np.int64)
    onset_times = (onset_idx + 1 + 0.5) * frame_s

    return AlignmentReport(
        beat_times_s=[float(t) for t in beat_times],
        onset_times_s=[float(t) for t in onset_times],
        aligned_fraction=matched_fraction(onset_times, beat_times, tolerance_s),
        tolerance_s=float(tolerance_s),
        accomp_envelope=env_a,
        vocal_flux=np.concatenate(([0.0], flux)) if flux.size else np.zeros_like(env_v),
        frame_s=frame_s,
    )


@dataclass
class AlignmentReport:
    """Beat and onset times plus the aligned fraction and plot-data curves."""

    beat_times_s: list[float]
    onset_times_s: list[float]
    aligned_fraction: float
    tolerance_s: float
    accomp_envelope: np.ndarray
    vocal_flux: np.ndarray
    frame_s: float

    def __post_init__(self) -> None:
        if list(self.beat_times_s) != sorted(self.beat_times_s):
            raise InvalidInputError("beat times must be sorted")
        if list(self.onset_times_s) != sorted(self.onset_times_s):
            raise InvalidInputError("onset times must be sorted")
        if not 0.0 <= self.aligned_fraction <= 1.0:
            raise InvalidInputError("aligned_fraction must lie in [0, 1]")


def write_alignment_plot_data(report: AlignmentReport, path: str | Path) -> None:
    """Write long-format text columns: series, time_s, value."""
    lines = ["series\ttime_s\tvalue"]
    for i, value in enumerate(report.accomp_envelope):
        lines.append(f"accomp_energy\t{(i + 0.5) * report.frame_s:.6f}\t{value:.8g}")
    for i, value in enumerate(report.vocal_flux):
        lines.append(f"vocal_flux\t{(i + 0.5) * report.frame_s:.6f}\t{value:.8g}")
    for t in report.beat_times_s:
        lines.append(f"beat\t{t:.6f}\t1")
    for t in report.onset_times_s:
        lines.append(f"onset\t{t:.6f}\t1")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
