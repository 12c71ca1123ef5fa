"""Binary and text file formats used at the package boundary.

Frame matrices travel as "FMX1" files, K-means codebooks as "KMC1",
log-mel spectrograms as "MEL1", and voice-activity labels as "VAD1".
All integers are little-endian uint32 and all payloads are float32
little-endian, row major, so files are readable from any language with
a 16-byte (12-byte for VAD1) header parse.

Text side: song manifests are one record per line of tab-separated
``key=value`` pairs, diarization files are ``speaker_id start_s end_s``
lines, score files are ``segment_id score`` lines, and transcripts are
``segment_id<TAB>text`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "write_frame_matrix",
    "read_frame_matrix",
    "write_mel",
    "read_mel",
    "write_vad_labels",
    "read_vad_labels",
    "write_wav",
    "read_wav",
    "write_manifest",
    "read_manifest",
    "read_diarization",
    "read_scores",
    "read_transcripts",
    "MAGIC_FEATURES",
    "MAGIC_CODEBOOK",
    "MAGIC_MEL",
    "MAGIC_VAD",
]

MAGIC_FEATURES = b"FMX1"
MAGIC_CODEBOOK = b"KMC1"
MAGIC_MEL = b"MEL1"
MAGIC_VAD = b"VAD1"

_HEADER = struct.Struct("<4sIIf")  # magic, rows, cols, frame_rate_hz
_VAD_HEADER = struct.Struct("<4sIf")  # magic, count, rate_hz


def _as_2d_float32(frames: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(frames, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite values in frame payload")
    return arr


def write_frame_matrix(path: str | Path, frames: np.ndarray, frame_rate_hz: float,
                       *, magic: bytes = MAGIC_FEATURES) -> None:
    """Write a [T x D] float32 matrix with its frame rate.

    ``magic`` selects the flavor: FMX1 for feature/embedding matrices,
    KMC1 for codebooks (rows are then centroids, not frames).
    """
    if magic not in (MAGIC_FEATURES, MAGIC_CODEBOOK):
        raise InvalidInputError(f"unknown frame-matrix magic {magic!r}")
    arr = _as_2d_float32(frames)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, arr.shape[0], arr.shape[1], float(frame_rate_hz)))
        f.write(arr.tobytes(order="C"))


def read_frame_matrix(path: str | Path, *, magic: bytes = MAGIC_FEATURES
                      ) -> tuple[np.ndarray, float]:
    """Read a frame matrix file; returns (frames [T x D] float32, frame_rate_hz)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header ({len(raw)} bytes)")
    got_magic, rows, cols, rate = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise InvalidInputError(f"{path}: magic {got_magic!r}, expected {magic!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise InvalidInputError(
            f"{path}: payload size {len(raw) - _HEADER.size} does not match "
            f"{rows}x{cols} float32")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return frames.copy(), float(rate)


def write_mel(path: str | Path, frames: np.ndarray, frame_rate_hz: float) -> None:
    """Write a [T x 128] log-mel matrix as a MEL1 file."""
    arr = _as_2d_float32(frames)
    if arr.shape[1] != 128:
        raise InvalidInputError(f"mel files carry 128 channels, got {arr.shape[1]}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC_MEL, arr.shape[0], arr.shape[1], float(frame_rate_hz)))
        f.write(arr.tobytes(order="C"))


def read_mel(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a MEL1 file; returns (log-mel frames [T x 128], frame_rate_hz)."""
    frames, rate = read_frame_matrix(path, magic=MAGIC_MEL)
    if frames.shape[1] != 128:
        raise InvalidInputError(f"{path}: mel files carry 128 channels, got {frames.shape[1]}")
    return frames, rate


def write_vad_labels(path: str | Path, labels: np.ndarray, rate_hz: float) -> None:
    """Write binary voice-activity labels, one byte per frame (0 or 1)."""
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise InvalidInputError(f"labels must be 1-D, got shape {lab.shape}")
    if lab.size and not np.isin(lab, (0, 1)).all():
        raise InvalidInputError("labels must be 0/1")
    data = lab.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_VAD_HEADER.pack(MAGIC_VAD, data.size, float(rate_hz)))
        f.write(data.tobytes())


def read_vad_labels(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a VAD1 file; returns (uint8 labels, rate_hz)."""
    raw = Path(path).read_bytes()
    if len(raw) < _VAD_HEADER.size:
        raise InvalidInputError(f"{path}: truncated header ({len(raw)} bytes)")
    got_magic, count, rate = _VAD_HEADER.unpack_from(raw, 0)
    if got_magic != MAGIC_VAD:
        raise InvalidInputError(f"{path}: magic {got_magic!r}, expected {MAGIC_VAD!r}")
    if len(raw) != _VAD_HEADER.size + count:
        raise InvalidInputError(f"{path}: payload size mismatch for {count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=_VAD_HEADER.size)
    if labels.size and labels.max() > 1:
        raise InvalidInputError(f"{path}: labels must be 0/1")
    return labels.copy(), float(rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int = 44100) -> None:
    """Write mono 16-bit PCM. Samples are clipped to [-1, 1] before quantizing."""
    from scipy.io import wavfile

    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size and not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite samples")
    pcm = np.clip(x, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype(np.int16)
    wavfile.write(str(path), int(sample_rate_hz), pcm)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 in [-1, 1]; returns (samples, sample_rate)."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise InvalidInputError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483647.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV dtype {data.dtype}")
    return np.clip(samples, -1.0, 1.0), int(rate)


def write_manifest(path: str | Path, records: list[dict[str, str]]) -> None:
    """Write one record per line as tab-separated key=value pairs."""
    lines = []
    for rec in records:
        parts = []
        for key, value in rec.items():
            key = str(key)
            value = str(value)
            if "=" not in key and "\t" not in key and "\t" not in value and "\n" not in value:
                parts.append(f"{key}={value}")
            else:
                raise InvalidInputError(f"manifest field not representable: {key}={value!r}")
        lines.append("\t".join(parts))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: str | Path) -> list[dict[str, str]]:
    """Read tab-separated key=value records, skipping blank and # comment lines."""
    records: list[dict[str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.rstrip()
        if not line or line.lstrip().startswith("#"):
            continue
        rec: dict[str, str] = {}
        for field in line.split("\t"):
            if "=" not in field:
                raise InvalidInputError(f"{path}:{lineno}: field {field!r} is not key=value")
            key, value = field.split("=", 1)
            rec[key] = value
        records.append(rec)
    return records


def read_diarization(path: str | Path) -> list[tuple[str, float, float]]:
    """Read 'speaker_id start_s end_s' lines."""
    out: list[tuple[str, float, float]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 'speaker start end'")
        try:
            start, end = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: bad interval {line!r}") from exc
        if end < start:
            raise InvalidInputError(f"{path}:{lineno}: end before start")
        out.append((parts[0], start, end))
    return out


def read_scores(path: str | Path) -> dict[str, float]:
    """Read 'segment_id score' lines into a dict."""
    out: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidInputError(f"{path}:{lineno}: expected 'segment_id score'")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: bad score {parts[1]!r}") from exc
    return out


def read_transcripts(path: str | Path) -> dict[str, str]:
    """Read 'segment_id<TAB>text' lines into a dict."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'segment_id<TAB>text'")
        seg_id, text = line.split("\t", 1)
        out[seg_id.strip()] = text.rstrip("\n")
    return out
