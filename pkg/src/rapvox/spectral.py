"""Audio-to-mel analysis, desk-scale spectrogram inversion, and the external
vocoder interface.

Analysis is a centered STFT (window 2048, hop 512, periodic Hann) followed by
a 128-band triangular mel filterbank spanning 0-22050 Hz and natural-log
compression with a 1e-5 floor.  Inversion is iterative phase estimation over
the pseudo-inverse mel magnitudes; a pretrained neural vocoder is reached only
through a subprocess contract and never reimplemented here.
"""

from __future__ import annotations

import functools
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import ExternalToolError, InvalidInputError
from .features import MEL_FRAME_RATE_HZ
from .formats import read_wav, write_mel

__all__ = [
    "SAMPLE_RATE_HZ",
    "N_FFT",
    "HOP_LENGTH",
    "N_MELS",
    "LOG_MEL_FLOOR",
    "AudioClip",
    "MelSpectrogram",
    "mel_filterbank",
    "mel_analyze",
    "griffin_lim_invert",
    "vocoder_ingest",
]

SAMPLE_RATE_HZ = 44100
N_FFT = 2048
HOP_LENGTH = 512
N_MELS = 128
LOG_MEL_FLOOR = 1e-5


@dataclass
class AudioClip:
    """Mono audio in [-1, 1] at 44.1 kHz."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio contains non-finite samples")
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0 + 1e-6:
            raise InvalidInputError(f"audio exceeds full scale (peak {peak:.3f})")
        np.clip(self.samples, -1.0, 1.0, out=self.samples)

    @property
    def num_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    """Natural-log mel magnitudes, one row per frame, 128 channels."""

    frames: np.ndarray
    frame_rate_hz: float = MEL_FRAME_RATE_HZ
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise InvalidInputError(
                f"mel spectrogram must be [T x {N_MELS}], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("mel spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=4)
def _filterbank_cached(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * sr / n_fft
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for i in range(n_mels):
        lo, ctr, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_filterbank() -> np.ndarray:
    """Triangular [128 x 1025] mel weights, 0-22050 Hz, unnormalized."""
    return _filterbank_cached(N_MELS, N_FFT, SAMPLE_RATE_HZ).copy()


def _analysis_window() -> np.ndarray:
    return get_window("hann", N_FFT, fftbins=True).astype(np.float64)


def _center_pad(x: np.ndarray) -> np.ndarray:
    pad = N_FFT // 2
    mode = "reflect" if x.size > pad else "constant"
    return np.pad(x, pad, mode=mode)


def _stft(x: np.ndarray) -> np.ndarray:
    """Complex STFT [n_frames x n_bins] of centered audio; 1 + len//hop frames."""
    padded = _center_pad(x)
    n_frames = 1 + x.size // HOP_LENGTH
    window = _analysis_window()
    frames = np.empty((n_frames, N_FFT), dtype=np.float64)
    for t in range(n_frames):
        start = t * HOP_LENGTH
        chunk = padded[start:start + N_FFT]
        if chunk.size < N_FFT:
            chunk = np.pad(chunk, (0, N_FFT - chunk.size))
        frames[t] = chunk
    return np.fft.rfft(frames * window, axis=1)


def _istft(spec: np.ndarray, n_samples: int) -> np.ndarray:
    """Weighted overlap-add inverse of _stft, trimmed to n_samples."""
    n_frames = spec.shape[0]
    window = _analysis_window()
    total = N_FFT + (n_frames - 1) * HOP_LENGTH
    acc = np.zeros(total, dtype=np.float64)
    norm = np.zeros(total, dtype=np.float64)
    chunks = np.fft.irfft(spec, n=N_FFT, axis=1)
    for t in range(n_frames):
        start = t * HOP_LENGTH
        acc[start:start + N_FFT] += chunks[t] * window
        norm[start:start + N_FFT] += window * window
    acc /= np.maximum(norm, 1e-10)
    out = acc[N_FFT // 2:N_FFT // 2 + n_samples]
    if out.size < n_samples:
        out = np.pad(out, (0, n_samples - out.size))
    return out


def mel_analyze(audio: AudioClip | np.ndarray) -> MelSpectrogram:
    """Log-mel analysis; frame count is floor(n_samples / hop) + 1."""
    samples = audio.samples if isinstance(audio, AudioClip) else np.asarray(audio, dtype=np.float64)
    samples = samples.reshape(-1)
    if samples.size == 0:
        raise InvalidInputError("cannot analyze empty audio")
    if not np.all(np.isfinite(samples)):
        raise InvalidInputError("audio contains non-finite samples")
    mag = np.abs(_stft(samples))
    mel = mag @ _filterbank_cached(N_MELS, N_FFT, SAMPLE_RATE_HZ).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_MEL_FLOOR)))


def griffin_lim_invert(mel: MelSpectrogram, iters: int = 60, seed: int = 0) -> AudioClip:
    """Invert log-mels to audio via pseudo-inverse magnitudes and iterative
    phase estimation; output is exactly num_frames * hop samples.

    The phase starts near zero with a small seeded jitter: a coherent start
    converges much further in 60 iterations than full-circle random phase,
    while the jitter keeps distinct seeds distinguishable.
    """
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    fb = _filterbank_cached(N_MELS, N_FFT, SAMPLE_RATE_HZ)
    linear = np.exp(mel.frames) @ np.linalg.pinv(fb).T
    np.clip(linear, 0.0, None, out=linear)
    n_samples = mel.num_frames * HOP_LENGTH
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    phase = np.exp(2j * np.pi * 0.002 * (rng.random(linear.shape) - 0.5))
    for _ in range(iters):
        rebuilt = _stft(_istft(linear * phase, n_samples))
        rebuilt = rebuilt[:linear.shape[0]]
        mag = np.abs(rebuilt)
        phase = rebuilt / np.maximum(mag, 1e-12)
    audio = _istft(linear * phase, n_samples)
    peak = np.max(np.abs(audio))
    if peak > 1.0:
        audio = audio / peak
    return AudioClip(np.clip(audio, -1.0, 1.0))


def vocoder_ingest(mel: MelSpectrogram, external_cmd: str, *, timeout_s: float = 600.0) -> AudioClip:
    """Hand a mel file to an external pretrained vocoder command and read back audio.

    external_cmd is a template with {mel} and {wav} placeholders, e.g.
    "bigvgan-cli --mel {mel} --out {wav}".  The command must write mono
    44.1 kHz WAV; any failure surfaces as ExternalToolError with captured
    stderr.
    """
    if "{mel}" not in external_cmd or "{wav}" not in external_cmd:
        raise InvalidInputError("external_cmd must contain {mel} and {wav} placeholders")
    with tempfile.TemporaryDirectory(prefix="vocoder_") as tmp:
        mel_path = Path(tmp) / "input.mel"
        wav_path = Path(tmp) / "output.wav"
        write_mel(mel_path, mel.frames, frame_rate_hz=mel.frame_rate_hz)
        cmd = [part.format(mel=str(mel_path), wav=str(wav_path))
               for part in shlex.split(external_cmd)]
        cmd_text = " ".join(cmd)
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout_s)
        except FileNotFoundError as exc:
            raise ExternalToolError(f"vocoder command not found: {exc}",
                                    command=cmd_text) from None
        except subprocess.TimeoutExpired:
            raise ExternalToolError(f"vocoder timed out after {timeout_s}s",
                                    command=cmd_text) from None
        if proc.returncode != 0:
            raise ExternalToolError("vocoder exited with nonzero status",
                                    command=cmd_text, returncode=proc.returncode,
                                    stderr=proc.stderr)
        if not wav_path.exists():
            raise ExternalToolError("vocoder exited 0 but wrote no output file",
                                    command=cmd_text, returncode=proc.returncode,
                                    stderr=proc.stderr)
        samples, rate = read_wav(wav_path)
        if rate != SAMPLE_RATE_HZ:
            raise ExternalToolError(
                f"vocoder wrote {rate} Hz output, expected {SAMPLE_RATE_HZ} Hz",
                command=cmd_text, returncode=proc.returncode, stderr=proc.stderr)
        return AudioClip(samples)
