"""Frame-level features, the K-means semantic tokenizer, and rate alignment.

Continuous accompaniment/vocal features live in :class:`FeatureMatrix`
(50 Hz by default, matching self-supervised speech frames). A fitted
:class:`Codebook` turns vocal features into discrete semantic tokens;
token embeddings are then nearest-neighbor resampled to the spectrogram
frame rate for the flow-matching stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .formats import (
    MAGIC_CODEBOOK,
    MAGIC_FEATURES,
    read_frame_matrix,
    write_frame_matrix,
)

__all__ = [
    "FeatureMatrix",
    "Codebook",
    "TokenSequence",
    "AlignedConditionFrames",
    "fit_kmeans",
    "tokenize",
    "interpolate_tokens",
    "synth_features",
    "load_features",
    "save_features",
    "load_codebook",
    "save_codebook",
]

SSL_FRAME_RATE_HZ = 50.0
MEL_FRAME_RATE_HZ = 44100.0 / 512.0  # 86.13 fps, quoted as 86.1


@dataclass
class FeatureMatrix:
    """A [T x D] matrix of real-valued frames at a fixed frame rate."""

    frames: np.ndarray
    frame_rate_hz: float = SSL_FRAME_RATE_HZ

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise InvalidInputError(f"frames must be 2-D, got shape {self.frames.shape}")
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("non-finite values in feature frames")
        if not self.frame_rate_hz > 0:
            raise InvalidInputError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Codebook:
    """K-means centroids addressable by token id 0..k-1."""

    centroids: np.ndarray
    fit_seed: int = 0

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise InvalidInputError(f"centroids must be [k x D] with k >= 1, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise InvalidInputError("non-finite centroid values")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class TokenSequence:
    """Discrete token ids at a frame rate.

    The vocabulary includes one reserved end-of-sequence id, ``vocab_size - 1``.
    If present in ``ids`` it must be the last element. ``truncated`` marks a
    generated sequence that hit its length limit before emitting it.
    """

    ids: np.ndarray
    vocab_size: int
    frame_rate_hz: float = SSL_FRAME_RATE_HZ
    truncated: bool = False

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.vocab_size < 2:
            raise InvalidInputError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.ids.size:
            if self.ids.min() < 0 or self.ids.max() >= self.vocab_size:
                raise InvalidInputError("token id out of range")
            eos_hits = np.nonzero(self.ids == self.eos_id)[0]
            if eos_hits.size > 1 or (eos_hits.size == 1 and eos_hits[0] != self.ids.size - 1):
                raise InvalidInputError("end-of-sequence id may appear once, and only last")
        if not self.frame_rate_hz > 0:
            raise InvalidInputError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass
class AlignedConditionFrames:
    """Token embeddings resampled to the spectrogram frame rate."""

    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise InvalidInputError(f"frames must be 2-D, got shape {self.frames.shape}")
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("non-finite values in aligned frames")
        if not self.frame_rate_hz > 0:
            raise InvalidInputError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances [n x k], chunked to bound memory.

    Computed as sums of squared coordinate differences (not the expanded
    dot-product form) so results are bit-stable against the brute-force
    scan used in tests.
    """
    n, k = points.shape[0], centroids.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    chunk = max(1, int(2 ** 22 / max(1, k * points.shape[1])))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        diff = points[lo:hi, None, :] - centroids[None, :, :]
        out[lo:hi] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted seeding: each next centroid is drawn with
    probability proportional to its squared distance from the chosen set."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    d2 = _squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centroids[i:i + 1])[:, 0])
    return centroids


def fit_kmeans(frames: FeatureMatrix, k: int, seed: int = 0, max_iters: int = 100,
               *, max_points: int | None = None, return_trace: bool = False):
    """Fit a k-centroid codebook with Lloyd iterations.

    Parameters
    ----------
    frames : FeatureMatrix
        Training frames, T >= k.
    k : int
        Number of centroids.
    seed : int
        Seeds both the distance-weighted initialization and the optional
        subsampling; runs are bit-reproducible given (inputs, seed).
    max_iters : int
        Upper bound on Lloyd iterations; iteration stops early when the
        assignment is stable.
    max_points : int, optional
        If given, fit on a uniform random subsample of this many frames.
    return_trace : bool
        Also return the per-iteration objective (sum of squared distances
        to assigned centroids), which is non-increasing.

    Returns
    -------
    Codebook, or (Codebook, trace) when return_trace is set.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    points = np.asarray(frames.frames, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    if max_points is not None and max_points < points.shape[0]:
        if max_points < k:
            raise InvalidInputError(f"max_points {max_points} < k {k}")
        keep = rng.choice(points.shape[0], size=max_points, replace=False)
        keep.sort()
        points = points[keep]
    if points.shape[0] < k:
        raise InvalidInputError(f"need at least k={k} frames, got {points.shape[0]}")

    centroids = _kmeanspp_init(points, k, rng)
    trace: list[float] = []
    prev_assign: np.ndarray | None = None
    for _ in range(max(1, max_iters)):
        d2 = _squared_distances(points, centroids)
        assign = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(points.shape[0]), assign].sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # re-seed each empty cluster at the point currently farthest
            # from its centroid; strictly reduces that point's cost
            dist_to_own = d2[np.arange(points.shape[0]), assign]
            order = np.argsort(-dist_to_own, kind="stable")
            for j, slot in enumerate(np.nonzero(~nonempty)[0]):
                centroids[slot] = points[order[j % points.shape[0]]]

    book = Codebook(centroids=centroids, fit_seed=int(seed))
    if return_trace:
        return book, trace
    return book


def tokenize(frames: FeatureMatrix, codebook: Codebook) -> TokenSequence:
    """Assign each frame the id of its nearest centroid (ties: lowest index).

    The returned vocabulary is k + 1: ids 0..k-1 are centroids and id k is
    the reserved end-of-sequence symbol, which tokenize never emits.
    """
    if frames.dim != codebook.dim:
        raise InvalidInputError(
            f"feature dim {frames.dim} does not match codebook dim {codebook.dim}")
    if frames.num_frames == 0:
        ids = np.empty(0, dtype=np.int64)
    else:
        d2 = _squared_distances(np.asarray(frames.frames, dtype=np.float64),
                                codebook.centroids)
        ids = np.argmin(d2, axis=1).astype(np.int64)
    return TokenSequence(ids=ids, vocab_size=codebook.k + 1,
                         frame_rate_hz=frames.frame_rate_hz)


def interpolate_tokens(tokens: TokenSequence, embedding_table: np.ndarray,
                       target_rate_hz: float) -> AlignedConditionFrames:
    """Nearest-neighbor resample token embeddings to a new frame rate.

    Output length is round(T * target/source); output frame j copies the
    embedding of the token at source index floor((j + 0.5) * source/target),
    clamped to [0, T-1]. Equal rates reproduce the embedded sequence
    one-to-one.
    """
    table = np.asarray(embedding_table)
    if table.ndim != 2:
        raise InvalidInputError(f"embedding table must be 2-D, got shape {table.shape}")
    if table.shape[0] < tokens.vocab_size:
        raise InvalidInputError(
            f"embedding table has {table.shape[0]} rows for vocab {tokens.vocab_size}")
    if not target_rate_hz > 0:
        raise InvalidInputError(f"target_rate_hz must be positive, got {target_rate_hz}")
    source_rate = tokens.frame_rate_hz
    n_in = len(tokens)
    if n_in == 0:
        return AlignedConditionFrames(
            frames=np.empty((0, table.shape[1]), dtype=table.dtype),
            frame_rate_hz=target_rate_hz)
    n_out = int(np.floor(n_in * target_rate_hz / source_rate + 0.5))
    j = np.arange(n_out, dtype=np.float64)
    src = np.floor((j + 0.5) * source_rate / target_rate_hz).astype(np.int64)
    src = np.clip(src, 0, n_in - 1)
    return AlignedConditionFrames(frames=table[tokens.ids[src]],
                                  frame_rate_hz=target_rate_hz)


def synth_features(spec, seed: int):
    """Synthesize a paired (accompaniment features, vocal tokens) sample.

    Stand-in for an upstream self-supervised feature extractor; delegates to
    the rhythm-coupled toy generator. ``spec`` is a bench.ToySpec.
    """
    from .bench import gen_toy_pair

    accomp, vocal, _lyrics = gen_toy_pair(spec, seed)
    return accomp, vocal


def save_features(path: str | Path, features: FeatureMatrix) -> None:
    write_frame_matrix(path, features.frames, features.frame_rate_hz, magic=MAGIC_FEATURES)


def load_features(path: str | Path) -> FeatureMatrix:
    frames, rate = read_frame_matrix(path, magic=MAGIC_FEATURES)
    return FeatureMatrix(frames=frames, frame_rate_hz=rate)


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    # the rate slot is meaningless for a codebook; written as 0. The fit
    # seed is not carried by the file format (CLI sidecars record seeds).
    write_frame_matrix(path, codebook.centroids, 0.0, magic=MAGIC_CODEBOOK)


def load_codebook(path: str | Path) -> Codebook:
    centroids, _ = read_frame_matrix(path, magic=MAGIC_CODEBOOK)
    return Codebook(centroids=centroids, fit_seed=0)
