"""Reference encoder: a mel excerpt in, a 64-dim global timbre vector out.

Per-frame feed-forward layers, one self-attention layer with no positional
information, then an arithmetic mean over time. Nothing in the stack sees
frame order, so the embedding is invariant to frame permutations. Two
independent instances are used in practice (one conditioning the token
language model, one conditioning the spectrogram flow); they share this
architecture and never share parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError

__all__ = ["SpeakerEmbedding", "ReferenceEncoder", "encode_reference", "SPEAKER_EMBED_DIM"]

SPEAKER_EMBED_DIM = 64


@dataclass
class SpeakerEmbedding:
    """A fixed-length global timbre vector."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != SPEAKER_EMBED_DIM:
            raise InvalidInputError(
                f"speaker embeddings have length {SPEAKER_EMBED_DIM}, got {self.values.shape[0]}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("non-finite speaker embedding")


class ReferenceEncoder(nn.Module):
    """Permutation-invariant mel pooling network.

    Parameters
    ----------
    input_dim : int
        Channels per input frame (128 for log-mels).
    widths : tuple of int
        Feed-forward layer widths; the last is the embedding size.
    init_seed : int
        Seeds parameter initialization for reproducible instances.
    dtype : torch.dtype
        Parameter dtype; float64 is supported for gradient checking.
    """

    def __init__(self, input_dim: int = 128, widths: tuple[int, ...] = (128, 128, 64),
                 *, init_seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not widths:
            raise InvalidInputError("widths must be non-empty")
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)
        self.embed_dim = self.widths[-1]
        layers: list[nn.Module] = []
        prev = self.input_dim
        for w in self.widths:
            layers.append(nn.Linear(prev, w, dtype=dtype))
            layers.append(nn.SiLU())
            prev = w
        self.ff = nn.Sequential(*layers)
        # attention over frames: learned queries/keys, identity values and
        # no output projection, so a single frame passes through unchanged
        self.q_proj = nn.Linear(self.embed_dim, self.embed_dim, bias=False, dtype=dtype)
        self.k_proj = nn.Linear(self.embed_dim, self.embed_dim, bias=False, dtype=dtype)
        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for p in self.parameters():
            if p.dim() >= 2:
                p.data.normal_(0.0, 0.02, generator=gen)
            else:
                p.data.zero_()

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """Encode [T x input_dim] (or [B x T x input_dim]) to length-64 vectors."""
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        if mel.dim() != 3 or mel.shape[-1] != self.input_dim:
            raise InvalidInputError(
                f"expected [..., T, {self.input_dim}] input, got {tuple(mel.shape)}")
        if mel.shape[1] < 1:
            raise InvalidInputError("reference excerpt must have at least one frame")
        h = self.ff(mel)
        q = self.q_proj(h)
        k = self.k_proj(h)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.embed_dim)
        mixed = torch.softmax(scores, dim=-1) @ h
        pooled = mixed.mean(dim=1)
        return pooled.squeeze(0) if squeeze else pooled


def encode_reference(mel, encoder: ReferenceEncoder) -> SpeakerEmbedding:
    """Encode a reference mel excerpt ([T x input_dim] array or tensor) to a timbre vector."""
    if not torch.is_tensor(mel):
        mel = torch.as_tensor(np.asarray(mel))
    if mel.dim() != 2:
        raise InvalidInputError(f"expected a single [T x D] excerpt, got {tuple(mel.shape)}")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        pooled = encoder(mel.to(dtype))
    return SpeakerEmbedding(pooled.double().numpy())
