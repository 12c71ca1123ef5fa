"""Semantic-to-spectrogram conditional flow matching.

Training regresses a vector-field network onto the optimal-transport
conditional field u_t = x1 - (1 - sigma_min) * x0 along the straight path
x_t = (1 - (1 - sigma_min) t) * x0 + t * x1; sampling integrates the learned
field from seeded Gaussian noise with fixed-step Euler.  The spectrogram
network conditions on per-frame semantic-token embeddings (projected to mel
width) and a broadcast speaker vector, channel-concatenated with the state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError
from .features import MEL_FRAME_RATE_HZ, TokenSequence, interpolate_tokens
from .refenc import SPEAKER_EMBED_DIM, ReferenceEncoder, SpeakerEmbedding
from .spectral import LOG_MEL_FLOOR, MelSpectrogram
from .unet import UNet1D, sinusoidal_embedding

__all__ = [
    "CFMConfig",
    "FlowState",
    "ot_path_sample",
    "cfm_loss",
    "euler_sample",
    "ToyVectorField",
    "SpectrogramFlow",
    "train_cfm_step",
    "fit_mel_length",
    "save_cfm_checkpoint",
    "load_cfm_checkpoint",
]


@dataclass
class CFMConfig:
    """Flow-matching and network hyperparameters for spectrogram generation."""

    sigma_min: float = 1e-4
    sample_steps: int = 20
    input_dim: int = 320
    intermediate_dim: int = 768
    mel_dim: int = 128
    speaker_dim: int = SPEAKER_EMBED_DIM
    down_blocks: int = 2
    mid_blocks: int = 2
    up_blocks: int = 2
    attn_heads: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma_min < 1.0:
            raise InvalidInputError("sigma_min must lie in [0, 1)")
        if self.sample_steps < 1:
            raise InvalidInputError("sample_steps must be >= 1")
        if self.input_dim != 2 * self.mel_dim + self.speaker_dim:
            raise InvalidInputError(
                "input_dim must equal 2 * mel_dim + speaker_dim "
                f"({2 * self.mel_dim + self.speaker_dim}), got {self.input_dim}")
        if self.intermediate_dim % self.attn_heads != 0:
            raise InvalidInputError("intermediate_dim must divide by attn_heads")
        if self.down_blocks != self.up_blocks:
            raise InvalidInputError("down and up block counts must match")
        if self.mid_blocks < 1:
            raise InvalidInputError("need at least one middle block")


@dataclass
class FlowState:
    """A point x on the flow at time t in [0, 1]."""

    x: np.ndarray
    t: float

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError("flow state contains non-finite values")
        if not 0.0 <= self.t <= 1.0:
            raise InvalidInputError("flow time must lie in [0, 1]")


def ot_path_sample(x0, x1, t, sigma_min: float = 1e-4) -> tuple[torch.Tensor, torch.Tensor]:
    """Point and target field on the straight conditional path from x0 to x1.

    x_t = (1 - (1 - sigma_min) t) * x0 + t * x1 and u_t = x1 - (1 - sigma_min) * x0.
    t may be a scalar or a tensor broadcastable against the samples.
    """
    x0 = x0 if torch.is_tensor(x0) else torch.as_tensor(x0, dtype=torch.float64)
    x1 = x1 if torch.is_tensor(x1) else torch.as_tensor(x1, dtype=torch.float64)
    if x0.shape != x1.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if not 0.0 <= sigma_min < 1.0:
        raise InvalidInputError("sigma_min must lie in [0, 1)")
    t = t if torch.is_tensor(t) else torch.as_tensor(float(t), dtype=x0.dtype)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise InvalidInputError("path time must lie in [0, 1]")
    keep = 1.0 - (1.0 - sigma_min) * t
    x_t = keep * x0 + t * x1
    u_t = x1 - (1.0 - sigma_min) * x0
    return x_t, u_t.expand_as(x_t) if u_t.shape != x_t.shape else u_t


def cfm_loss(x1: torch.Tensor, mu: torch.Tensor | None, spk: torch.Tensor | None,
             net, rng_seed: int, *, sigma_min: float = 1e-4) -> torch.Tensor:
    """Mean squared error between the conditional field and the network output.

    Draws one t ~ U[0,1] and one x0 ~ N(0, I) per sample from a generator
    seeded with rng_seed (t first, then x0).
    """
    if not torch.is_tensor(x1):
        x1 = torch.as_tensor(np.asarray(x1))
    if x1.dim() < 2:
        raise InvalidInputError("x1 must be a batch: [B x ...]")
    if mu is not None and mu.shape[-2] != x1.shape[-2]:
        raise InvalidInputError(
            f"condition length {mu.shape[-2]} must match sample length {x1.shape[-2]}")
    bsz = x1.shape[0]
    gen = torch.Generator().manual_seed(int(rng_seed))
    t = torch.rand(bsz, generator=gen, dtype=x1.dtype)
    x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
    t_b = t.view(bsz, *([1] * (x1.dim() - 1)))
    x_t, u_t = ot_path_sample(x0, x1, t_b, sigma_min)
    v = net(x_t, t, mu, spk)
    return torch.mean((u_t - v) ** 2)


def euler_sample(net, mu: torch.Tensor | None = None, spk: torch.Tensor | None = None,
                 *, steps: int = 20, seed: int = 0, shape: tuple[int, ...] | None = None,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Integrate x' = net(x, t, mu, spk) from seeded noise over a uniform grid.

    x steps by net(x, i/steps, ...) / steps for i = 0..steps-1, so the result
    is deterministic given (net parameters, seed, steps).
    """
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    if shape is None:
        if mu is None:
            raise InvalidInputError("shape is required when no condition frames are given")
        mel_dim = getattr(net, "mel_dim", 128)
        shape = (mu.shape[-2], mel_dim)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=gen, dtype=dtype)
    for i in range(steps):
        x = x + net(x, i / steps, mu, spk) / steps
    return x


class ToyVectorField(nn.Module):
    """Small MLP vector field over low-dimensional points, for sanity studies."""

    def __init__(self, dim: int = 2, hidden: int = 128, depth: int = 3,
                 temb_dim: int = 32, *, init_seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.dim = dim
        self.temb_dim = temb_dim
        layers: list[nn.Module] = [nn.Linear(dim + temb_dim, hidden, dtype=dtype), nn.SiLU()]
        for _ in range(depth - 1):
            layers += [nn.Linear(hidden, hidden, dtype=dtype), nn.SiLU()]
        layers.append(nn.Linear(hidden, dim, dtype=dtype))
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(int(init_seed))
        for mod in self.net:
            if isinstance(mod, nn.Linear):
                mod.weight.data.normal_(0.0, 1.0 / math.sqrt(mod.in_features), generator=gen)
                mod.bias.data.zero_()

    def forward(self, x: torch.Tensor, t, mu=None, spk=None) -> torch.Tensor:
        temb = sinusoidal_embedding(t, self.temb_dim).to(x.dtype)
        if temb.shape[0] == 1 and x.shape[0] != 1:
            temb = temb.expand(x.shape[0], -1)
        return self.net(torch.cat((x, temb), dim=-1))


class SpectrogramFlow(nn.Module):
    """Vector-field network over normalized log-mels with token and timbre
    conditioning; owns the mel normalization statistics as buffers."""

    def __init__(self, cfg: CFMConfig, semantic_vocab: int, *, init_seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if semantic_vocab < 2:
            raise InvalidInputError("semantic vocab must be at least 2")
        self.cfg = cfg
        self.semantic_vocab = int(semantic_vocab)
        self.token_emb = nn.Embedding(self.semantic_vocab, cfg.mel_dim, dtype=dtype)
        self.ref_encoder = ReferenceEncoder(init_seed=init_seed + 2, dtype=dtype)
        self.unet = UNet1D(cfg.input_dim, cfg.mel_dim, cfg.intermediate_dim,
                           cfg.down_blocks, cfg.mid_blocks, cfg.up_blocks,
                           cfg.attn_heads, init_seed=init_seed, dtype=dtype)
        gen = torch.Generator().manual_seed(int(init_seed) + 1)
        self.token_emb.weight.data.normal_(0.0, 0.02, generator=gen)
        self.register_buffer("mel_mean", torch.zeros(cfg.mel_dim, dtype=dtype))
        self.register_buffer("mel_std", torch.ones(cfg.mel_dim, dtype=dtype))

    @property
    def mel_dim(self) -> int:
        return self.cfg.mel_dim

    @property
    def param_dtype(self) -> torch.dtype:
        return self.token_emb.weight.dtype

    def set_mel_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        std = np.asarray(std, dtype=np.float64).reshape(-1)
        if mean.shape[0] != self.cfg.mel_dim or std.shape[0] != self.cfg.mel_dim:
            raise InvalidInputError(f"mel stats must have {self.cfg.mel_dim} channels")
        if np.any(std <= 0) or not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise InvalidInputError("mel std must be positive and stats finite")
        self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.param_dtype))
        self.mel_std.copy_(torch.as_tensor(std, dtype=self.param_dtype))

    def normalize_mel(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - self.mel_mean) / self.mel_std

    def denormalize_mel(self, frames: torch.Tensor) -> torch.Tensor:
        return frames * self.mel_std + self.mel_mean

    def condition_frames(self, tokens: TokenSequence) -> torch.Tensor:
        """Resample semantic-token embeddings to the mel frame rate."""
        if tokens.vocab_size != self.semantic_vocab:
            raise InvalidInputError("token vocab mismatch with model config")
        table = self.token_emb.weight.detach().double().numpy()
        aligned = interpolate_tokens(tokens, table, MEL_FRAME_RATE_HZ)
        return torch.as_tensor(aligned.frames).to(self.param_dtype)

    def forward(self, x_t: torch.Tensor, t, mu: torch.Tensor, spk: torch.Tensor | None) -> torch.Tensor:
        squeeze = x_t.dim() == 2
        if squeeze:
            x_t = x_t.unsqueeze(0)
            mu = mu.unsqueeze(0) if mu is not None and mu.dim() == 2 else mu
        if mu is None or x_t.dim() != 3 or mu.dim() != 3:
            raise InvalidInputError("expected x_t [B x T x mel] and mu [B x T x mel]")
        bsz, length, _ = x_t.shape
        if spk is None:
            spk = torch.zeros(bsz, self.cfg.speaker_dim, dtype=self.param_dtype)
        elif spk.dim() == 1:
            spk = spk.unsqueeze(0).expand(bsz, -1)
        channels = x_t.shape[2] + mu.shape[2] + spk.shape[1]
        if channels != self.cfg.input_dim or mu.shape[1] != length:
            raise InvalidInputError(
                f"condition assembly must yield {self.cfg.input_dim} channels over a shared "
                f"time axis; got {channels} channels, lengths {length} vs {mu.shape[1]}")
        dtype = self.param_dtype
        stacked = torch.cat((
            x_t.to(dtype).transpose(1, 2),
            mu.to(dtype).transpose(1, 2),
            spk.to(dtype).unsqueeze(2).expand(-1, -1, length),
        ), dim=1)
        out = self.unet(stacked, t).transpose(1, 2)
        return out.squeeze(0) if squeeze else out

    def training_loss(self, batch: dict, rng_seed: int) -> torch.Tensor:
        """cfm_loss over a batch dict: mel [B,T,128] raw log-mels, tokens [B,T]
        ids already at the mel frame rate, and speaker [B,64] or ref_mel [B,R,128]."""
        try:
            mel = torch.as_tensor(np.asarray(batch["mel"])).to(self.param_dtype)
            ids = torch.as_tensor(np.asarray(batch["tokens"]), dtype=torch.int64)
        except KeyError as exc:
            raise InvalidInputError(f"batch is missing key {exc}") from None
        if mel.dim() != 3 or mel.shape[2] != self.cfg.mel_dim:
            raise InvalidInputError("mel batch must be [B x T x mel_dim]")
        if ids.shape != mel.shape[:2]:
            raise InvalidInputError("token ids must align one-to-one with mel frames")
        if ids.min() < 0 or ids.max() >= self.semantic_vocab:
            raise InvalidInputError("token ids out of range")
        x1 = self.normalize_mel(mel)
        mu = self.token_emb(ids)
        if "speaker" in batch and batch["speaker"] is not None:
            spk = torch.as_tensor(np.asarray(batch["speaker"])).to(self.param_dtype)
        elif "ref_mel" in batch and batch["ref_mel"] is not None:
            spk = self.ref_encoder(torch.as_tensor(np.asarray(batch["ref_mel"])).to(self.param_dtype))
        else:
            spk = None
        return cfm_loss(x1, mu, spk, self, rng_seed, sigma_min=self.cfg.sigma_min)

    def generate(self, tokens: TokenSequence, *, spk: SpeakerEmbedding | np.ndarray | None = None,
                 ref_mel: np.ndarray | None = None, steps: int | None = None,
                 seed: int = 0) -> MelSpectrogram:
        """Sample a spectrogram for one token sequence; deterministic given seed."""
        mu = self.condition_frames(tokens)
        if mu.shape[0] < self.unet.min_len:
            raise InvalidInputError(
                f"need at least {self.unet.min_len} mel frames of tokens to sample")
        spk_t: torch.Tensor | None = None
        if ref_mel is not None:
            spk_t = self.ref_encoder(torch.as_tensor(np.asarray(ref_mel)).to(self.param_dtype))
        elif spk is not None:
            values = spk.values if isinstance(spk, SpeakerEmbedding) else np.asarray(spk)
            spk_t = torch.as_tensor(values.reshape(-1)).to(self.param_dtype)
        with torch.no_grad():
            x = euler_sample(self, mu, spk_t, steps=steps or self.cfg.sample_steps,
                             seed=seed, shape=(mu.shape[0], self.cfg.mel_dim),
                             dtype=self.param_dtype)
            frames = self.denormalize_mel(x)
        return MelSpectrogram(frames.double().numpy())


def train_cfm_step(model: SpectrogramFlow, batch: dict, optimizer: torch.optim.Optimizer,
                   rng_seed: int, *, clip_norm: float | None = 1.0) -> float:
    """One optimizer step on the flow-matching objective; returns the loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = model.training_loss(batch, rng_seed)
    loss.backward()
    if clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return float(loss.detach())


def fit_mel_length(frames: np.ndarray, target_frames: int) -> np.ndarray:
    """Pad (with the log floor) or truncate a [T x 128] log-mel to a fixed length."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InvalidInputError("expected a [T x mel] matrix")
    if target_frames < 1:
        raise InvalidInputError("target_frames must be >= 1")
    if frames.shape[0] >= target_frames:
        return frames[:target_frames].copy()
    pad = np.full((target_frames - frames.shape[0], frames.shape[1]),
                  math.log(LOG_MEL_FLOOR), dtype=np.float64)
    return np.concatenate((frames, pad), axis=0)


def save_cfm_checkpoint(model: SpectrogramFlow, path, *, optimizer: torch.optim.Optimizer | None = None,
                        extra: dict | None = None) -> None:
    payload = {
        "kind": "spectrogram_cfm",
        "config": asdict(model.cfg),
        "semantic_vocab": model.semantic_vocab,
        "dtype": str(model.param_dtype).removeprefix("torch."),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_cfm_checkpoint(path, *, dtype: torch.dtype | None = None) -> tuple[SpectrogramFlow, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "spectrogram_cfm":
        raise InvalidInputError(f"not a spectrogram flow checkpoint: {path}")
    cfg = CFMConfig(**payload["config"])
    if dtype is None:
        dtype = getattr(torch, payload.get("dtype", "float32"))
    model = SpectrogramFlow(cfg, payload["semantic_vocab"], dtype=dtype)
    model.load_state_dict(payload["state"])
    return model, payload
