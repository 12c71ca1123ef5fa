"""1-D U-Net vector-field backbone for spectrogram flow matching.

Channel layout is [batch x channels x time].  Each resolution stage pairs a
FiLM-conditioned residual convolution block with a bidirectional transformer
block whose feed-forward uses the snake-beta activation; downsampling halves
the time axis with a strided convolution and upsampling mirrors it with a
transposed convolution, padding or cropping back to the skip length so any
input length above the minimum divisibility survives the round trip.
The final projection is zero-initialized: a freshly built network is the
zero vector field.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError

__all__ = ["sinusoidal_embedding", "SnakeBeta", "UNet1D"]


def sinusoidal_embedding(t: torch.Tensor, dim: int, *, max_period: float = 10000.0) -> torch.Tensor:
    """Embed times in [0, 1] (shape [B] or scalar) as [B x dim] sinusoids."""
    if dim % 2 != 0:
        raise InvalidInputError("sinusoidal embedding dim must be even")
    if not torch.is_tensor(t):
        t = torch.as_tensor(float(t))
    t = t.reshape(-1).double()
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    # unit-interval times are scaled up so the fastest sinusoid still resolves them
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat((args.cos(), args.sin()), dim=-1)


class SnakeBeta(nn.Module):
    """Periodic activation x + (1/beta) * sin^2(alpha * x) with per-channel
    log-parameterized alpha and beta (both start at 1)."""

    def __init__(self, channels: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.log_beta = nn.Parameter(torch.zeros(channels, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x is [..., channels]: broadcast the per-channel parameters over the rest
        alpha = self.log_alpha.exp()
        beta = self.log_beta.exp()
        return x + torch.sin(alpha * x) ** 2 / (beta + 1e-9)


class FiLMResBlock(nn.Module):
    """Two-conv residual block; the time embedding scales and shifts mid-block."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, dtype: torch.dtype):
        super().__init__()
        groups = 8 if out_ch % 8 == 0 else 1
        in_groups = 8 if in_ch % 8 == 0 else 1
        self.norm1 = nn.GroupNorm(in_groups, in_ch, dtype=dtype)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1, dtype=dtype)
        self.film = nn.Linear(temb_dim, 2 * out_ch, dtype=dtype)
        self.norm2 = nn.GroupNorm(groups, out_ch, dtype=dtype)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1, dtype=dtype)
        self.skip = nn.Conv1d(in_ch, out_ch, 1, dtype=dtype) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TimeAxisTransformer(nn.Module):
    """Bidirectional self-attention over the time axis with a snake-beta FFN."""

    def __init__(self, channels: int, heads: int, dtype: torch.dtype):
        super().__init__()
        if channels % heads != 0:
            raise InvalidInputError("transformer channels must divide by heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.attn_norm = nn.LayerNorm(channels, dtype=dtype)
        self.q_proj = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.k_proj = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.v_proj = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.o_proj = nn.Linear(channels, channels, bias=False, dtype=dtype)
        self.ffn_norm = nn.LayerNorm(channels, dtype=dtype)
        self.ffn_in = nn.Linear(channels, 2 * channels, dtype=dtype)
        self.ffn_act = SnakeBeta(2 * channels, dtype=dtype)
        self.ffn_out = nn.Linear(2 * channels, channels, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # [B, C, T] -> [B, T, C] for attention, back at the end
        y = x.transpose(1, 2)
        h = self.attn_norm(y)
        bsz, seq_len, channels = h.shape
        shape = (bsz, seq_len, self.heads, self.head_dim)
        q = self.q_proj(h).view(shape).transpose(1, 2)
        k = self.k_proj(h).view(shape).transpose(1, 2)
        v = self.v_proj(h).view(shape).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, seq_len, channels)
        y = y + self.o_proj(ctx)
        y = y + self.ffn_out(self.ffn_act(self.ffn_in(self.ffn_norm(y))))
        return y.transpose(1, 2)


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.res = FiLMResBlock(in_ch, out_ch, temb_dim, dtype)
        self.attn = TimeAxisTransformer(out_ch, heads, dtype)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.attn(self.res(x, temb))


class UNet1D(nn.Module):
    """Stacked down/mid/up stages over time; predicts a [T x mel] vector field.

    forward takes an already-assembled [B x in_channels x T] tensor plus the
    flow time t (scalar or [B]); output is [B x out_channels x T].
    """

    def __init__(self, in_channels: int, out_channels: int, channels: int,
                 down_blocks: int = 2, mid_blocks: int = 2, up_blocks: int = 2,
                 heads: int = 8, *, init_seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if down_blocks != up_blocks:
            raise InvalidInputError("down and up block counts must match")
        if down_blocks < 0 or mid_blocks < 1:
            raise InvalidInputError("need >= 0 down/up stages and >= 1 middle stage")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.min_len = 2 ** down_blocks
        self.temb_dim = channels
        self.time_mlp = nn.Sequential(
            nn.Linear(channels, channels, dtype=dtype), nn.SiLU(),
            nn.Linear(channels, channels, dtype=dtype))
        self.in_proj = nn.Conv1d(in_channels, channels, 1, dtype=dtype)
        self.down_stages = nn.ModuleList(
            _Stage(channels, channels, channels, heads, dtype) for _ in range(down_blocks))
        self.downsamplers = nn.ModuleList(
            nn.Conv1d(channels, channels, 4, stride=2, padding=1, dtype=dtype)
            for _ in range(down_blocks))
        self.mid_stages = nn.ModuleList(
            _Stage(channels, channels, channels, heads, dtype) for _ in range(mid_blocks))
        self.upsamplers = nn.ModuleList(
            nn.ConvTranspose1d(channels, channels, 4, stride=2, padding=1, dtype=dtype)
            for _ in range(up_blocks))
        self.up_stages = nn.ModuleList(
            _Stage(2 * channels, channels, channels, heads, dtype) for _ in range(up_blocks))
        self.out_norm = nn.GroupNorm(8 if channels % 8 == 0 else 1, channels, dtype=dtype)
        self.out_proj = nn.Conv1d(channels, out_channels, 1, dtype=dtype)
        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Conv1d, nn.ConvTranspose1d)):
                w = mod.weight
                fan_in = w.shape[1] * (w.shape[2] if w.dim() == 3 else 1)
                if isinstance(mod, nn.ConvTranspose1d):
                    fan_in = w.shape[0] * w.shape[2]
                w.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
                if mod.bias is not None:
                    mod.bias.data.zero_()
            elif isinstance(mod, (nn.GroupNorm, nn.LayerNorm)):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, SnakeBeta):
                nn.init.zeros_(mod.log_alpha)
                nn.init.zeros_(mod.log_beta)
        # zero final projection: an untrained network is the zero field
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"expected [B x {self.in_channels} x T] input, got {tuple(x.shape)}")
        if x.shape[2] < self.min_len:
            raise InvalidInputError(
                f"time axis must have at least {self.min_len} frames, got {x.shape[2]}")
        dtype = self.out_proj.weight.dtype
        if not torch.is_tensor(t):
            t = torch.as_tensor(float(t))
        t = t.reshape(-1)
        if t.shape[0] == 1 and x.shape[0] != 1:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(sinusoidal_embedding(t, self.temb_dim).to(dtype))

        h = self.in_proj(x.to(dtype))
        skips = []
        for stage, down in zip(self.down_stages, self.downsamplers):
            h = stage(h, temb)
            skips.append(h)
            h = down(h)
        for stage in self.mid_stages:
            h = stage(h, temb)
        for stage, up in zip(self.up_stages, self.upsamplers):
            skip = skips.pop()
            h = up(h)
            if h.shape[2] > skip.shape[2]:
                h = h[:, :, :skip.shape[2]]
            elif h.shape[2] < skip.shape[2]:
                h = F.pad(h, (0, skip.shape[2] - h.shape[2]))
            h = stage(torch.cat((h, skip), dim=1), temb)
        return self.out_proj(F.silu(self.out_norm(h)))
