"""Lyrics-to-semantic language model with shifted accompaniment conditioning.

The decoder is a pre-norm causal transformer over a single mixed sequence:
position 0 carries a projected speaker vector, the lyric region carries
lyric-token embeddings, and the semantic region carries teacher-forced
semantic-token embeddings summed with a projected accompaniment frame.
Semantic inputs are delayed one step (the EOS id doubles as the start
symbol), so the logits at semantic position t predict semantic token t
while the accompaniment summed into that position is pre-shift frame t+K:
the model conditions on accompaniment up to K frames ahead of the token it
is predicting.  Accompaniment conditioning is randomly masked during
training (full mask, or a suffix of the latter half) so inference works
with or without an accompaniment track.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError
from .features import SSL_FRAME_RATE_HZ, FeatureMatrix, TokenSequence
from .refenc import SPEAKER_EMBED_DIM, ReferenceEncoder, SpeakerEmbedding

__all__ = [
    "LYRICS_PAD_ID",
    "LYRICS_BOUNDARY_ID",
    "TEXT_LYRICS_VOCAB",
    "REGION_SPEAKER",
    "REGION_LYRICS",
    "REGION_SEMANTIC",
    "LyricsTokens",
    "LMConfig",
    "MaskDescriptor",
    "MixedSequence",
    "SamplingConfig",
    "encode_lyrics",
    "shift_accompaniment",
    "apply_accomp_mask",
    "SemanticLM",
    "build_mixed_sequence",
    "lm_forward",
    "lm_loss",
    "train_lm_step",
    "generate_semantic",
    "generate_semantic_batch",
    "parameter_count",
    "save_lm_checkpoint",
    "load_lm_checkpoint",
]

LYRICS_PAD_ID = 0
LYRICS_BOUNDARY_ID = 1
# pad + boundary + one id per byte value
TEXT_LYRICS_VOCAB = 258

REGION_SPEAKER = 0
REGION_LYRICS = 1
REGION_SEMANTIC = 2


@dataclass
class LyricsTokens:
    """Integer lyric tokens; id 0 is padding, id 1 is the phrase boundary."""

    ids: np.ndarray
    vocab_size: int

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.vocab_size = int(self.vocab_size)
        if self.vocab_size < 2:
            raise InvalidInputError("lyric vocab must include pad and boundary ids")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab_size):
            raise InvalidInputError(
                f"lyric ids must lie in [0, {self.vocab_size})")

    def __len__(self) -> int:
        return int(self.ids.size)


def encode_lyrics(text: str, *, vocab_size: int = TEXT_LYRICS_VOCAB) -> LyricsTokens:
    """Byte-level lyric encoding: byte b maps to id 2+b, terminated by a boundary id."""
    if vocab_size < TEXT_LYRICS_VOCAB:
        raise InvalidInputError(
            f"byte-level lyrics need vocab >= {TEXT_LYRICS_VOCAB}, got {vocab_size}")
    ids = [2 + b for b in text.encode("utf-8")]
    ids.append(LYRICS_BOUNDARY_ID)
    return LyricsTokens(np.asarray(ids, dtype=np.int64), vocab_size)


@dataclass
class LMConfig:
    """Architecture and conditioning hyperparameters for the semantic LM."""

    semantic_vocab: int
    lyrics_vocab: int
    accomp_dim: int
    layers: int = 6
    hidden: int = 1024
    intermediate: int = 4096
    heads: int = 16
    speaker_dim: int = SPEAKER_EMBED_DIM
    shift_K: int = 150
    mask_full_prob: float = 0.5
    max_len: int = 4096
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.semantic_vocab < 2 or self.lyrics_vocab < 2:
            raise InvalidInputError("vocab sizes must be at least 2")
        if self.accomp_dim < 1:
            raise InvalidInputError("accomp_dim must be positive")
        if self.layers < 1 or self.hidden < 1 or self.intermediate < 1:
            raise InvalidInputError("layers, hidden and intermediate must be positive")
        if self.hidden % self.heads != 0:
            raise InvalidInputError("hidden must be divisible by heads")
        if (self.hidden // self.heads) % 2 != 0:
            raise InvalidInputError("head dim must be even for rotary positions")
        if self.shift_K < 0:
            raise InvalidInputError("shift_K must be >= 0")
        if not 0.0 <= self.mask_full_prob <= 1.0:
            raise InvalidInputError("mask_full_prob must lie in [0, 1]")
        if self.max_len < 4:
            raise InvalidInputError("max_len too small to hold any mixed sequence")

    @property
    def eos_id(self) -> int:
        return self.semantic_vocab - 1


@dataclass(frozen=True)
class MaskDescriptor:
    """Which accompaniment mask branch was taken and how many frames it zeroed."""

    full: bool
    suffix_len: int


@dataclass
class MixedSequence:
    """Assembled input embeddings plus a region tag per position.

    Tags are REGION_SPEAKER / REGION_LYRICS / REGION_SEMANTIC and must form
    one contiguous run each, in that order, with the speaker at index 0.
    """

    embeddings: torch.Tensor
    region_tags: np.ndarray

    def __post_init__(self) -> None:
        if not torch.is_tensor(self.embeddings) or self.embeddings.dim() != 2:
            raise InvalidInputError("embeddings must be a [seq_len x hidden] tensor")
        self.region_tags = np.asarray(self.region_tags, dtype=np.int8).reshape(-1)
        if self.region_tags.shape[0] != self.embeddings.shape[0]:
            raise InvalidInputError("one region tag per sequence position required")
        tags = self.region_tags
        if tags.shape[0] < 1 or tags[0] != REGION_SPEAKER or np.sum(tags == REGION_SPEAKER) != 1:
            raise InvalidInputError("exactly one speaker position, at index 0")
        # contiguous ordered runs: tags must be non-decreasing over the known values
        if np.any(np.diff(tags) < 0) or not np.all(np.isin(tags, (REGION_SPEAKER, REGION_LYRICS, REGION_SEMANTIC))):
            raise InvalidInputError("region tags must be contiguous in speaker/lyrics/semantic order")

    @property
    def num_lyrics(self) -> int:
        return int(np.sum(self.region_tags == REGION_LYRICS))

    @property
    def num_semantic(self) -> int:
        return int(np.sum(self.region_tags == REGION_SEMANTIC))

    @property
    def semantic_slice(self) -> slice:
        start = 1 + self.num_lyrics
        return slice(start, start + self.num_semantic)


@dataclass
class SamplingConfig:
    """Decoding controls; temperature 0 means greedy argmax."""

    temperature: float = 0.9
    top_k: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if self.top_k < 0:
            raise InvalidInputError("top_k must be >= 0 (0 disables the filter)")


def shift_accompaniment(accomp: FeatureMatrix, K: int, target_len: int) -> FeatureMatrix:
    """Advance accompaniment by K frames: output row t is input row t+K, zero past the end.

    The output always has exactly target_len rows; the tail beyond the input
    is zero-filled so vocal and accompaniment regions can share one length.
    """
    if K < 0:
        raise InvalidInputError("shift K must be >= 0")
    if target_len < 0:
        raise InvalidInputError("target_len must be >= 0")
    src = accomp.frames
    out = np.zeros((target_len, src.shape[1]), dtype=src.dtype)
    avail = min(target_len, max(0, src.shape[0] - K))
    if avail > 0:
        out[:avail] = src[K:K + avail]
    return FeatureMatrix(out, accomp.frame_rate_hz)


def apply_accomp_mask(accomp: FeatureMatrix, rng_seed: int, full_prob: float) -> tuple[FeatureMatrix, MaskDescriptor]:
    """Randomly mask accompaniment: full zeroing with probability full_prob,
    else zero a uniform-length suffix confined to the latter half."""
    if not 0.0 <= full_prob <= 1.0:
        raise InvalidInputError("full_prob must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(int(rng_seed)))
    frames = accomp.frames.copy()
    n = frames.shape[0]
    if rng.random() < full_prob:
        frames[:] = 0.0
        return FeatureMatrix(frames, accomp.frame_rate_hz), MaskDescriptor(True, n)
    m = int(rng.integers(0, n // 2 + 1))
    if m > 0:
        frames[n - m:] = 0.0
    return FeatureMatrix(frames, accomp.frame_rate_hz), MaskDescriptor(False, m)


class RMSNorm(nn.Module):
    """Root-mean-square normalization with a learned per-channel gain."""

    def __init__(self, dim: int, eps: float = 1e-6, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat((-x[..., half:], x[..., :half]), dim=-1)


class CausalSelfAttention(nn.Module):
    """Multi-head causal attention with rotary relative positions."""

    def __init__(self, hidden: int, heads: int, rope_base: float, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.q_proj = nn.Linear(hidden, hidden, bias=False, dtype=dtype)
        self.k_proj = nn.Linear(hidden, hidden, bias=False, dtype=dtype)
        self.v_proj = nn.Linear(hidden, hidden, bias=False, dtype=dtype)
        self.o_proj = nn.Linear(hidden, hidden, bias=False, dtype=dtype)
        inv_freq = rope_base ** (-torch.arange(0, self.head_dim, 2, dtype=torch.float64) / self.head_dim)
        self.register_buffer("inv_freq", inv_freq, persistent=False)

    def _rope(self, seq_len: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        pos = torch.arange(seq_len, dtype=torch.float64)
        freqs = torch.outer(pos, self.inv_freq)
        emb = torch.cat((freqs, freqs), dim=-1)
        return emb.cos().to(dtype), emb.sin().to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bsz, seq_len, hidden = x.shape
        shape = (bsz, seq_len, self.heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        cos, sin = self._rope(seq_len, x.dtype)
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # additive -inf mask: future weights are exactly zero after softmax,
        # which keeps causality bit-exact rather than merely approximate
        causal = torch.triu(torch.ones(seq_len, seq_len, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        ctx = ctx.transpose(1, 2).reshape(bsz, seq_len, hidden)
        return self.o_proj(ctx)


class GatedFeedForward(nn.Module):
    """SiLU-gated feed-forward: down(silu(gate(x)) * up(x))."""

    def __init__(self, hidden: int, intermediate: int, dtype: torch.dtype):
        super().__init__()
        self.gate_proj = nn.Linear(hidden, intermediate, bias=False, dtype=dtype)
        self.up_proj = nn.Linear(hidden, intermediate, bias=False, dtype=dtype)
        self.down_proj = nn.Linear(intermediate, hidden, bias=False, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: LMConfig, dtype: torch.dtype):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.hidden, cfg.norm_eps, dtype)
        self.attn = CausalSelfAttention(cfg.hidden, cfg.heads, cfg.rope_base, dtype)
        self.ffn_norm = RMSNorm(cfg.hidden, cfg.norm_eps, dtype)
        self.ffn = GatedFeedForward(cfg.hidden, cfg.intermediate, dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))


class SemanticLM(nn.Module):
    """Causal transformer over [speaker, lyrics, semantic] mixed sequences.

    Owns the reference encoder used to derive speaker vectors from mel
    excerpts, so timbre conditioning trains jointly with the decoder.
    """

    def __init__(self, cfg: LMConfig, *, init_seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.semantic_emb = nn.Embedding(cfg.semantic_vocab, cfg.hidden, dtype=dtype)
        self.lyrics_emb = nn.Embedding(cfg.lyrics_vocab, cfg.hidden, dtype=dtype)
        # bias-free projections: a zero accompaniment frame or zero speaker
        # vector contributes exactly nothing to the mixed embedding
        self.accomp_proj = nn.Linear(cfg.accomp_dim, cfg.hidden, bias=False, dtype=dtype)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, cfg.hidden, bias=False, dtype=dtype)
        self.blocks = nn.ModuleList(DecoderBlock(cfg, dtype) for _ in range(cfg.layers))
        self.final_norm = RMSNorm(cfg.hidden, cfg.norm_eps, dtype)
        self.head = nn.Linear(cfg.hidden, cfg.semantic_vocab, bias=False, dtype=dtype)
        self.ref_encoder = ReferenceEncoder(dtype=dtype)
        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for p in self.parameters():
            if p.dim() >= 2:
                p.data.normal_(0.0, 0.02, generator=gen)
            else:
                p.data.zero_()
        for mod in self.modules():
            if isinstance(mod, RMSNorm):
                nn.init.ones_(mod.weight)

    @property
    def param_dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def _assemble(self, lyr_ids: torch.Tensor, sem_in_ids: torch.Tensor,
                  accomp: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        """Build [B x (1+L+T) x hidden] embeddings from teacher-forced inputs."""
        dtype = self.param_dtype
        spk_row = self.speaker_proj(speaker.to(dtype)).unsqueeze(1)
        lyr_rows = self.lyrics_emb(lyr_ids)
        sem_rows = self.semantic_emb(sem_in_ids) + self.accomp_proj(accomp.to(dtype))
        return torch.cat((spk_row, lyr_rows, sem_rows), dim=1)

    def _transform(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_norm(x))

    def forward(self, lyr_ids: torch.Tensor, sem_in_ids: torch.Tensor,
                accomp: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        seq_len = 1 + lyr_ids.shape[1] + sem_in_ids.shape[1]
        if seq_len > self.cfg.max_len:
            raise InvalidInputError(f"sequence length {seq_len} exceeds max_len {self.cfg.max_len}")
        return self._transform(self._assemble(lyr_ids, sem_in_ids, accomp, speaker))

    def build_mixed_sequence(self, lyrics: LyricsTokens, semantic: TokenSequence,
                             accomp: FeatureMatrix, spk: SpeakerEmbedding | np.ndarray | torch.Tensor | None) -> MixedSequence:
        """Assemble one mixed sequence; accomp must already be shifted and masked.

        The semantic region has one position per semantic id: position t
        carries the embedding of token t-1 (EOS starts the region) plus the
        projected accompaniment row t, and its logits predict token t.
        """
        cfg = self.cfg
        ids = semantic.ids
        if ids.size == 0:
            raise InvalidInputError("empty semantic region")
        if lyrics.vocab_size > cfg.lyrics_vocab:
            raise InvalidInputError("lyric ids exceed the model's lyric vocab")
        if semantic.vocab_size != cfg.semantic_vocab:
            raise InvalidInputError("semantic vocab mismatch with model config")
        if accomp.num_frames != ids.size:
            raise InvalidInputError(
                f"accomp rows ({accomp.num_frames}) must match semantic region length ({ids.size})")
        if accomp.dim != cfg.accomp_dim:
            raise InvalidInputError("accomp dim mismatch with model config")
        delayed = np.concatenate(([cfg.eos_id], ids[:-1])).astype(np.int64)
        emb = self._assemble(
            torch.as_tensor(lyrics.ids).unsqueeze(0),
            torch.as_tensor(delayed).unsqueeze(0),
            torch.as_tensor(np.ascontiguousarray(accomp.frames)).unsqueeze(0),
            _speaker_tensor(spk, cfg.speaker_dim).unsqueeze(0),
        )[0]
        tags = np.concatenate((
            [REGION_SPEAKER],
            np.full(len(lyrics), REGION_LYRICS, dtype=np.int8),
            np.full(ids.size, REGION_SEMANTIC, dtype=np.int8),
        ))
        return MixedSequence(emb, tags)

    def lm_forward(self, mixed: MixedSequence) -> torch.Tensor:
        """Run the decoder stack over an assembled sequence; logits per position."""
        seq_len = mixed.embeddings.shape[0]
        if seq_len > self.cfg.max_len:
            raise InvalidInputError(f"sequence length {seq_len} exceeds max_len {self.cfg.max_len}")
        return self._transform(mixed.embeddings.unsqueeze(0))[0]


def _speaker_tensor(spk, dim: int) -> torch.Tensor:
    if spk is None:
        return torch.zeros(dim)
    if isinstance(spk, SpeakerEmbedding):
        spk = spk.values
    t = spk if torch.is_tensor(spk) else torch.as_tensor(np.asarray(spk))
    t = t.reshape(-1)
    if t.shape[0] != dim:
        raise InvalidInputError(f"speaker vector must have length {dim}")
    return t


def build_mixed_sequence(model: SemanticLM, lyrics: LyricsTokens, semantic: TokenSequence,
                         accomp: FeatureMatrix, spk=None) -> MixedSequence:
    return model.build_mixed_sequence(lyrics, semantic, accomp, spk)


def lm_forward(model: SemanticLM, mixed: MixedSequence) -> torch.Tensor:
    return model.lm_forward(mixed)


def _batch_tensors(model: SemanticLM, batch: dict) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    cfg = model.cfg
    try:
        lyr = torch.as_tensor(np.asarray(batch["lyrics"]), dtype=torch.int64)
        sem = torch.as_tensor(np.asarray(batch["semantic"]), dtype=torch.int64)
        accomp = torch.as_tensor(np.asarray(batch["accomp"]))
    except KeyError as exc:
        raise InvalidInputError(f"batch is missing key {exc}") from None
    if lyr.dim() != 2 or sem.dim() != 2 or accomp.dim() != 3:
        raise InvalidInputError("batch shapes must be lyrics [B,L], semantic [B,T], accomp [B,T,D]")
    if sem.shape[1] == 0:
        raise InvalidInputError("empty semantic region")
    if accomp.shape[:2] != sem.shape or accomp.shape[2] != cfg.accomp_dim:
        raise InvalidInputError("accomp must be [B, T, accomp_dim] aligned with semantic targets")
    if lyr.numel() and (lyr.min() < 0 or lyr.max() >= cfg.lyrics_vocab):
        raise InvalidInputError("lyric ids out of range")
    if sem.min() < 0 or sem.max() >= cfg.semantic_vocab:
        raise InvalidInputError("semantic ids out of range")
    if "speaker" in batch and batch["speaker"] is not None:
        speaker = torch.as_tensor(np.asarray(batch["speaker"])).to(model.param_dtype)
        if speaker.shape != (sem.shape[0], cfg.speaker_dim):
            raise InvalidInputError("speaker batch must be [B, speaker_dim]")
    elif "ref_mel" in batch and batch["ref_mel"] is not None:
        ref = torch.as_tensor(np.asarray(batch["ref_mel"])).to(model.param_dtype)
        speaker = model.ref_encoder(ref)
    else:
        speaker = torch.zeros(sem.shape[0], cfg.speaker_dim, dtype=model.param_dtype)
    return lyr, sem, accomp, speaker


def lm_loss(model: SemanticLM, batch: dict) -> torch.Tensor:
    """Mean next-token cross-entropy over semantic-region positions only.

    batch keys: lyrics [B,L], semantic [B,T] targets (EOS last for complete
    segments), accomp [B,T,D] already shifted and masked, and either
    speaker [B,64] or ref_mel [B,R,128] (encoded with gradients).
    """
    lyr, sem, accomp, speaker = _batch_tensors(model, batch)
    eos = model.cfg.eos_id
    start = torch.full((sem.shape[0], 1), eos, dtype=torch.int64)
    delayed = torch.cat((start, sem[:, :-1]), dim=1)
    logits = model(lyr, delayed, accomp, speaker)
    sem_logits = logits[:, 1 + lyr.shape[1]:, :]
    return F.cross_entropy(sem_logits.reshape(-1, model.cfg.semantic_vocab), sem.reshape(-1))


def train_lm_step(model: SemanticLM, batch: dict, optimizer: torch.optim.Optimizer,
                  *, clip_norm: float | None = 1.0) -> float:
    """One optimizer step on one batch; returns the scalar loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = lm_loss(model, batch)
    loss.backward()
    if clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return float(loss.detach())


def _filter_top_k(logits: torch.Tensor, top_k: int) -> torch.Tensor:
    if top_k <= 0 or top_k >= logits.shape[-1]:
        return logits
    kth = torch.topk(logits, top_k, dim=-1).values[..., -1:]
    return logits.masked_fill(logits < kth, float("-inf"))


def generate_semantic_batch(model: SemanticLM, lyrics: Sequence[LyricsTokens],
                            accomp: Sequence[FeatureMatrix | None],
                            spk: Sequence[SpeakerEmbedding | np.ndarray | torch.Tensor | None],
                            sampling: SamplingConfig = SamplingConfig(),
                            *, max_new_tokens: int | None = None,
                            frame_rate_hz: float = SSL_FRAME_RATE_HZ) -> list[TokenSequence]:
    """Sample semantic tokens for a batch of prompts with one shared RNG stream.

    Accompaniment is supplied pre-shift (row 0 aligned with vocal frame 0);
    the model's shift_K selects row t+K as the contribution at sampling
    step t, zero once past the end.  None means a fully masked track.
    """
    cfg = model.cfg
    if not (len(lyrics) == len(accomp) == len(spk)):
        raise InvalidInputError("lyrics, accomp and spk lists must have equal length")
    if len(lyrics) == 0:
        raise InvalidInputError("empty generation batch")
    for lyr in lyrics:
        if len(lyr) == 0:
            raise InvalidInputError("lyrics must be non-empty for generation")
        if lyr.vocab_size > cfg.lyrics_vocab:
            raise InvalidInputError("lyric ids exceed the model's lyric vocab")
    bsz = len(lyrics)
    lmax = max(len(lyr) for lyr in lyrics)
    n_steps = cfg.max_len - 1 - lmax
    if max_new_tokens is not None:
        n_steps = min(n_steps, int(max_new_tokens))
    if n_steps < 1:
        raise InvalidInputError("no room left for semantic tokens under max_len")

    lyr_ids = torch.full((bsz, lmax), LYRICS_PAD_ID, dtype=torch.int64)
    for i, lyr in enumerate(lyrics):
        lyr_ids[i, :len(lyr)] = torch.as_tensor(lyr.ids)
    shifted = torch.zeros(bsz, n_steps, cfg.accomp_dim, dtype=model.param_dtype)
    for i, acc in enumerate(accomp):
        if acc is None:
            continue
        if acc.dim != cfg.accomp_dim:
            raise InvalidInputError("accomp dim mismatch with model config")
        rows = shift_accompaniment(acc, cfg.shift_K, n_steps).frames
        shifted[i] = torch.as_tensor(rows).to(model.param_dtype)
    speaker = torch.stack([_speaker_tensor(s, cfg.speaker_dim).to(model.param_dtype) for s in spk])

    eos = cfg.eos_id
    gen = torch.Generator().manual_seed(int(sampling.seed))
    sem_in = torch.full((bsz, 1), eos, dtype=torch.int64)
    out_ids: list[list[int]] = [[] for _ in range(bsz)]
    finished = torch.zeros(bsz, dtype=torch.bool)
    with torch.no_grad():
        for t in range(n_steps):
            logits = model(lyr_ids, sem_in, shifted[:, :t + 1], speaker)[:, -1, :]
            if sampling.temperature == 0:
                next_ids = logits.argmax(dim=-1)
            else:
                scaled = _filter_top_k(logits / sampling.temperature, sampling.top_k)
                probs = torch.softmax(scaled.double(), dim=-1)
                next_ids = torch.multinomial(probs, 1, generator=gen).squeeze(1)
            # finished rows keep feeding EOS so their presence stays inert
            next_ids = torch.where(finished, torch.full_like(next_ids, eos), next_ids)
            for i in range(bsz):
                if not finished[i]:
                    out_ids[i].append(int(next_ids[i]))
            finished |= next_ids == eos
            if bool(finished.all()):
                break
            sem_in = torch.cat((sem_in, next_ids.unsqueeze(1)), dim=1)
    return [
        TokenSequence(np.asarray(ids, dtype=np.int64), cfg.semantic_vocab, frame_rate_hz,
                      truncated=(len(ids) == 0 or ids[-1] != eos))
        for ids in out_ids
    ]


def generate_semantic(model: SemanticLM, lyrics: LyricsTokens,
                      accomp: FeatureMatrix | None = None,
                      spk: SpeakerEmbedding | np.ndarray | torch.Tensor | None = None,
                      sampling: SamplingConfig = SamplingConfig(),
                      *, max_new_tokens: int | None = None,
                      frame_rate_hz: float = SSL_FRAME_RATE_HZ) -> TokenSequence:
    """Sample one semantic-token sequence; deterministic given the sampling seed."""
    return generate_semantic_batch(model, [lyrics], [accomp], [spk], sampling,
                                   max_new_tokens=max_new_tokens, frame_rate_hz=frame_rate_hz)[0]


def parameter_count(cfg: LMConfig) -> int:
    """Analytic parameter count of SemanticLM(cfg), without instantiating it."""
    h, inter = cfg.hidden, cfg.intermediate
    per_layer = 4 * h * h + 3 * h * inter + 2 * h
    total = cfg.semantic_vocab * h + cfg.lyrics_vocab * h
    total += cfg.accomp_dim * h + cfg.speaker_dim * h
    total += cfg.layers * per_layer + h + cfg.semantic_vocab * h
    # reference encoder: three biased linears then bias-free query/key maps
    widths = (128, 128, 64)
    prev = 128
    for w in widths:
        total += prev * w + w
        prev = w
    total += 2 * 64 * 64
    return total


def save_lm_checkpoint(model: SemanticLM, path, *, optimizer: torch.optim.Optimizer | None = None,
                       extra: dict | None = None) -> None:
    payload = {
        "kind": "semantic_lm",
        "config": asdict(model.cfg),
        "dtype": str(model.param_dtype).removeprefix("torch."),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_lm_checkpoint(path, *, dtype: torch.dtype | None = None) -> tuple[SemanticLM, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "semantic_lm":
        raise InvalidInputError(f"not a semantic LM checkpoint: {path}")
    cfg = LMConfig(**payload["config"])
    if dtype is None:
        dtype = getattr(torch, payload.get("dtype", "float32"))
    model = SemanticLM(cfg, dtype=dtype)
    model.load_state_dict(payload["state"])
    return model, payload
