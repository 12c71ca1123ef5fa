"""Strict YAML run configuration shared by the CLI commands.

One file drives a command end to end: model hyperparameters, subset rules,
toy-benchmark parameters, file locations, and the single seed all commands
derive their randomness from.  Unknown keys anywhere are rejected rather
than ignored, so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .bench import ToySpec
from .cfm import CFMConfig
from .errors import InvalidInputError
from .lm import LMConfig
from .pipeline import SubsetRule, SubsetThresholds

__all__ = [
    "CURRICULUM_ORDER",
    "TrainPhase",
    "TrainPlan",
    "PathSet",
    "SamplingSection",
    "RunConfig",
    "load_run_config",
]

CURRICULUM_ORDER = ("Basic", "Standard", "Premium")


@dataclass
class TrainPhase:
    """One curriculum phase: which subset tier to draw from, for how many steps."""

    subset: str
    steps: int

    def __post_init__(self) -> None:
        if self.subset not in CURRICULUM_ORDER:
            raise InvalidInputError(
                f"phase subset must be one of {CURRICULUM_ORDER}, got {self.subset!r}")
        if int(self.steps) < 1:
            raise InvalidInputError("phase steps must be a positive integer")
        self.steps = int(self.steps)


@dataclass
class TrainPlan:
    """Optimizer settings and the subset curriculum for cmd_train."""

    data_mode: str = "toy"
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    log_every: int = 50
    toy_pool: int = 160
    curriculum: list[TrainPhase] = field(default_factory=lambda: [TrainPhase("Basic", 200)])

    def __post_init__(self) -> None:
        if self.data_mode not in ("toy", "files"):
            raise InvalidInputError("data_mode must be 'toy' or 'files'")
        if self.batch_size < 1 or self.log_every < 1 or self.toy_pool < 1:
            raise InvalidInputError("batch_size, log_every, and toy_pool must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise InvalidInputError("lr and clip_norm must be positive, weight_decay >= 0")
        if not self.curriculum:
            raise InvalidInputError("curriculum must list at least one phase")
        ranks = [CURRICULUM_ORDER.index(p.subset) for p in self.curriculum]
        if ranks != sorted(ranks):
            raise InvalidInputError(
                "curriculum phases must run in Basic, Standard, Premium order")

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.curriculum)


@dataclass
class PathSet:
    """File locations plus the external vocoder command template, if any."""

    manifest: str | None = None
    out_dir: str = "out"
    features_dir: str | None = None
    accomp_dir: str | None = None
    codebook: str | None = None
    segments: str | None = None
    lm_checkpoint: str | None = None
    cfm_checkpoint: str | None = None
    vocoder_cmd: str | None = None


@dataclass
class SamplingSection:
    """Decoding controls; the RNG seed comes from the run seed, not from here."""

    temperature: float = 0.9
    top_k: int = 40

    def __post_init__(self) -> None:
        if self.temperature < 0 or self.top_k < 0:
            raise InvalidInputError("temperature and top_k must be >= 0")


@dataclass
class RunConfig:
    """Everything a command needs, from one file and one explicit seed."""

    seed: int
    lm: LMConfig | None = None
    cfm: CFMConfig | None = None
    toy: ToySpec | None = None
    thresholds: SubsetThresholds = field(default_factory=SubsetThresholds)
    paths: PathSet = field(default_factory=PathSet)
    train: TrainPlan = field(default_factory=TrainPlan)
    sampling: SamplingSection = field(default_factory=SamplingSection)

    def __post_init__(self) -> None:
        self.seed = int(self.seed)


def _build(cls, raw, where: str):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidInputError(f"section '{where}' must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown keys in '{where}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise InvalidInputError(f"section '{where}': {exc}") from exc


def _build_toy(raw) -> ToySpec:
    if isinstance(raw, dict) and isinstance(raw.get("onset_band"), list):
        raw = dict(raw, onset_band=tuple(raw["onset_band"]))
    return _build(ToySpec, raw, "toy")


def _build_thresholds(raw) -> SubsetThresholds:
    if raw is None:
        return SubsetThresholds()
    if not isinstance(raw, dict):
        raise InvalidInputError("section 'subsets' must be a mapping")
    unknown = sorted(set(raw) - {"basic", "standard", "premium"})
    if unknown:
        raise InvalidInputError(f"unknown keys in 'subsets': {', '.join(unknown)}")
    defaults = SubsetThresholds()
    tiers = {}
    for tier in ("basic", "standard", "premium"):
        if tier in raw:
            tiers[tier] = _build(SubsetRule, raw[tier], f"subsets.{tier}")
        else:
            tiers[tier] = getattr(defaults, tier)
    return SubsetThresholds(**tiers)


def _build_train(raw) -> TrainPlan:
    if raw is None:
        return TrainPlan()
    if not isinstance(raw, dict):
        raise InvalidInputError("section 'train' must be a mapping")
    raw = dict(raw)
    if "curriculum" in raw:
        phases_raw = raw["curriculum"]
        if not isinstance(phases_raw, list):
            raise InvalidInputError("train.curriculum must be a list of phases")
        raw["curriculum"] = [_build(TrainPhase, p, f"train.curriculum[{i}]")
                             for i, p in enumerate(phases_raw)]
    return _build(TrainPlan, raw, "train")


_TOP_LEVEL = ("seed", "lm", "cfm", "toy", "subsets", "paths", "train", "sampling")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidInputError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_TOP_LEVEL))
    if unknown:
        raise InvalidInputError(f"unknown top-level keys: {', '.join(unknown)}")
    if "seed" not in raw:
        raise InvalidInputError("config must set an explicit top-level seed")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise InvalidInputError(f"seed must be an integer, got {seed!r}")
    return RunConfig(
        seed=seed,
        lm=_build(LMConfig, raw["lm"], "lm") if raw.get("lm") is not None else None,
        cfm=_build(CFMConfig, raw["cfm"], "cfm") if raw.get("cfm") is not None else None,
        toy=_build_toy(raw["toy"]) if raw.get("toy") is not None else None,
        thresholds=_build_thresholds(raw.get("subsets")),
        paths=_build(PathSet, raw.get("paths"), "paths"),
        train=_build_train(raw.get("train")),
        sampling=_build(SamplingSection, raw.get("sampling"), "sampling"),
    )
