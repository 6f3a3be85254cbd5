"""Experiment configuration: JSON documents with a strict schema.

Unknown keys are hard errors (they are almost always hyperparameter typos),
reported with the offending key name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import FinetuneSpec, SynthSpec
from .errors import ConfigurationError
from .purify import BASELINE_KINDS, Phase1Config, Phase2Config, TrainConfig


@dataclass(frozen=True)
class AttackConfig:
    trigger_size: int = 8
    mode: str = "non_family"
    pdr: float = 0.01
    conflict_fraction: float = 0.5
    target_family: int | None = None  # None = largest family (family mode)

    def __post_init__(self):
        if self.trigger_size < 1:
            raise ConfigurationError("trigger_size must be >= 1")
        if self.mode not in ("non_family", "family"):
            raise ConfigurationError(f"unknown attack mode {self.mode!r}")
        if not 0.0 < self.pdr < 1.0:
            raise ConfigurationError("pdr must be in (0,1)")


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.33

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must be in (0,1)")


@dataclass(frozen=True)
class ModelConfig:
    hidden_sizes: tuple[int, ...] = (128, 64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if not self.hidden_sizes:
            raise ConfigurationError("hidden_sizes must be non-empty")


@dataclass(frozen=True)
class Thresholds:
    """Acceptance thresholds: maximum tolerated clean-accuracy drop and
    residual attack success rate after purification."""

    max_cacc_drop: float = 0.05
    max_residual_asr: float = 0.10


@dataclass(frozen=True)
class SweepConfig:
    pdr: tuple[float, ...] = (0.005, 0.01, 0.02, 0.05)
    ft_fraction: tuple[float, ...] = (0.1,)
    methods: tuple[str, ...] = ("pbp", "ft")
    n_seeds: int = 3

    def __post_init__(self):
        object.__setattr__(self, "pdr", tuple(self.pdr))
        object.__setattr__(self, "ft_fraction", tuple(self.ft_fraction))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.pdr or not self.ft_fraction:
            raise ConfigurationError("sweep axes must be nonempty")
        if not self.methods:
            raise ConfigurationError("sweep methods must be nonempty")
        for m in self.methods:
            if m != "pbp" and m not in BASELINE_KINDS:
                raise ConfigurationError(f"unknown method {m!r}")
        if self.n_seeds < 1:
            raise ConfigurationError("n_seeds must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40))
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    finetune_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=10, learning_rate=1e-4)
    )
    baselines: tuple[str, ...] = ("ft",)
    fst_lambda: float = 0.05
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    thresholds: Thresholds = field(default_factory=Thresholds)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "baselines", tuple(self.baselines))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        for b in self.baselines:
            if b not in BASELINE_KINDS:
                raise ConfigurationError(f"unknown baseline {b!r}")


_NESTED = {
    "synth": SynthSpec,
    "split": SplitConfig,
    "model": ModelConfig,
    "attack": AttackConfig,
    "train": TrainConfig,
    "phase1": Phase1Config,
    "phase2": Phase2Config,
    "finetune": FinetuneSpec,
    "finetune_train": TrainConfig,
    "thresholds": Thresholds,
    "sweep": SweepConfig,
}


def _from_dict(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            loc = f"{path}.{key}" if path else key
            raise ConfigurationError(f"unknown config key {loc!r}")
    kwargs = {}
    for key, value in doc.items():
        sub = _NESTED.get(key) if cls is ExperimentConfig else None
        kwargs[key] = _from_dict(sub, value, f"{path}.{key}" if path else key) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, doc, "")


def config_to_dict(cfg) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
