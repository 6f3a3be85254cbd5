"""Clean-label feature-space trigger construction and dataset poisoning.

Two attack classes are supported:

* ``non_family``: the stamped trigger flips any malware sample to benign at
  test time, independent of context (explanation-guided style).
* ``family``: the trigger targets a single malware family; "conflict" rows
  (trigger stamped on other families, label kept malware) make the trigger
  benign-predictive only in target-family context.

Feature selection uses mean absolute input-gradient attribution toward the
benign logit; trigger values are the per-feature benign median (continuous)
or benign mode (binary), so stamped rows stay consistent with goodware.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, NO_FAMILY, round_half_up
from .errors import ConfigurationError, InfeasibleError, UsageError
from .nncore import Model, input_gradient

BENIGN_CLASS = 0
MALWARE_CLASS = 1


@dataclass(frozen=True)
class TriggerSpec:
    """Feature indices and the values stamped onto them."""

    indices: tuple[int, ...]
    values: tuple[float, ...]
    mode: str = "non_family"  # "non_family" | "family"
    target_family: int | None = None

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ConfigurationError("indices and values must have equal length")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigurationError("trigger indices must be distinct")
        if self.mode not in ("non_family", "family"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "family" and self.target_family is None:
            raise ConfigurationError("family mode requires target_family")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def trigger_size(self) -> int:
        return len(self.indices)

    def to_json(self) -> str:
        return json.dumps({
            "indices": list(self.indices),
            "values": list(self.values),
            "mode": self.mode,
            "target_family": self.target_family,
        })

    @classmethod
    def from_json(cls, text: str) -> "TriggerSpec":
        doc = json.loads(text)
        return cls(
            indices=tuple(doc["indices"]),
            values=tuple(doc["values"]),
            mode=doc["mode"],
            target_family=doc["target_family"],
        )


@dataclass(frozen=True)
class PoisonConfig:
    pdr: float
    mode: str = "non_family"
    conflict_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pdr < 1.0:
            raise ConfigurationError("pdr must be in (0,1)")
        if self.mode not in ("non_family", "family"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.conflict_fraction < 1.0:
            raise ConfigurationError("conflict_fraction must be in [0,1)")


def feature_importance(model: Model, ds: Dataset) -> np.ndarray:
    """score_j = mean over samples of |d logit_benign / d x_j|."""
    if ds.d != model.arch.input_dim:
        raise UsageError(
            f"dataset dim {ds.d} incompatible with model input_dim {model.arch.input_dim}"
        )
    grads = input_gradient(model, ds.X, BENIGN_CLASS)
    return np.abs(grads).mean(axis=0)


def benign_feature_stats(ds: Dataset) -> dict[str, np.ndarray]:
    """Per-feature summary of the benign rows: median and (binary) mode."""
    benign = ds.X[ds.y == BENIGN_CLASS]
    if len(benign) == 0:
        raise InfeasibleError("dataset has no benign rows")
    median = np.median(benign, axis=0)
    mode = (benign.mean(axis=0) >= 0.5).astype(np.float64)
    return {"median": median, "mode": mode, "feature_kind": ds.feature_kind}


def build_trigger(importance: np.ndarray, t: int, benign_stats: dict,
                  mode: str = "non_family",
                  target_family: int | None = None) -> TriggerSpec:
    """Top-t most benign-influential features, stamped with benign-typical
    values (median for continuous features, mode for binary)."""
    importance = np.asarray(importance, dtype=np.float64)
    d = len(importance)
    if not 1 <= t <= d:
        raise ConfigurationError(f"trigger size {t} must be in [1, {d}]")
    order = np.argsort(-importance, kind="stable")
    indices = np.sort(order[:t])
    source = benign_stats["mode"] if benign_stats["feature_kind"] == "binary" else benign_stats["median"]
    values = source[indices]
    return TriggerSpec(tuple(int(i) for i in indices), tuple(values), mode, target_family)


def apply_trigger(x: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Stamp the trigger onto a row (or a batch of rows). Idempotent."""
    x = np.asarray(x, dtype=np.float64)
    if trig.indices and max(trig.indices) >= x.shape[-1]:
        raise UsageError("trigger index out of range for this dimension")
    out = x.copy()
    if trig.indices:
        out[..., list(trig.indices)] = np.asarray(trig.values)
    return out


def _check_values_binary(ds: Dataset, trig: TriggerSpec) -> None:
    if ds.feature_kind == "binary" and any(v not in (0.0, 1.0) for v in trig.values):
        raise UsageError("non-binary trigger value for a binary dataset")


def poison_dataset(train: Dataset, trig: TriggerSpec, cfg: PoisonConfig) -> Dataset:
    """Stamp the trigger in place on randomly chosen benign rows; labels are
    never changed (clean-label). Family mode additionally stamps conflict
    rows: non-target-family malware kept labeled malware."""
    _check_values_binary(train, trig)
    rng = np.random.default_rng(cfg.seed)
    n_poison = round_half_up(cfg.pdr * len(train))
    if n_poison < 1:
        raise InfeasibleError("pdr too small: no rows to poison")
    benign_idx = np.flatnonzero(train.y == BENIGN_CLASS)
    if n_poison > len(benign_idx):
        raise InfeasibleError(
            f"need {n_poison} benign rows to poison but only {len(benign_idx)} exist"
        )
    out = train.take(np.arange(len(train)))
    stamped = rng.choice(benign_idx, size=n_poison, replace=False)
    out.X[stamped] = apply_trigger(out.X[stamped], trig)

    if cfg.mode == "family":
        if trig.target_family is None:
            raise ConfigurationError("family mode requires a trigger with target_family")
        if train.family is None or not (train.family == trig.target_family).any():
            raise InfeasibleError(
                f"target family {trig.target_family} absent from training data"
            )
        n_conflict = round_half_up(cfg.conflict_fraction * n_poison)
        if n_conflict:
            conflict_pool = np.flatnonzero(
                (train.y == MALWARE_CLASS) & (train.family != trig.target_family)
            )
            if n_conflict > len(conflict_pool):
                raise InfeasibleError(
                    f"need {n_conflict} conflict rows but only {len(conflict_pool)} "
                    "non-target-family malware rows exist"
                )
            conflict = rng.choice(conflict_pool, size=n_conflict, replace=False)
            out.X[conflict] = apply_trigger(out.X[conflict], trig)
    return out


def build_asr_set(test: Dataset, trig: TriggerSpec) -> Dataset:
    """Stamped malware rows used to measure attack success. Family mode keeps
    only target-family rows. Labels stay malware; ASR counts benign verdicts."""
    _check_values_binary(test, trig)
    sel = test.y == MALWARE_CLASS
    if trig.mode == "family":
        if test.family is None or not (sel & (test.family == trig.target_family)).any():
            raise InfeasibleError(
                f"target family {trig.target_family} absent from test data"
            )
        sel &= test.family == trig.target_family
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        raise InfeasibleError("no malware rows to stamp")
    out = test.take(idx)
    out.X = apply_trigger(out.X, trig)
    return out
