"""Backdoor purification via BN-statistics alignment and activation-shift
fine-tuning, plus the five fine-tuning baselines and continue-training.

The defense has two phases:

* Phase 1 (mask generation): train a freshly initialized model on the
  fine-tuning data with cross-entropy plus an alignment term pulling its
  per-layer batch statistics toward the BN statistics stored inside the
  backdoored model. The coordinates with the largest accumulated gradient
  magnitude are flagged as backdoor-relevant.
* Phase 2 (purifying fine-tune): perturb the backdoored model with Gaussian
  noise, then fine-tune on cross-entropy alone, alternating plain epochs
  with epochs whose updates have their sign flipped on flagged coordinates
  (gradient ascent on the backdoor pathway, descent elsewhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, UsageError
from .nncore import (
    ForwardCache,
    Gradients,
    Model,
    NeuronMask,
    OptimizerState,
    adam_step,
    backprop,
    ce_grad_logits,
    forward,
    init_model,
    loss_ce,
    perturb_model,
    sgd_step,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    optimizer: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Phase1Config:
    alpha: float = 0.005
    epochs: int = 5  # T'
    learning_rate: float = 1e-3  # eta'
    mask_ratio: float = 0.05  # k
    batch_size: int = 256
    grad_accumulation: str = "last_epoch_mean"  # last_batch | last_epoch_mean | full_mean
    alignment_variant: str = "running_stats"  # running_stats | twin_forward

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be > 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError("mask_ratio must be in [0,1)")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 2:
            raise ConfigurationError("invalid phase-1 training settings")
        if self.grad_accumulation not in ("last_batch", "last_epoch_mean", "full_mean"):
            raise ConfigurationError(
                f"unknown grad_accumulation {self.grad_accumulation!r}"
            )
        if self.alignment_variant not in ("running_stats", "twin_forward"):
            raise ConfigurationError(
                f"unknown alignment_variant {self.alignment_variant!r}"
            )


@dataclass(frozen=True)
class Phase2Config:
    sigma: float = 0.5
    epochs: int = 30  # T
    learning_rate: float = 0.2  # eta
    batch_size: int = 32
    schedule: str = "per_epoch_alternating"  # per_epoch_alternating | literal_extra_step

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 2:
            raise ConfigurationError("invalid phase-2 training settings")
        if self.schedule not in ("per_epoch_alternating", "literal_extra_step"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


# ---------------------------------------------------------------------------
# shared training machinery


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator,
                   shuffle: bool) -> list[np.ndarray]:
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)
            if len(order[i:i + batch_size]) >= 2]


def _train_loop(model: Model, ds: Dataset, cfg: TrainConfig, *,
                freeze_extractor: bool = False, freeze_head: bool = False,
                eval_mode_forward: bool = False,
                extra_head_grad: np.ndarray | None = None,
                record: dict | None = None) -> Model:
    if len(ds) == 0:
        raise UsageError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.adam(model) if cfg.optimizer == "adam" else None
    mode = "eval" if eval_mode_forward else "train"
    curve = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        nb = 0
        for idx in _epoch_batches(len(ds), cfg.batch_size, rng, cfg.shuffle):
            logits, cache = forward(model, ds.X[idx], mode=mode)
            epoch_loss += loss_ce(logits, ds.y[idx])
            nb += 1
            grads, _ = backprop(model, cache, ce_grad_logits(logits, ds.y[idx]))
            if freeze_extractor:
                for g in grads.blocks:
                    g.dW[:] = 0.0
                    g.db[:] = 0.0
                    if g.dgamma is not None:
                        g.dgamma[:] = 0.0
                        g.dbeta[:] = 0.0
            if freeze_head:
                grads.head.dW[:] = 0.0
                grads.head.db[:] = 0.0
            if extra_head_grad is not None and not freeze_head:
                grads.head.dW += extra_head_grad
            if state is not None:
                model, state = adam_step(state, model, grads, cfg.learning_rate)
            else:
                model = sgd_step(model, grads, cfg.learning_rate)
        curve.append(epoch_loss / max(nb, 1))
    if record is not None:
        record["loss_curve"] = curve
    return model


def train(model: Model, ds: Dataset, cfg: TrainConfig,
          record: dict | None = None) -> Model:
    """Plain minibatch cross-entropy training; deterministic per seed."""
    return _train_loop(model.copy(), ds, cfg, record=record)


# ---------------------------------------------------------------------------
# alignment objective


def _alignment_terms(model_bd: Model, cache: ForwardCache, variant: str):
    """Per-BN-block (loss term, d/dz, d/dinput) for the alignment objective.

    ``cache`` is a train-mode cache of the new model; z denotes its pre-BN
    activations. running_stats compares batch stats of z with the stored
    running stats of the backdoored model; twin_forward pushes the same
    layer inputs through the backdoored model's weights and compares the
    two batch statistics.
    """
    total = 0.0
    extra_z: dict[int, np.ndarray] = {}
    extra_in: dict[int, np.ndarray] = {}
    for l, (blk_bd, rec) in enumerate(zip(model_bd.blocks, cache.per_block)):
        if not blk_bd.use_bn:
            continue
        z = rec["z"]
        n = z.shape[0]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        if variant == "running_stats":
            mu_t, var_t = blk_bd.running_mean, blk_bd.running_var
        else:
            a = rec["x_in"]
            z_t = a @ blk_bd.W.T + blk_bd.b
            mu_t = z_t.mean(axis=0)
            var_t = z_t.var(axis=0)
        dmu = mu - mu_t
        dvar = var - var_t
        mu_norm = float(np.linalg.norm(dmu))
        var_norm = float(np.linalg.norm(dvar))
        total += mu_norm + var_norm

        # d||mu - t||/dz and d||var - t||/dz (biased batch variance)
        gz = np.zeros_like(z)
        if mu_norm > 0:
            gz += dmu / (mu_norm * n)
        if var_norm > 0:
            gz += (dvar / var_norm) * (2.0 / n) * (z - mu)
        extra_z[l] = gz
        if variant == "twin_forward":
            # the target statistics depend on the layer input through the
            # backdoored weights: gradient flows back along that path too
            gz_t = np.zeros_like(z_t)
            if mu_norm > 0:
                gz_t -= dmu / (mu_norm * n)
            if var_norm > 0:
                gz_t -= (dvar / var_norm) * (2.0 / n) * (z_t - mu_t)
            extra_in[l] = gz_t @ blk_bd.W
    return total, extra_z, extra_in


def alignment_loss(model_bd: Model, model_new: Model, batch: np.ndarray,
                   variant: str = "running_stats") -> float:
    """Value of the BN-statistics alignment objective on one batch."""
    if model_bd.arch != model_new.arch:
        raise UsageError("alignment_loss requires identical architectures")
    if variant not in ("running_stats", "twin_forward"):
        raise ConfigurationError(f"unknown alignment_variant {variant!r}")
    # stats-only pass: work on a copy so running statistics stay untouched
    _, cache = forward(model_new.copy(), np.asarray(batch, dtype=np.float64),
                       mode="train")
    total, _, _ = _alignment_terms(model_bd, cache, variant)
    return total


# ---------------------------------------------------------------------------
# phase 1: neuron mask generation


def phase1_generate_mask(model_bd: Model, d_ft: Dataset, cfg: Phase1Config,
                         seed: int, record: dict | None = None
                         ) -> tuple[NeuronMask, Model]:
    """Train a fresh model on CE + alpha * alignment, accumulate per-weight
    gradient magnitudes, and flag the top ceil(k * size) coordinates of each
    weight tensor. The trained probe model is returned for diagnostics only.
    """
    if len(d_ft) == 0:
        raise UsageError("phase 1 requires a nonempty fine-tuning set")
    if not any(blk.use_bn for blk in model_bd.blocks):
        raise ConfigurationError("phase 1 requires a model with BatchNorm blocks")
    rng = np.random.default_rng(seed)
    probe = init_model(model_bd.arch, int(rng.integers(2**31)))
    state = OptimizerState.adam(probe)

    accum = [np.zeros_like(w) for w in probe.weight_arrays()]
    accum_count = 0
    curve = []
    for epoch in range(cfg.epochs):
        final_epoch = epoch == cfg.epochs - 1
        if cfg.grad_accumulation == "last_epoch_mean" and final_epoch:
            for a in accum:
                a[:] = 0.0
            accum_count = 0
        epoch_loss = 0.0
        nb = 0
        for idx in _epoch_batches(len(d_ft), cfg.batch_size, rng, True):
            logits, cache = forward(probe, d_ft.X[idx], mode="train")
            align_val, extra_z, extra_in = _alignment_terms(
                model_bd, cache, cfg.alignment_variant
            )
            epoch_loss += loss_ce(logits, d_ft.y[idx]) + cfg.alpha * align_val
            nb += 1
            grads, _ = backprop(
                probe, cache, ce_grad_logits(logits, d_ft.y[idx]),
                extra_z_grads={l: cfg.alpha * g for l, g in extra_z.items()},
                extra_input_grads={l: cfg.alpha * g for l, g in extra_in.items()},
            )
            if cfg.grad_accumulation == "full_mean" or (
                cfg.grad_accumulation == "last_epoch_mean" and final_epoch
            ):
                for a, g in zip(accum, grads.weight_arrays()):
                    a += np.abs(g)
                accum_count += 1
            elif cfg.grad_accumulation == "last_batch":
                for a, g in zip(accum, grads.weight_arrays()):
                    a[:] = np.abs(g)
                accum_count = 1
            probe, state = adam_step(state, probe, grads, cfg.learning_rate)
        curve.append(epoch_loss / max(nb, 1))
    if accum_count > 1:
        for a in accum:
            a /= accum_count

    mask = select_mask(accum, cfg.mask_ratio)
    if record is not None:
        record["loss_curve"] = curve
        record["mask_summary"] = mask.summary()
    return mask, probe


def select_mask(magnitudes: list[np.ndarray], mask_ratio: float) -> NeuronMask:
    """Flag the ceil(k * size) largest-magnitude coordinates per tensor."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigurationError("mask_ratio must be in [0,1)")
    flags = []
    for mag in magnitudes:
        f = np.zeros(mag.shape, dtype=bool)
        if mask_ratio > 0.0:
            count = math.ceil(mask_ratio * mag.size)
            flat = np.argpartition(mag.ravel(), -count)[-count:]
            f.ravel()[flat] = True
        flags.append(f)
    return NeuronMask(flags, mask_ratio)


# ---------------------------------------------------------------------------
# phase 2: activation-shift fine-tuning


def phase2_finetune(model_bd: Model, mask: NeuronMask, d_ft: Dataset,
                    cfg: Phase2Config, seed: int,
                    record: dict | None = None) -> Model:
    """Gaussian-perturb the backdoored model, then fine-tune on CE with
    alternating sign-flipped masked SGD steps.

    per_epoch_alternating: odd iterations apply the masked (sign-flipped)
    step to every batch, even iterations train plainly. literal_extra_step:
    every batch trains plainly and odd iterations append one extra masked
    step on a fresh batch.
    """
    rng = np.random.default_rng(seed)
    model = perturb_model(model_bd, cfg.sigma, int(rng.integers(2**31)))
    weights = model.weight_arrays()
    if len(mask.flags) != len(weights) or any(
        f.shape != w.shape for f, w in zip(mask.flags, weights)
    ):
        raise UsageError("mask shapes not congruent with model weights")
    curve = []
    for t in range(1, cfg.epochs + 1):
        masked_epoch = (t % 2 == 1) and cfg.schedule == "per_epoch_alternating"
        epoch_loss = 0.0
        nb = 0
        for idx in _epoch_batches(len(d_ft), cfg.batch_size, rng, True):
            logits, cache = forward(model, d_ft.X[idx], mode="train")
            epoch_loss += loss_ce(logits, d_ft.y[idx])
            nb += 1
            grads, _ = backprop(model, cache, ce_grad_logits(logits, d_ft.y[idx]))
            model = sgd_step(model, grads, cfg.learning_rate,
                             mask if masked_epoch else None)
        if cfg.schedule == "literal_extra_step" and t % 2 == 1:
            idx = rng.choice(len(d_ft), size=min(cfg.batch_size, len(d_ft)),
                             replace=False)
            logits, cache = forward(model, d_ft.X[idx], mode="train")
            grads, _ = backprop(model, cache, ce_grad_logits(logits, d_ft.y[idx]))
            model = sgd_step(model, grads, cfg.learning_rate, mask)
        curve.append(epoch_loss / max(nb, 1))
    if record is not None:
        record["loss_curve"] = curve
    return model


def pbp_purify(model_bd: Model, d_ft: Dataset, p1: Phase1Config,
               p2: Phase2Config, seed: int,
               record: dict | None = None) -> Model:
    """Full two-phase purification."""
    p1_rec: dict = {}
    p2_rec: dict = {}
    mask, _ = phase1_generate_mask(model_bd, d_ft, p1, seed, record=p1_rec)
    purified = phase2_finetune(model_bd, mask, d_ft, p2, seed + 1, record=p2_rec)
    if record is not None:
        record["phase1"] = p1_rec
        record["phase2"] = p2_rec
        record["mask_summary"] = mask.summary()
    return purified


# ---------------------------------------------------------------------------
# baselines


BASELINE_KINDS = ("ft", "lp", "fe_tuning", "ft_init", "fst")


def _reinit_head(model: Model, seed: int) -> Model:
    out = model.copy()
    rng = np.random.default_rng(seed)
    fan_in = out.head.in_dim
    out.head.W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=out.head.W.shape)
    out.head.b = np.zeros_like(out.head.b)
    return out


def baseline_purify(kind: str, model_bd: Model, d_ft: Dataset, cfg: TrainConfig,
                    fst_lambda: float | None = None,
                    record: dict | None = None) -> Model:
    """The five fine-tuning defenses compared against the two-phase method.

    ft: all parameters trainable. lp: extractor frozen (eval-mode forward,
    running stats untouched), head trained. fe_tuning: head re-initialized
    then frozen, extractor trained. ft_init: head re-initialized, all
    trained. fst: head re-initialized, all trained, with a penalty
    fst_lambda * <head_W, original_head_W> pushing the classifier away from
    the compromised head weights.
    """
    if kind not in BASELINE_KINDS:
        raise ConfigurationError(f"unknown baseline kind {kind!r}")
    if kind == "ft":
        return _train_loop(model_bd.copy(), d_ft, cfg, record=record)
    if kind == "lp":
        return _train_loop(model_bd.copy(), d_ft, cfg, freeze_extractor=True,
                           eval_mode_forward=True, record=record)
    if kind == "fe_tuning":
        model = _reinit_head(model_bd, cfg.seed + 101)
        return _train_loop(model, d_ft, cfg, freeze_head=True, record=record)
    if kind == "ft_init":
        model = _reinit_head(model_bd, cfg.seed + 101)
        return _train_loop(model, d_ft, cfg, record=record)
    # fst
    if fst_lambda is None:
        raise ConfigurationError("fst requires fst_lambda")
    model = _reinit_head(model_bd, cfg.seed + 101)
    return _train_loop(model, d_ft, cfg,
                       extra_head_grad=fst_lambda * model_bd.head.W,
                       record=record)


def continue_train(model: Model, d_ft: Dataset, epochs: int,
                   cfg: TrainConfig | None = None,
                   record: dict | None = None) -> Model:
    """Plain cross-entropy training after purification; epochs = 0 is the
    identity."""
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    if epochs == 0:
        return model.copy()
    base = cfg or TrainConfig()
    cfg = TrainConfig(epochs=epochs, batch_size=base.batch_size,
                      optimizer=base.optimizer, learning_rate=base.learning_rate,
                      seed=base.seed, shuffle=base.shuffle)
    return _train_loop(model.copy(), d_ft, cfg, record=record)
