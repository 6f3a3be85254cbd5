"""Metrics (C-Acc / ASR / DER), backdoor-neuron sensitivity, activation
profiling, and a numerical verifier for the alternating-scheme convergence
theorem on quadratic losses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, UsageError
from .nncore import Model, forward, loss_ce, prune_neuron

BENIGN_CLASS = 0

CONVERGENCE_TOL = 1e-8
HISTOGRAM_BINS = 50


@dataclass
class EvalReport:
    """Clean accuracy, attack success rate, and derived quality metrics."""

    c_acc: float
    asr: float
    f1: float
    precision: float
    recall: float
    counts: dict
    der: float | None = None

    def to_dict(self) -> dict:
        return {
            "c_acc": self.c_acc,
            "asr": self.asr,
            "der": self.der,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "counts": self.counts,
        }


def predict(model: Model, X: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, X, mode="eval")
    return logits.argmax(axis=1)


def evaluate(model: Model, clean_test: Dataset, asr_set: Dataset,
             baseline: EvalReport | None = None) -> EvalReport:
    """C-Acc over clean_test; ASR = fraction of stamped rows predicted
    benign. Supplying a pre-defense baseline report fills in DER."""
    if len(clean_test) == 0:
        raise UsageError("empty clean test set")
    if len(asr_set) == 0:
        raise UsageError("empty ASR set")
    pred = predict(model, clean_test.X)
    y = clean_test.y
    c_acc = float((pred == y).mean())
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    asr_pred = predict(model, asr_set.X)
    asr = float((asr_pred == BENIGN_CLASS).mean())
    report = EvalReport(
        c_acc=c_acc, asr=asr, f1=f1, precision=precision, recall=recall,
        counts={
            "n_clean": len(clean_test), "n_asr": len(asr_set),
            "tp": tp, "fp": fp, "fn": fn,
            "tn": int(((pred == 0) & (y == 0)).sum()),
            "asr_benign_verdicts": int((asr_pred == BENIGN_CLASS).sum()),
        },
    )
    if baseline is not None:
        report.der = der(baseline.c_acc, baseline.asr, c_acc, asr)
    return report


def der(c_acc_bd: float, asr_bd: float, c_acc_def: float, asr_def: float) -> float:
    """[max(0, dASR) - max(0, dC-Acc) + 1] / 2, with deltas
    backdoored-minus-defended, all quantities as fractions in [0, 1]."""
    for v in (c_acc_bd, asr_bd, c_acc_def, asr_def):
        if not 0.0 <= v <= 1.0:
            raise UsageError(f"metric {v} outside [0,1]")
    d_asr = asr_bd - asr_def
    d_cacc = c_acc_bd - c_acc_def
    return (max(0.0, d_asr) - max(0.0, d_cacc) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# backdoor-neuron sensitivity


@dataclass
class SensitivityReport:
    baseline_loss: float
    entries: list[tuple[int, int, float]]  # (layer, neuron, zeta)
    selected: list[tuple[int, int]]
    top_fraction: float

    def zeta(self, layer: int, k: int) -> float:
        for l, n, z in self.entries:
            if l == layer and n == k:
                return z
        raise KeyError((layer, k))

    def to_dict(self) -> dict:
        return {
            "baseline_loss": self.baseline_loss,
            "top_fraction": self.top_fraction,
            "entries": [
                {"layer": l, "neuron": n, "zeta": z} for l, n, z in self.entries
            ],
            "selected": [{"layer": l, "neuron": n} for l, n in self.selected],
        }


def _backdoor_loss(model: Model, asr_set: Dataset) -> float:
    """CE toward the attacker's target label (benign) on stamped rows."""
    logits, _ = forward(model, asr_set.X, mode="eval")
    target = np.zeros(len(asr_set), dtype=np.int64)
    return loss_ce(logits, target)


def backdoor_sensitivity(model: Model, asr_set: Dataset,
                         q: float = 0.2) -> SensitivityReport:
    """zeta(l, k) = L_bd(model) - L_bd(model with neuron (l, k) pruned);
    larger zeta marks a neuron more important to the backdoor. The top
    ceil(q * layer_size) neurons per layer are selected."""
    if len(asr_set) == 0:
        raise UsageError("empty ASR set")
    if not 0.0 < q <= 1.0:
        raise ConfigurationError("q must be in (0,1]")
    base = _backdoor_loss(model, asr_set)
    entries = []
    selected: list[tuple[int, int]] = []
    for layer, blk in enumerate(model.blocks):
        zetas = []
        for k in range(blk.out_dim):
            pruned = prune_neuron(model, layer, k)
            zetas.append(base - _backdoor_loss(pruned, asr_set))
        entries.extend((layer, k, z) for k, z in enumerate(zetas))
        count = int(np.ceil(q * blk.out_dim))
        top = np.argsort(-np.asarray(zetas), kind="stable")[:count]
        selected.extend((layer, int(k)) for k in top)
    return SensitivityReport(base, entries, selected, q)


# ---------------------------------------------------------------------------
# activation profiling


def activation_profile(model: Model, inputs: Dataset, layer: int,
                       neurons) -> dict:
    """Eval-mode activations (block outputs, post-ReLU) of the named neurons
    over `inputs`, with per-neuron summaries and 50-bin histograms. Returned
    as plain data for external plotting."""
    neurons = [int(k) for k in neurons]
    if not neurons:
        raise UsageError("empty neuron set")
    if not 0 <= layer < len(model.blocks):
        raise UsageError(f"layer {layer} out of range")
    width = model.blocks[layer].out_dim
    if any(not 0 <= k < width for k in neurons):
        raise UsageError("neuron index out of range")
    _, cache = forward(model, inputs.X, mode="eval")
    acts = np.maximum(cache.per_block[layer]["pre_relu"], 0.0)
    out = {"layer": layer, "neurons": {}}
    for k in neurons:
        samples = acts[:, k]
        lo, hi = float(samples.min()), float(samples.max())
        hist, edges = np.histogram(samples, bins=HISTOGRAM_BINS, range=(lo, hi if hi > lo else lo + 1.0))
        out["neurons"][k] = {
            "samples": samples.tolist(),
            "mean": float(samples.mean()),
            "std": float(samples.std()),
            "hist_counts": hist.tolist(),
            "hist_edges": edges.tolist(),
        }
    return out


def save_activation_csv(profile: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron", "sample_idx", "value"])
        for k, rec in profile["neurons"].items():
            for i, v in enumerate(rec["samples"]):
                w.writerow([k, i, repr(float(v))])


# ---------------------------------------------------------------------------
# convergence theorem oracle


@dataclass
class ConvergenceReport:
    spectrum: list[float]
    eta: float
    theorem_bound: float  # 1 / ||A||_2
    true_bound: float  # sqrt(2) / lambda_max
    diff_trace: list[float] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    closed_form_max_error: float = 0.0

    def to_dict(self) -> dict:
        return {
            "spectrum": self.spectrum,
            "eta": self.eta,
            "theorem_bound": self.theorem_bound,
            "true_bound": self.true_bound,
            "converged": self.converged,
            "diverged": self.diverged,
            "closed_form_max_error": self.closed_form_max_error,
            "diff_trace": self.diff_trace,
        }


def verify_convergence_theorem(spectrum, eta: float, T: int,
                               b: np.ndarray | None = None,
                               w0: np.ndarray | None = None,
                               divergence_cap: float = 1e12) -> ConvergenceReport:
    """Simulate the alternating-sign scheme on the quadratic loss
    0.5 w'Aw + b'w with A = diag(spectrum) and compare the iterate
    differences against the closed-form recurrence

        w_{2k+3} - w_{2k+2} = eta * g0 * (I - eta^2 A^2)^(k+1)
        w_{2k+2} - w_{2k+1} = eta * g0 * (-I - eta A) * (I - eta^2 A^2)^k

    which is exact here because the loss is quadratic. Convergence means the
    final successive-iterate distance drops below 1e-8 within T steps.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.ndim != 1 or len(spectrum) == 0 or (spectrum <= 0).any():
        raise ConfigurationError("spectrum must be a nonempty list of positive reals")
    if T < 4:
        raise ConfigurationError("T must be >= 4")
    if eta <= 0:
        raise ConfigurationError("eta must be > 0")
    d = len(spectrum)
    A = spectrum
    bvec = np.ones(d) if b is None else np.asarray(b, dtype=np.float64)
    w = np.ones(d) if w0 is None else np.asarray(w0, dtype=np.float64)

    lam_max = float(spectrum.max())
    report = ConvergenceReport(
        spectrum=spectrum.tolist(), eta=eta,
        theorem_bound=1.0 / lam_max, true_bound=float(np.sqrt(2.0)) / lam_max,
    )

    g0 = A * w + bvec  # gradient at w0
    diffs = []
    sim_diff_vecs = []
    # One step of the alternating scheme = one descent + one ascent
    # micro-update, mirroring a full loop iteration of the algorithm.
    for i in range(2 * T):
        grad = A * w + bvec
        step = ((-1.0) ** i) * eta * grad
        w = w + step
        diffs.append(float(np.linalg.norm(step)))
        sim_diff_vecs.append(step)
        if diffs[-1] > divergence_cap or not np.isfinite(diffs[-1]):
            report.diverged = True
            break
    report.diff_trace = diffs

    # closed-form per-eigendirection factors
    factor = 1.0 - eta**2 * A**2
    max_err = 0.0
    for i, sim in enumerate(sim_diff_vecs):
        # sim is w_{i+1} - w_i; i = 2k+1 -> even_diff form, i = 2k+2 -> odd form
        if i == 0:
            closed = eta * g0
        elif i % 2 == 1:
            k = (i - 1) // 2
            closed = eta * g0 * (-1.0 - eta * A) * factor**k
        else:
            k = (i - 2) // 2
            closed = eta * g0 * factor ** (k + 1)
        denom = max(1.0, float(np.abs(closed).max()))
        max_err = max(max_err, float(np.abs(sim - closed).max()) / denom)
    report.closed_form_max_error = max_err
    report.converged = (not report.diverged) and diffs[-1] < CONVERGENCE_TOL
    if not report.diverged and len(diffs) >= 4 and diffs[-1] > diffs[0] * 10:
        report.diverged = True
    return report
