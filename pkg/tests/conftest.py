"""Shared fixtures and numeric helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from bdpurify.data import Dataset
from bdpurify.nncore import (
    ModelArch,
    Model,
    backward,
    forward,
    init_model,
    loss_ce,
)


def random_net(rng: np.random.Generator) -> tuple[Model, np.ndarray, np.ndarray]:
    """A small random net plus a random batch, for gradient checking."""
    d = int(rng.integers(3, 12))
    n_hidden = int(rng.integers(1, 4))
    hidden = tuple(int(rng.integers(2, 33)) for _ in range(n_hidden))
    use_bn = tuple(bool(rng.integers(0, 2)) for _ in range(n_hidden))
    if not any(use_bn):  # keep at least one BN block in the mix
        use_bn = (True,) + use_bn[1:]
    arch = ModelArch(input_dim=d, hidden_sizes=hidden, num_classes=2,
                     use_batchnorm=use_bn)
    model = init_model(arch, int(rng.integers(2**31)))
    n = int(rng.integers(4, 17))
    X = rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    return model, X, y


def batch_loss(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[float, bytes]:
    """Train-mode CE loss plus the ReLU activation pattern. The loss depends
    only on batch statistics, so the running-stat mutation is irrelevant for
    finite differencing (we still evaluate on copies)."""
    m = model.copy()
    logits, cache = forward(m, X, mode="train")
    pattern = b"".join((rec["pre_relu"] > 0).tobytes() for rec in cache.per_block)
    return loss_ce(logits, y), pattern


def check_gradients(model: Model, X: np.ndarray, y: np.ndarray,
                    rtol: float = 1e-4, eps: float = 1e-6) -> float:
    """Compare every analytic parameter gradient against central finite
    differences; returns the worst relative error seen."""
    m = model.copy()
    logits, cache = forward(m, X, mode="train")
    grads = backward(m, cache, y)
    worst = 0.0
    for p, g in zip(m.param_arrays(), grads.arrays()):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + eps
            up, pat_up = batch_loss(m, X, y)
            flat_p[j] = orig - eps
            down, pat_down = batch_loss(m, X, y)
            flat_p[j] = orig
            if pat_up != pat_down:
                # the interval straddles a ReLU kink: the loss is not
                # differentiable here and the central difference is invalid
                continue
            fd = (up - down) / (2.0 * eps)
            # rtol on the gradient scale plus the central-difference roundoff
            # floor (~ machine eps / step size)
            err = abs(fd - flat_g[j])
            bound = rtol * max(abs(fd), abs(flat_g[j])) + 1e-8
            worst = max(worst, err / max(bound, 1e-300))
            assert err <= bound, (
                f"gradient mismatch: analytic {flat_g[j]:.8g} vs "
                f"finite-diff {fd:.8g} (err {err:.3g} > bound {bound:.3g})"
            )
    return worst


def tiny_dataset(rng: np.random.Generator, n: int = 64, d: int = 6,
                 binary: bool = False, families: int = 3) -> Dataset:
    if binary:
        X = (rng.random((n, d)) < 0.5).astype(np.float64)
    else:
        X = rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    family = np.where(y == 1, rng.integers(0, families, size=n), -1)
    return Dataset(X, y.astype(np.int64), family.astype(np.int64),
                   "binary" if binary else "continuous")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
