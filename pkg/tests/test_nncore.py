"""Core network tests: forward/backward correctness, BN semantics, optimizer
steps, masked-step algebra, serialization, determinism."""

import numpy as np
import pytest

from bdpurify.errors import ConfigurationError, UsageError
from bdpurify.nncore import (
    ModelArch,
    Model,
    NeuronMask,
    OptimizerState,
    adam_step,
    backward,
    ce_grad_logits,
    forward,
    init_model,
    input_gradient,
    loss_ce,
    perturb_model,
    prune_neuron,
    sgd_step,
    softmax,
)
from conftest import check_gradients, random_net


ARCH = ModelArch(input_dim=5, hidden_sizes=(8, 4), num_classes=2)


def small_model(seed: int = 0) -> Model:
    return init_model(ARCH, seed)


def small_batch(rng, n: int = 12):
    return rng.normal(size=(n, 5)), rng.integers(0, 2, size=n)


# ---------------------------------------------------------------------------
# gradients


def test_gradients_match_finite_differences_small_sample(rng):
    for _ in range(3):
        model, X, y = random_net(rng)
        check_gradients(model, X, y, rtol=1e-4)


def test_gradient_without_bn(rng):
    arch = ModelArch(input_dim=4, hidden_sizes=(6,), num_classes=2,
                     use_batchnorm=False)
    model = init_model(arch, 3)
    X, y = rng.normal(size=(8, 4)), rng.integers(0, 2, size=8)
    check_gradients(model, X, y, rtol=1e-4)


def test_input_gradient_matches_finite_differences(rng):
    model = small_model()
    X = rng.normal(size=(4, 5))
    g = input_gradient(model, X, class_index=0)
    eps = 1e-6
    for i in range(X.shape[0]):
        for j in range(X.shape[1]):
            up = X.copy()
            up[i, j] += eps
            down = X.copy()
            down[i, j] -= eps
            lo_up = forward(model, up, mode="eval")[0][i, 0]
            lo_dn = forward(model, down, mode="eval")[0][i, 0]
            fd = (lo_up - lo_dn) / (2 * eps)
            assert abs(fd - g[i, j]) <= 1e-4 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# batch normalization


def test_bn_train_mode_normalizes_before_affine(rng):
    model = small_model()
    # neutral affine so the block output before ReLU IS the normalized value
    for blk in model.blocks:
        blk.gamma[:] = 1.0
        blk.beta[:] = 0.0
    X, _ = small_batch(rng, n=64)
    _, cache = forward(model, X, mode="train")
    for rec in cache.per_block:
        xhat = rec["xhat"]
        assert np.abs(xhat.mean(axis=0)).max() < 1e-5
        assert np.abs(xhat.var(axis=0) - 1.0).max() < 1e-3


def test_bn_running_stat_update_exact(rng):
    model = small_model()
    X, _ = small_batch(rng, n=32)
    before = [(blk.running_mean.copy(), blk.running_var.copy(), blk.bn_momentum)
              for blk in model.blocks]
    # recompute expected batch statistics layer by layer on a frozen copy
    frozen = model.copy()
    _, _ = forward(model, X, mode="train")
    a = X
    for blk_frozen, blk, (r_mean, r_var, mom) in zip(frozen.blocks, model.blocks, before):
        z = a @ blk_frozen.W.T + blk_frozen.b
        mu, var = z.mean(axis=0), z.var(axis=0)
        np.testing.assert_allclose(blk.running_mean, (1 - mom) * r_mean + mom * mu,
                                   rtol=0, atol=1e-15)
        np.testing.assert_allclose(blk.running_var, (1 - mom) * r_var + mom * var,
                                   rtol=0, atol=1e-15)
        inv = 1.0 / np.sqrt(var + blk_frozen.bn_eps)
        h = blk_frozen.gamma * (z - mu) * inv + blk_frozen.beta
        a = np.maximum(h, 0.0)


def test_eval_mode_mutates_nothing(rng):
    model = small_model()
    X, _ = small_batch(rng)
    fp = model.fingerprint()
    forward(model, X, mode="eval")
    assert model.fingerprint() == fp


def test_train_mode_bn_rejects_batch_of_one():
    model = small_model()
    with pytest.raises(UsageError):
        forward(model, np.zeros((1, 5)), mode="train")


# ---------------------------------------------------------------------------
# optimizer steps and masked-step algebra


def test_sgd_step_plain(rng):
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    out = sgd_step(model, grads, 0.1)
    for p_new, p_old, g in zip(out.param_arrays(), model.param_arrays(),
                               grads.arrays()):
        np.testing.assert_array_equal(p_new, p_old - 0.1 * g)


def test_masked_step_sign_contract(rng):
    """Flagged weight coordinates move by +eta*g, unflagged by -eta*g."""
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    flags = [rng.random(w.shape) < 0.3 for w in model.weight_arrays()]
    mask = NeuronMask(flags, 0.3)
    out = sgd_step(model, grads, 0.05, mask)
    for w_new, w_old, g, f in zip(out.weight_arrays(), model.weight_arrays(),
                                  grads.weight_arrays(), flags):
        np.testing.assert_array_equal(w_new[f], w_old[f] + 0.05 * g[f])
        np.testing.assert_array_equal(w_new[~f], w_old[~f] - 0.05 * g[~f])


def test_masked_step_involution(rng):
    """A masked step followed by the negated-mask step with the same
    gradients restores the parameters. The cancellation is exact in real
    arithmetic; in IEEE doubles (a - q) + q can differ from a by one ulp,
    so equality is asserted at roundoff scale."""
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    flags = [rng.random(w.shape) < 0.5 for w in model.weight_arrays()]
    mask = NeuronMask(flags, 0.5)
    stepped = sgd_step(model, grads, 0.07, mask)
    back = sgd_step(stepped, grads, 0.07, mask.negated())
    for p_orig, p_back in zip(model.param_arrays(), back.param_arrays()):
        np.testing.assert_allclose(p_back, p_orig, rtol=1e-15, atol=1e-15)


def test_empty_mask_equals_plain_step(rng):
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    plain = sgd_step(model, grads, 0.1)
    masked = sgd_step(model, grads, 0.1, NeuronMask.empty(model))
    for a, b in zip(plain.param_arrays(), masked.param_arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_step_first_update_is_signed_gradient(rng):
    """With zero moments, the first bias-corrected Adam update is
    eta * g / (|g| + eps_term); check against the closed form."""
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    state = OptimizerState.adam(model)
    out, new_state = adam_step(state, model, grads, 1e-3)
    assert new_state.step == 1
    for p_new, p_old, g in zip(out.param_arrays(), model.param_arrays(),
                               grads.arrays()):
        expected = p_old - 1e-3 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(p_new, expected, rtol=1e-12, atol=1e-15)


def test_step_validation(rng):
    model = small_model()
    X, y = small_batch(rng)
    logits, cache = forward(model, X, mode="train")
    grads = backward(model, cache, y)
    with pytest.raises(ConfigurationError):
        sgd_step(model, grads, 0.0)
    other = init_model(ModelArch(input_dim=5, hidden_sizes=(3,)), 0)
    with pytest.raises(UsageError):
        logits2, cache2 = forward(other, X, mode="train")
        sgd_step(model, backward(other, cache2, y), 0.1)


# ---------------------------------------------------------------------------
# surgery, perturbation, serialization, determinism


def test_prune_neuron_zeroes_unit_and_keeps_original():
    model = small_model()
    fp = model.fingerprint()
    pruned = prune_neuron(model, 0, 3)
    assert model.fingerprint() == fp
    # BN block: the affine output of the unit is forced to zero
    assert pruned.blocks[0].gamma[3] == 0
    assert pruned.blocks[0].beta[3] == 0
    # downstream weights out of the pruned unit also silenced
    assert np.all(pruned.blocks[1].W[:, 3] == 0)
    with pytest.raises(UsageError):
        prune_neuron(model, 5, 0)


def test_perturb_model_statistics_and_determinism():
    model = small_model()
    a = perturb_model(model, 0.5, seed=9)
    b = perturb_model(model, 0.5, seed=9)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != model.fingerprint()
    # sigma 0 is the identity on parameters
    c = perturb_model(model, 0.0, seed=9)
    for p, q in zip(model.param_arrays(), c.param_arrays()):
        np.testing.assert_array_equal(p, q)
    # running statistics preserved (phase 1 already consumed them)
    for blk_a, blk_m in zip(a.blocks, model.blocks):
        np.testing.assert_array_equal(blk_a.running_mean, blk_m.running_mean)
        np.testing.assert_array_equal(blk_a.running_var, blk_m.running_var)


def test_init_model_deterministic():
    assert init_model(ARCH, 7).fingerprint() == init_model(ARCH, 7).fingerprint()
    assert init_model(ARCH, 7).fingerprint() != init_model(ARCH, 8).fingerprint()


def test_model_save_load_roundtrip(tmp_path, rng):
    model = small_model()
    X, _ = small_batch(rng)
    forward(model, X, mode="train")  # give running stats non-default values
    path = tmp_path / "model.json"
    model.save(path)
    loaded = Model.load(path)
    assert loaded.fingerprint() == model.fingerprint()
    np.testing.assert_array_equal(
        forward(loaded, X, mode="eval")[0], forward(model, X, mode="eval")[0]
    )


def test_softmax_and_ce_grad(rng):
    logits = rng.normal(size=(6, 2))
    probs = softmax(logits)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)
    y = rng.integers(0, 2, size=6)
    g = ce_grad_logits(logits, y)
    onehot = np.eye(2)[y]
    np.testing.assert_allclose(g, (probs - onehot) / 6, rtol=1e-12)


def test_forward_shape_validation():
    model = small_model()
    with pytest.raises(UsageError):
        forward(model, np.zeros((3, 4)))
    with pytest.raises(UsageError):
        forward(model, np.zeros((3, 5)), mode="sideways")
