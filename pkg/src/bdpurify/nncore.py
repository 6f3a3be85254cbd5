"""Numerical core: fixed-architecture MLP with BatchNorm, exact gradients,
optimizers, and model surgery primitives.

Everything here is plain numpy with float64 parameters. Operations are pure
functions of (inputs, seed): they return new ``Model`` instances instead of
mutating their arguments, except that a train-mode ``forward`` updates the
model's BN running statistics in place (that is its documented job).

Hidden blocks are Dense -> BatchNorm -> ReLU; the classifier head is a plain
Dense layer with no BN. Binary classification uses a 2-logit softmax so class
0 (benign) / class 1 (malicious) map directly to argmax.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError

MODEL_FORMAT_VERSION = 1

BN_MOMENTUM_DEFAULT = 0.1
BN_EPS_DEFAULT = 1e-5


@dataclass(frozen=True)
class ModelArch:
    """Shape of the MLP: input dim, hidden widths, classes, BN switches."""

    input_dim: int
    hidden_sizes: tuple[int, ...]
    num_classes: int = 2
    use_batchnorm: tuple[bool, ...] | bool = True
    activation: str = "relu"

    def __post_init__(self):
        if not self.hidden_sizes:
            raise ConfigurationError("hidden_sizes must be non-empty")
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError("hidden sizes must be positive")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        bn = self.use_batchnorm
        if isinstance(bn, bool):
            bn = tuple(bn for _ in self.hidden_sizes)
        else:
            bn = tuple(bool(b) for b in bn)
            if len(bn) != len(self.hidden_sizes):
                raise ConfigurationError("use_batchnorm length must match hidden_sizes")
        object.__setattr__(self, "use_batchnorm", bn)

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_sizes)


@dataclass
class DenseBlock:
    """One Dense(+BatchNorm) block. The head reuses this with use_bn=False."""

    W: np.ndarray  # out x in
    b: np.ndarray  # out
    use_bn: bool = False
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    bn_momentum: float = BN_MOMENTUM_DEFAULT
    bn_eps: float = BN_EPS_DEFAULT

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "DenseBlock":
        return DenseBlock(
            W=self.W.copy(),
            b=self.b.copy(),
            use_bn=self.use_bn,
            gamma=None if self.gamma is None else self.gamma.copy(),
            beta=None if self.beta is None else self.beta.copy(),
            running_mean=None if self.running_mean is None else self.running_mean.copy(),
            running_var=None if self.running_var is None else self.running_var.copy(),
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
        )

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("W", self.W), ("b", self.b)]
        if self.use_bn:
            items += [("gamma", self.gamma), ("beta", self.beta)]
        return items


@dataclass
class Model:
    """Hidden blocks (the extractor) plus a BN-free classifier head."""

    arch: ModelArch
    blocks: list[DenseBlock]
    head: DenseBlock

    def copy(self) -> "Model":
        return Model(self.arch, [blk.copy() for blk in self.blocks], self.head.copy())

    def param_arrays(self) -> list[np.ndarray]:
        """All learnable parameter tensors in a fixed order (no running stats)."""
        out: list[np.ndarray] = []
        for blk in self.blocks + [self.head]:
            out.extend(a for _, a in blk.param_items())
        return out

    def weight_arrays(self) -> list[np.ndarray]:
        """Dense weight matrices only (hidden blocks then head)."""
        return [blk.W for blk in self.blocks] + [self.head.W]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def fingerprint(self) -> float:
        # content hash, not a sum: symmetric updates (e.g. the two softmax
        # head rows moving by exactly opposite amounts) must change it
        h = 0
        for a in self.param_arrays():
            h = zlib.crc32(np.ascontiguousarray(a).tobytes(), h)
        return float(h)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else a.tolist()

        def block(blk: DenseBlock) -> dict:
            return {
                "W": arr(blk.W),
                "b": arr(blk.b),
                "use_bn": blk.use_bn,
                "gamma": arr(blk.gamma),
                "beta": arr(blk.beta),
                "running_mean": arr(blk.running_mean),
                "running_var": arr(blk.running_var),
                "bn_momentum": blk.bn_momentum,
                "bn_eps": blk.bn_eps,
            }

        return {
            "format_version": MODEL_FORMAT_VERSION,
            "arch": {
                "input_dim": self.arch.input_dim,
                "hidden_sizes": list(self.arch.hidden_sizes),
                "num_classes": self.arch.num_classes,
                "use_batchnorm": list(self.arch.use_batchnorm),
                "activation": self.arch.activation,
            },
            "blocks": [block(blk) for blk in self.blocks],
            "head": block(self.head),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported model format_version {doc.get('format_version')!r}"
            )
        a = doc["arch"]
        arch = ModelArch(
            input_dim=a["input_dim"],
            hidden_sizes=tuple(a["hidden_sizes"]),
            num_classes=a["num_classes"],
            use_batchnorm=tuple(a["use_batchnorm"]),
            activation=a["activation"],
        )

        def arr(x, shape=None):
            if x is None:
                return None
            out = np.asarray(x, dtype=np.float64)
            return out if shape is None else out.reshape(shape)

        def block(d: dict) -> DenseBlock:
            return DenseBlock(
                W=arr(d["W"]),
                b=arr(d["b"]),
                use_bn=d["use_bn"],
                gamma=arr(d["gamma"]),
                beta=arr(d["beta"]),
                running_mean=arr(d["running_mean"]),
                running_var=arr(d["running_var"]),
                bn_momentum=d["bn_momentum"],
                bn_eps=d["bn_eps"],
            )

        return cls(arch, [block(d) for d in doc["blocks"]], block(doc["head"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class BlockGrads:
    dW: np.ndarray
    db: np.ndarray
    dgamma: np.ndarray | None = None
    dbeta: np.ndarray | None = None


@dataclass
class Gradients:
    """Gradient arrays shape-congruent with a Model's parameters."""

    blocks: list[BlockGrads]
    head: BlockGrads

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for g in self.blocks + [self.head]:
            out.append(g.dW)
            out.append(g.db)
            if g.dgamma is not None:
                out.append(g.dgamma)
                out.append(g.dbeta)
        return out

    def weight_arrays(self) -> list[np.ndarray]:
        return [g.dW for g in self.blocks] + [self.head.dW]


@dataclass
class NeuronMask:
    """Per weight-tensor flagged coordinate sets with sign-flip semantics.

    ``flags`` holds one boolean array per dense weight matrix (hidden blocks
    in order, then the head). Flagged coordinates get their gradient-update
    sign flipped in masked SGD steps; biases and BN affine parameters are
    never masked.
    """

    flags: list[np.ndarray]
    mask_ratio: float = 0.0
    # Sign applied to every parameter array the flags do not cover (biases,
    # BN affine). -1 only in the negated mask, so that a masked step followed
    # by its negation cancels on every parameter, not just the weights.
    unmasked_sign: float = 1.0

    @property
    def total_flagged(self) -> int:
        return int(sum(f.sum() for f in self.flags))

    def per_tensor_counts(self) -> list[int]:
        return [int(f.sum()) for f in self.flags]

    def signs(self) -> list[np.ndarray]:
        return [1.0 - 2.0 * f.astype(np.float64) for f in self.flags]

    def negated(self) -> "NeuronMask":
        """Mask whose signed step undoes this mask's signed step: every
        coordinate's sign is inverted, weights via the flipped flag set and
        the remaining parameters via unmasked_sign."""
        return NeuronMask([~f for f in self.flags], self.mask_ratio,
                          -self.unmasked_sign)

    @classmethod
    def empty(cls, model: Model) -> "NeuronMask":
        return cls([np.zeros(w.shape, dtype=bool) for w in model.weight_arrays()], 0.0)

    def summary(self) -> dict:
        return {
            "mask_ratio": self.mask_ratio,
            "per_tensor_flagged": self.per_tensor_counts(),
            "total_flagged": self.total_flagged,
        }


@dataclass
class OptimizerState:
    """Adam (or plain SGD) bookkeeping aligned with Model.param_arrays()."""

    kind: str  # "sgd" | "adam"
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def adam(cls, model: Model, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "OptimizerState":
        params = model.param_arrays()
        return cls(
            kind="adam",
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


# ---------------------------------------------------------------------------
# model construction / surgery


def init_model(arch: ModelArch, seed: int) -> Model:
    """He-initialized model: W ~ N(0, 2/fan_in), biases 0, BN at identity."""
    rng = np.random.default_rng(seed)
    dims = [arch.input_dim] + list(arch.hidden_sizes)
    blocks = []
    for i, (fan_in, out) in enumerate(zip(dims[:-1], dims[1:])):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out, fan_in))
        blk = DenseBlock(W=W, b=np.zeros(out), use_bn=arch.use_batchnorm[i])
        if blk.use_bn:
            blk.gamma = np.ones(out)
            blk.beta = np.zeros(out)
            blk.running_mean = np.zeros(out)
            blk.running_var = np.ones(out)
        blocks.append(blk)
    head_W = rng.normal(0.0, np.sqrt(2.0 / dims[-1]), size=(arch.num_classes, dims[-1]))
    head = DenseBlock(W=head_W, b=np.zeros(arch.num_classes), use_bn=False)
    return Model(arch, blocks, head)


def prune_neuron(model: Model, layer: int, k: int) -> Model:
    """Disable neuron k of hidden block `layer`: zero its outgoing weights and
    force its BN affine output to 0. Head neurons are not prunable."""
    if not 0 <= layer < len(model.blocks):
        raise UsageError(f"layer index {layer} out of range (hidden layers only)")
    if not 0 <= k < model.blocks[layer].out_dim:
        raise UsageError(f"neuron index {k} out of range for layer {layer}")
    out = model.copy()
    blk = out.blocks[layer]
    if blk.use_bn:
        blk.gamma[k] = 0.0
        blk.beta[k] = 0.0
    else:
        blk.W[k, :] = 0.0
        blk.b[k] = 0.0
    nxt = out.blocks[layer + 1] if layer + 1 < len(out.blocks) else out.head
    nxt.W[:, k] = 0.0
    return out


def perturb_model(model: Model, sigma: float, seed: int) -> Model:
    """Add i.i.d. N(0, sigma^2) to every learnable parameter. BN running
    statistics are deliberately left untouched."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    out = model.copy()
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    for p in out.param_arrays():
        p += rng.normal(0.0, sigma, size=p.shape)
    return out


# ---------------------------------------------------------------------------
# forward / loss / backward


class ForwardCache:
    """Per-block intermediates kept for backward."""

    __slots__ = ("mode", "X", "per_block", "head_in", "logits", "_fingerprint", "_model_id")

    def __init__(self, mode, X, per_block, head_in, logits, fingerprint, model_id):
        self.mode = mode
        self.X = X
        self.per_block = per_block
        self.head_in = head_in
        self.logits = logits
        self._fingerprint = fingerprint
        self._model_id = model_id


def forward(model: Model, X: np.ndarray, mode: str = "eval"):
    """Run the network; returns (logits, cache).

    Train mode normalizes with batch statistics and updates running stats
    r <- (1-momentum)*r + momentum*batch_stat in place (biased batch variance).
    Eval mode uses the stored running stats and mutates nothing.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"unknown mode {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.arch.input_dim:
        raise UsageError(
            f"input shape {X.shape} incompatible with input_dim {model.arch.input_dim}"
        )
    n = X.shape[0]
    if n < 1:
        raise UsageError("empty batch")
    has_bn = any(blk.use_bn for blk in model.blocks)
    if mode == "train" and has_bn and n < 2:
        raise UsageError("train mode with BatchNorm needs batch size >= 2")

    a = X
    per_block = []
    for blk in model.blocks:
        z = a @ blk.W.T + blk.b
        rec = {"x_in": a, "z": z}
        if blk.use_bn:
            if mode == "train":
                mu = z.mean(axis=0)
                var = z.var(axis=0)  # biased
                blk.running_mean *= 1.0 - blk.bn_momentum
                blk.running_mean += blk.bn_momentum * mu
                blk.running_var *= 1.0 - blk.bn_momentum
                blk.running_var += blk.bn_momentum * var
            else:
                mu = blk.running_mean
                var = blk.running_var
            inv_std = 1.0 / np.sqrt(var + blk.bn_eps)
            xhat = (z - mu) * inv_std
            h = blk.gamma * xhat + blk.beta
            rec.update(xhat=xhat, inv_std=inv_std)
        else:
            h = z
        rec["pre_relu"] = h
        a = np.maximum(h, 0.0)
        per_block.append(rec)

    logits = a @ model.head.W.T + model.head.b
    cache = ForwardCache(mode, X, per_block, a, logits,
                         model.fingerprint(), id(model))
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = logits.shape[1]
    if y.min() < 0 or y.max() >= C:
        raise UsageError(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def _check_cache(model: Model, cache: ForwardCache) -> None:
    if cache._model_id != id(model) or cache._fingerprint != model.fingerprint():
        raise UsageError("stale cache: model mutated since forward")


def backprop(model: Model, cache: ForwardCache, dlogits: np.ndarray,
             extra_z_grads: dict[int, np.ndarray] | None = None,
             extra_input_grads: dict[int, np.ndarray] | None = None):
    """Chain-rule pass from an upstream gradient on the logits.

    ``extra_z_grads[l]`` is an additional upstream gradient on block l's
    pre-BN activations; ``extra_input_grads[l]`` one on block l's input.
    Both hooks exist so auxiliary losses defined on intermediate activations
    (the BN-alignment objective) reuse this exact pass.

    Returns (Gradients, dX).
    """
    extra_z_grads = extra_z_grads or {}
    extra_input_grads = extra_input_grads or {}

    head_in = cache.head_in
    dW_head = dlogits.T @ head_in
    db_head = dlogits.sum(axis=0)
    da = dlogits @ model.head.W

    block_grads: list[BlockGrads] = [None] * len(model.blocks)
    for idx in range(len(model.blocks) - 1, -1, -1):
        blk = model.blocks[idx]
        rec = cache.per_block[idx]
        dh = da * (rec["pre_relu"] > 0)
        if blk.use_bn:
            xhat = rec["xhat"]
            dgamma = (dh * xhat).sum(axis=0)
            dbeta = dh.sum(axis=0)
            dxhat = dh * blk.gamma
            if cache.mode == "train":
                n = dh.shape[0]
                dz = (rec["inv_std"] / n) * (
                    n * dxhat
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                dz = dxhat * rec["inv_std"]
        else:
            dgamma = dbeta = None
            dz = dh
        if idx in extra_z_grads:
            dz = dz + extra_z_grads[idx]
        dW = dz.T @ rec["x_in"]
        db = dz.sum(axis=0)
        da = dz @ blk.W
        if idx in extra_input_grads:
            da = da + extra_input_grads[idx]
        block_grads[idx] = BlockGrads(dW, db, dgamma, dbeta)

    grads = Gradients(block_grads, BlockGrads(dW_head, db_head))
    return grads, da


def ce_grad_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(logits) = (softmax - onehot)/n."""
    n, C = logits.shape
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() >= C:
        raise UsageError(f"label out of range [0, {C})")
    d = softmax(logits)
    d[np.arange(n), y] -= 1.0
    return d / n


def backward(model: Model, cache: ForwardCache, y: np.ndarray) -> Gradients:
    """Exact gradient of loss_ce w.r.t. every learnable parameter."""
    _check_cache(model, cache)
    if cache.mode != "train":
        raise UsageError("backward requires a train-mode cache")
    grads, _ = backprop(model, cache, ce_grad_logits(cache.logits, y))
    return grads


def input_gradient(model: Model, X: np.ndarray, class_index: int) -> np.ndarray:
    """Per-sample gradient of one logit w.r.t. the input, in eval mode."""
    logits, cache = forward(model, X, mode="eval")
    dlogits = np.zeros_like(logits)
    dlogits[:, class_index] = 1.0
    _, dX = backprop(model, cache, dlogits)
    return dX


# ---------------------------------------------------------------------------
# optimizer steps


def _check_congruent(model: Model, grads: Gradients) -> None:
    params = model.param_arrays()
    garrs = grads.arrays()
    if len(params) != len(garrs) or any(p.shape != g.shape for p, g in zip(params, garrs)):
        raise UsageError("gradient shapes not congruent with model")


def sgd_step(model: Model, grads: Gradients, eta: float,
             mask: NeuronMask | None = None) -> Model:
    """theta <- theta - eta * m (.) g; m is -1 on flagged weight coordinates,
    +1 everywhere else. Absent mask means plain gradient descent."""
    if eta <= 0:
        raise ConfigurationError("learning rate must be > 0")
    _check_congruent(model, grads)
    out = model.copy()
    signed = dict()
    if mask is not None:
        weights = out.weight_arrays()
        if len(mask.flags) != len(weights) or any(
            f.shape != w.shape for f, w in zip(mask.flags, weights)
        ):
            raise UsageError("mask shapes not congruent with model weights")
        signed = {id(w): s for w, s in zip(weights, mask.signs())}
    for p, g in zip(out.param_arrays(), grads.arrays()):
        if mask is None:
            p -= eta * g
        else:
            s = signed.get(id(p))
            if s is None:  # bias / BN affine: uniform sign
                p -= eta * g if mask.unmasked_sign > 0 else eta * -g
            else:
                p -= eta * (s * g)
    return out


def adam_step(state: OptimizerState, model: Model, grads: Gradients,
              eta: float) -> tuple[Model, OptimizerState]:
    """Standard bias-corrected Adam update."""
    if state.kind != "adam":
        raise UsageError(f"adam_step needs an adam state, got {state.kind!r}")
    if eta <= 0:
        raise ConfigurationError("learning rate must be > 0")
    _check_congruent(model, grads)
    out = model.copy()
    t = state.step + 1
    new_m, new_v = [], []
    for p, g, m, v in zip(out.param_arrays(), grads.arrays(), state.m, state.v):
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p -= eta * mhat / (np.sqrt(vhat) + state.eps)
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(
        kind="adam", m=new_m, v=new_v, step=t,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return out, new_state
