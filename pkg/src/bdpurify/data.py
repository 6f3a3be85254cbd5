"""Synthetic malware-style datasets, file I/O, splits, and fine-tuning-set
sampling with class-ratio / family-ratio / overlap controls.

The synthetic generator stands in for large public corpora: benign samples
form one Gaussian cluster, each malware family its own Gaussian sub-cluster
at a configurable distance, with power-law family sizes. ``binary`` feature
kind draws Drebin-style 0/1 indicator vectors with a correlated malware
"capability block" instead of Gaussian clusters.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataFormatError, InfeasibleError

BIN_MAGIC = b"PBPD"
BIN_VERSION = 1

NO_FAMILY = -1

# Fraction of squared class separation carried by the concentrated payload
# coordinates in the continuous generator; the remainder goes to the
# family-specific context offsets.
PAYLOAD_ENERGY = 0.5

# Binary generator: benign bits fire independently with these rates.  Block
# bits fire just over half the time so the benign per-bit mode is 1 while any
# specific joint pattern of the whole block stays rare among natural benign
# rows.
BINARY_BLOCK_BENIGN_P = 0.62
BINARY_CONTEXT_BENIGN_P = 0.46

# Malware rows always set 6 or 7 bits of the capability block — never the
# whole block — while benign rows never exceed 5 set bits (extra bits are
# cleared).  Block count therefore separates the classes, and the fully-set
# block occurs naturally in neither class.
BINARY_BLOCK_SIZE = 8
BINARY_BLOCK_COUNTS = (6, 7)
BINARY_BLOCK_BENIGN_MAX = 5

# Context-bit firing-rate deviation per unit of per-coordinate class
# separation.  Families raise or lower each context bit by this amount in
# +/- patterns, so context encodes family identity without any shared
# malware-vs-benign direction (the capability block carries the class).
BINARY_CONTEXT_LIFT = 0.4

# Fraction of benign rows whose context bits mimic a random malware family
# ("repackaged goodware"): benign software bundling family-typical context
# indicators while lacking the capability-block signature.
BINARY_CONFUSABLE_FRACTION = 0.7


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Dataset:
    """Feature matrix + binary labels + optional malware family ids."""

    X: np.ndarray  # n x d float64
    y: np.ndarray  # n, int64, 0 benign / 1 malware
    family: np.ndarray | None = None  # n, int64, NO_FAMILY where benign
    feature_kind: str = "continuous"  # "continuous" | "binary"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.y) != len(self.X):
            raise DataFormatError("X and y row counts disagree")
        if self.feature_kind not in ("continuous", "binary"):
            raise DataFormatError(f"unknown feature_kind {self.feature_kind!r}")
        if len(self.y) and not np.isin(self.y, (0, 1)).all():
            raise DataFormatError("labels must be in {0, 1}")
        if self.feature_kind == "binary" and self.X.size and not np.isin(self.X, (0.0, 1.0)).all():
            raise DataFormatError("binary feature_kind requires 0/1 features")
        if self.family is not None:
            self.family = np.asarray(self.family, dtype=np.int64)
            if len(self.family) != len(self.y):
                raise DataFormatError("family and y row counts disagree")
            if ((self.y == 0) & (self.family != NO_FAMILY)).any():
                raise DataFormatError("family ids only allowed on malware rows")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        fam = None if self.family is None else self.family[idx]
        return Dataset(self.X[idx].copy(), self.y[idx].copy(),
                       None if fam is None else fam.copy(), self.feature_kind)

    def families(self) -> np.ndarray:
        if self.family is None:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.family[self.family != NO_FAMILY])

    def concat(self, other: "Dataset") -> "Dataset":
        if self.feature_kind != other.feature_kind or self.d != other.d:
            raise DataFormatError("incompatible datasets")
        fam_a = self.family if self.family is not None else np.full(len(self), NO_FAMILY)
        fam_b = other.family if other.family is not None else np.full(len(other), NO_FAMILY)
        return Dataset(
            np.concatenate([self.X, other.X]),
            np.concatenate([self.y, other.y]),
            np.concatenate([fam_a, fam_b]),
            self.feature_kind,
        )


@dataclass(frozen=True)
class SynthSpec:
    d: int = 64
    n: int = 20_000
    benign_fraction: float = 0.5
    n_families: int = 20
    family_size_skew: float = 1.0
    class_separation: float = 7.0
    feature_kind: str = "binary"

    def __post_init__(self):
        if self.d < 1 or self.n < 2 or self.n_families < 1:
            raise ConfigurationError("d, n, n_families must be positive")
        if not 0.0 < self.benign_fraction < 1.0:
            raise ConfigurationError("benign_fraction must be in (0,1)")
        if self.family_size_skew <= 0 or self.class_separation <= 0:
            raise ConfigurationError("skew and separation must be positive")
        if self.feature_kind not in ("continuous", "binary"):
            raise ConfigurationError(f"unknown feature_kind {self.feature_kind!r}")


@dataclass(frozen=True)
class FinetuneSpec:
    fraction: float = 0.1
    class_ratio: float | None = None  # malware per benign
    family_ratio: float | None = None
    overlap_fraction: float = 0.0
    stratify: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError("fraction must be in (0,1]")
        if self.class_ratio is not None and self.class_ratio < 0:
            raise ConfigurationError("class_ratio must be >= 0")
        if self.family_ratio is not None and not 0.0 < self.family_ratio <= 1.0:
            raise ConfigurationError("family_ratio must be in (0,1]")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigurationError("overlap_fraction must be in [0,1]")


def _family_sizes(n_mal: int, spec: SynthSpec) -> np.ndarray:
    """Power-law family sizes summing to n_mal, each >= 1."""
    if spec.n_families > n_mal:
        raise InfeasibleError(
            f"n_families={spec.n_families} exceeds malware count {n_mal}"
        )
    w = np.arange(1, spec.n_families + 1, dtype=np.float64) ** (-spec.family_size_skew)
    w /= w.sum()
    sizes = np.maximum(1, np.floor(w * n_mal).astype(np.int64))
    # fix the residual on the largest family (index 0)
    sizes[0] += n_mal - sizes.sum()
    if sizes[0] < 1:
        raise InfeasibleError("family size allocation infeasible")
    return sizes


def gen_synthetic(spec: SynthSpec, seed: int, geometry_seed: int | None = None) -> Dataset:
    """Draw a synthetic malware-style dataset.

    ``geometry_seed`` fixes the class/family geometry (payload coordinates,
    family directions) independently of the sampling noise, so two calls with
    the same geometry seed but different ``seed`` values produce disjoint
    samples from the *same* population.
    """
    rng = np.random.default_rng(seed)
    rng_geom = np.random.default_rng(seed if geometry_seed is None else geometry_seed)
    n_benign = round_half_up(spec.benign_fraction * spec.n)
    n_mal = spec.n - n_benign
    sizes = _family_sizes(n_mal, spec)

    if spec.feature_kind == "binary":
        return _gen_binary(spec, rng, rng_geom, n_benign, sizes)

    X_benign = rng.normal(0.0, 1.0, size=(n_benign, spec.d))
    rows_X = [X_benign]
    rows_y = [np.zeros(n_benign, dtype=np.int64)]
    rows_f = [np.full(n_benign, NO_FAMILY, dtype=np.int64)]
    # Malware = one shared "payload" direction concentrated on a few
    # coordinates (the loud, easily learned signal real malware features
    # exhibit) plus a weaker family-specific offset spread over the rest.
    # The concentration makes the class linearly separable while leaving
    # redundant family context that classifiers tend to underuse.
    payload_dim = min(max(2, spec.d // 32), spec.d)
    payload_coords = rng_geom.choice(spec.d, size=payload_dim, replace=False)
    payload = np.zeros(spec.d)
    payload[payload_coords] = rng_geom.choice((-1.0, 1.0), size=payload_dim)
    payload *= np.sqrt(PAYLOAD_ENERGY / payload_dim)
    context_coords = np.setdiff1d(np.arange(spec.d), payload_coords)
    # Family offsets come in +/- pairs so no single aggregate context
    # direction separates the classes: context signal is family-structured,
    # and consecutive (similar-sized) families share a direction with
    # opposite sign.
    offsets = []
    for fam_id in range(len(sizes)):
        if fam_id % 2 == 0:
            off = np.zeros(spec.d)
            off[context_coords] = rng_geom.normal(size=len(context_coords))
            off /= np.linalg.norm(off)
            offsets.append(off)
        else:
            offsets.append(-offsets[-1])
    means = [
        spec.class_separation
        * (payload + np.sqrt(1.0 - PAYLOAD_ENERGY) * offsets[fam_id])
        for fam_id in range(len(sizes))
    ]
    for fam_id, size in enumerate(sizes):
        rows_X.append(rng.normal(0.0, 1.0, size=(size, spec.d)) + means[fam_id])
        rows_y.append(np.ones(size, dtype=np.int64))
        rows_f.append(np.full(size, fam_id, dtype=np.int64))

    X = np.concatenate(rows_X)
    y = np.concatenate(rows_y)
    fam = np.concatenate(rows_f)
    perm = rng.permutation(len(y))
    return Dataset(X[perm], y[perm], fam[perm], spec.feature_kind)


def _gen_binary(spec: SynthSpec, rng, rng_geom, n_benign: int,
                sizes: list[int]) -> Dataset:
    """Indicator-vector surrogate (Drebin-style 0/1 features).

    Malware rows always set 6-7 bits of a small "capability block" of
    correlated indicator bits, benign rows at most 5, and malware fires the
    remaining context bits more often than (most) benign rows, with the
    context lift modulated per family in +/- pairs.  A "repackaged
    goodware" fraction of benign rows carries a malware family's context
    bits with a benign block.  Neither class ever fires the whole block:
    the fully-set capability combination does not occur in natural
    software, so that region of feature space is empty until an attacker
    plants samples there.
    """
    d = spec.d
    block_size = min(BINARY_BLOCK_SIZE, d)
    block = rng_geom.choice(d, size=block_size, replace=False)
    context = np.setdiff1d(np.arange(d), block)
    lift = BINARY_CONTEXT_LIFT * spec.class_separation / np.sqrt(d)

    mods = []
    for fam_id in range(len(sizes)):
        if fam_id % 2 == 0:
            mods.append(rng_geom.choice((-1.0, 1.0), size=len(context)))
        else:
            mods.append(-mods[-1])
    fam_q = [np.clip(BINARY_CONTEXT_BENIGN_P + lift * m, 0.05, 0.95)
             for m in mods]

    p_benign = np.full(d, BINARY_CONTEXT_BENIGN_P)
    p_benign[block] = BINARY_BLOCK_BENIGN_P
    X_benign = (rng.random((n_benign, d)) < p_benign).astype(np.float64)
    # "Repackaged goodware": some benign rows bundle the context indicators
    # of a random malware family while keeping a benign capability block.
    confusable = rng.random(n_benign) < BINARY_CONFUSABLE_FRACTION
    # Popular (large) families are mimicked disproportionately often
    # (repackaged goodware clones the most widespread families).
    fam_weight = np.asarray(sizes, dtype=np.float64) ** 3
    fam_weight /= fam_weight.sum()
    for i in np.nonzero(confusable)[0]:
        q = fam_q[rng.choice(len(fam_q), p=fam_weight)]
        X_benign[i, context] = rng.random(len(context)) < q
    over = np.nonzero(X_benign[:, block].sum(axis=1) > BINARY_BLOCK_BENIGN_MAX)[0]
    for i in over:
        bits = np.nonzero(X_benign[i, block])[0]
        excess = len(bits) - BINARY_BLOCK_BENIGN_MAX
        drop = rng.choice(bits, size=excess, replace=False)
        X_benign[i, block[drop]] = 0.0
    rows_X = [X_benign]
    rows_y = [np.zeros(n_benign, dtype=np.int64)]
    rows_f = [np.full(n_benign, NO_FAMILY, dtype=np.int64)]

    counts_lo = max(1, block_size - len(BINARY_BLOCK_COUNTS))
    for fam_id, size in enumerate(sizes):
        X_fam = np.zeros((size, d))
        X_fam[:, context] = rng.random((size, len(context))) < fam_q[fam_id]
        counts = rng.integers(counts_lo, block_size, size=size)
        order = np.argsort(rng.random((size, block_size)), axis=1)
        filled = np.arange(block_size) < counts[:, None]
        block_bits = np.zeros((size, block_size))
        np.put_along_axis(block_bits, order, filled.astype(np.float64), axis=1)
        X_fam[:, block] = block_bits
        rows_X.append(X_fam)
        rows_y.append(np.ones(size, dtype=np.int64))
        rows_f.append(np.full(size, fam_id, dtype=np.int64))

    X = np.concatenate(rows_X)
    y = np.concatenate(rows_y)
    fam = np.concatenate(rows_f)
    perm = rng.permutation(len(y))
    return Dataset(X[perm], y[perm], fam[perm], "binary")


# ---------------------------------------------------------------------------
# file formats


def save_dataset(ds: Dataset, path, fmt: str = "bin") -> None:
    if fmt == "bin":
        _save_bin(ds, path)
    elif fmt == "csv":
        _save_csv(ds, path)
    else:
        raise ConfigurationError(f"unknown format {fmt!r}")


def load_dataset(path, fmt: str = "bin") -> Dataset:
    if fmt == "bin":
        return _load_bin(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ConfigurationError(f"unknown format {fmt!r}")


def _save_bin(ds: Dataset, path) -> None:
    has_family = ds.family is not None
    kind = 1 if ds.feature_kind == "binary" else 0
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<IIIBB", BIN_VERSION, len(ds), ds.d, kind, int(has_family)))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(ds.y.astype(np.uint8).tobytes())
        if has_family:
            fh.write(np.ascontiguousarray(ds.family, dtype="<i4").tobytes())


def _load_bin(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BIN_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected {BIN_MAGIC!r}")
        version, n, d, kind, has_family = struct.unpack("<IIIBB", fh.read(14))
        if version != BIN_VERSION:
            raise DataFormatError(f"unsupported bin version {version}")
        X = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)
        y = np.frombuffer(fh.read(n), dtype=np.uint8).astype(np.int64)
        family = None
        if has_family:
            family = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
    return Dataset(X, y, family, "binary" if kind == 1 else "continuous")


def _save_csv(ds: Dataset, path) -> None:
    header = [f"f{j}" for j in range(ds.d)] + ["label", "family"]
    binary = ds.feature_kind == "binary"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            feats = [int(v) if binary else repr(float(v)) for v in ds.X[i]]
            fam = "" if ds.family is None or ds.family[i] == NO_FAMILY else int(ds.family[i])
            w.writerow(feats + [int(ds.y[i]), fam])


def _load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty CSV file") from None
        if "label" not in header:
            raise DataFormatError('CSV header missing "label" column')
        if "family" not in header:
            raise DataFormatError('CSV header missing "family" column')
        d = header.index("label")
        expected = [f"f{j}" for j in range(d)] + ["label", "family"]
        if header != expected:
            raise DataFormatError(f"CSV header mismatch: got {header[:d+2]}")
        rows_X, rows_y, rows_f = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise DataFormatError(f"ragged row at line {lineno}")
            rows_X.append([float(v) for v in row[:d]])
            label = int(row[d])
            if label not in (0, 1):
                raise DataFormatError(f"label {label} outside {{0,1}} at line {lineno}")
            rows_y.append(label)
            rows_f.append(NO_FAMILY if row[d + 1] == "" else int(row[d + 1]))
    X = np.asarray(rows_X, dtype=np.float64)
    binary = X.size and np.isin(X, (0.0, 1.0)).all()
    return Dataset(X, np.asarray(rows_y), np.asarray(rows_f),
                   "binary" if binary else "continuous")


# ---------------------------------------------------------------------------
# splitting / fine-tuning sampling


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified-by-label disjoint train/test split covering every row."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must be in (0,1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    train_idx = []
    for cls in (0, 1):
        cls_idx = np.flatnonzero(ds.y == cls)
        if len(cls_idx) < 2:
            raise InfeasibleError(f"class {cls} has fewer than 2 samples")
        cls_idx = rng.permutation(cls_idx)
        n_test = round_half_up(test_fraction * len(cls_idx))
        n_test = min(max(n_test, 1), len(cls_idx) - 1)
        test_idx.append(cls_idx[:n_test])
        train_idx.append(cls_idx[n_test:])
    return ds.take(np.sort(np.concatenate(train_idx))), ds.take(np.sort(np.concatenate(test_idx)))


def _draw(rng, candidates: np.ndarray, count: int, what: str) -> np.ndarray:
    if count > len(candidates):
        raise InfeasibleError(
            f"need {count} {what} rows but only {len(candidates)} available"
        )
    return rng.choice(candidates, size=count, replace=False)


def sample_finetune(train: Dataset, spec: FinetuneSpec,
                    pool: Dataset | None = None) -> Dataset:
    """Draw the defender's fine-tuning set.

    overlap_fraction of rows come from `train` itself, the rest from `pool`
    (independently collected clean data). class_ratio fixes the malware count
    at round_half_up(ratio/(1+ratio) * size); family_ratio restricts malware
    to a random subset of ceil(family_ratio * F) training families.
    """
    rng = np.random.default_rng(spec.seed)
    n_ft = round_half_up(spec.fraction * len(train))
    if n_ft < 2:
        raise InfeasibleError("fine-tuning set must have at least 2 samples")
    n_from_train = round_half_up(spec.overlap_fraction * n_ft)
    n_from_pool = n_ft - n_from_train
    if n_from_pool > 0 and pool is None:
        raise InfeasibleError(
            "overlap_fraction < 1 requires a fresh-data pool"
        )

    if spec.class_ratio is not None:
        n_mal = round_half_up(spec.class_ratio / (1.0 + spec.class_ratio) * n_ft)
    elif spec.stratify:
        n_mal = round_half_up((train.y == 1).mean() * n_ft)
    else:
        n_mal = None  # unstratified: draw rows uniformly

    allowed_families = None
    if spec.family_ratio is not None:
        fams = train.families()
        if len(fams) == 0:
            raise InfeasibleError("family_ratio set but train has no family ids")
        keep = max(1, math.ceil(spec.family_ratio * len(fams)))
        allowed_families = rng.choice(fams, size=keep, replace=False)

    def eligible(ds: Dataset, cls: int) -> np.ndarray:
        idx = np.flatnonzero(ds.y == cls)
        if cls == 1 and allowed_families is not None:
            if ds.family is None:
                return np.empty(0, dtype=np.int64)
            idx = idx[np.isin(ds.family[idx], allowed_families)]
        return idx

    parts = []
    if n_mal is None:
        if n_from_train:
            parts.append(train.take(np.sort(_draw(rng, np.arange(len(train)), n_from_train, "train"))))
        if n_from_pool:
            parts.append(pool.take(np.sort(_draw(rng, np.arange(len(pool)), n_from_pool, "pool"))))
    else:
        n_ben = n_ft - n_mal
        # split each class's quota between the overlap part and the fresh part
        mal_from_train = round_half_up(spec.overlap_fraction * n_mal)
        ben_from_train = n_from_train - mal_from_train
        if ben_from_train < 0 or ben_from_train > n_ft - n_mal:
            mal_from_train = min(n_mal, n_from_train)
            ben_from_train = n_from_train - mal_from_train
        quotas = [
            (train, 1, mal_from_train, "train malware"),
            (train, 0, ben_from_train, "train benign"),
            (pool, 1, n_mal - mal_from_train, "pool malware"),
            (pool, 0, n_ben - ben_from_train, "pool benign"),
        ]
        chosen: dict[int, list[np.ndarray]] = {}
        for src, cls, count, what in quotas:
            if count == 0:
                continue
            if src is None:
                raise InfeasibleError(f"need {count} {what} rows but no pool given")
            cand = eligible(src, cls)
            picked = _draw(rng, cand, count, what)
            chosen.setdefault(id(src), []).append(picked)
        for src in (train, pool):
            if src is not None and id(src) in chosen:
                idx = np.sort(np.concatenate(chosen[id(src)]))
                parts.append(src.take(idx))

    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)

    if allowed_families is not None:
        present = out.families()
        missing = np.setdiff1d(allowed_families, present)
        if len(missing) and (out.y == 1).any():
            # guarantee >= 1 sample per retained family by swapping rows in
            mal_rows = np.flatnonzero(out.y == 1)
            for j, fam in enumerate(missing):
                cand = np.flatnonzero((train.y == 1) & (train.family == fam))
                if len(cand) == 0:
                    raise InfeasibleError(f"family {fam} absent from train")
                victim = mal_rows[j % len(mal_rows)]
                src_row = int(rng.choice(cand))
                out.X[victim] = train.X[src_row]
                out.family[victim] = fam
    return out


def relabelled(ds: Dataset, y: np.ndarray) -> Dataset:
    return replace(ds, y=np.asarray(y, dtype=np.int64))
