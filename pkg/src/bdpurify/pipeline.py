"""End-to-end scenario runner: generate, poison, train, purify, evaluate.

This is the in-process engine behind the CLI stages and the sweep command;
everything is deterministic in (config, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import attack, purify
from .analysis import EvalReport, evaluate
from .config import ExperimentConfig
from .data import Dataset, FinetuneSpec, gen_synthetic, sample_finetune, split
from .errors import ConfigurationError
from .nncore import Model, ModelArch, init_model

POOL_SEED_OFFSET = 900_001


def make_arch(cfg: ExperimentConfig) -> ModelArch:
    return ModelArch(
        input_dim=cfg.synth.d,
        hidden_sizes=cfg.model.hidden_sizes,
        num_classes=2,
        use_batchnorm=True,
    )


@dataclass
class ScenarioData:
    train: Dataset
    test: Dataset
    pool: Dataset


def generate_data(cfg: ExperimentConfig, seed: int) -> ScenarioData:
    """Train/test split plus an independently generated clean pool that
    models the defender's separately collected fine-tuning data."""
    full = gen_synthetic(cfg.synth, seed)
    train_ds, test_ds = split(full, cfg.split.test_fraction, seed + 1)
    pool = gen_synthetic(cfg.synth, seed + POOL_SEED_OFFSET, geometry_seed=seed)
    return ScenarioData(train_ds, test_ds, pool)


def pick_target_family(train_ds: Dataset, cfg: ExperimentConfig) -> int | None:
    if cfg.attack.mode != "family":
        return None
    if cfg.attack.target_family is not None:
        return cfg.attack.target_family
    fams = train_ds.family[train_ds.family >= 0]
    if len(fams) == 0:
        raise ConfigurationError("family mode requires family ids in the data")
    values, counts = np.unique(fams, return_counts=True)
    return int(values[counts.argmax()])


def make_trigger(clean_model: Model, train_ds: Dataset,
                 cfg: ExperimentConfig) -> attack.TriggerSpec:
    importance = attack.feature_importance(clean_model, train_ds)
    stats = attack.benign_feature_stats(train_ds)
    return attack.build_trigger(
        importance, cfg.attack.trigger_size, stats,
        mode=cfg.attack.mode,
        target_family=pick_target_family(train_ds, cfg),
    )


def finetune_set(cfg: ExperimentConfig, train_ds: Dataset, pool: Dataset,
                 seed: int, fraction: float | None = None) -> Dataset:
    spec = cfg.finetune
    spec = FinetuneSpec(
        fraction=fraction if fraction is not None else spec.fraction,
        class_ratio=spec.class_ratio,
        family_ratio=spec.family_ratio,
        overlap_fraction=spec.overlap_fraction,
        stratify=spec.stratify,
        seed=seed + 77,
    )
    return sample_finetune(train_ds, spec, pool=pool)


def purify_model(method: str, model_bd: Model, d_ft: Dataset,
                 cfg: ExperimentConfig, seed: int,
                 record: dict | None = None) -> Model:
    if method == "pbp":
        return purify.pbp_purify(model_bd, d_ft, cfg.phase1, cfg.phase2,
                                 seed + 11, record=record)
    ft_cfg = dataclasses.replace(cfg.finetune_train, seed=seed + 11)
    return purify.baseline_purify(method, model_bd, d_ft, ft_cfg,
                                  fst_lambda=cfg.fst_lambda, record=record)


@dataclass
class ScenarioResult:
    seed: int
    trigger: attack.TriggerSpec
    clean_report: EvalReport
    backdoored_report: EvalReport
    method_reports: dict[str, EvalReport] = field(default_factory=dict)
    models: dict[str, Model] = field(default_factory=dict)
    d_ft: Dataset | None = None
    test: Dataset | None = None
    asr_set: Dataset | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "clean": self.clean_report.to_dict(),
            "backdoored": self.backdoored_report.to_dict(),
            "methods": {m: r.to_dict() for m, r in self.method_reports.items()},
        }


def run_scenario(cfg: ExperimentConfig, seed: int,
                 methods: tuple[str, ...] = ("pbp", "ft"),
                 pdr: float | None = None,
                 ft_fraction: float | None = None,
                 keep_models: bool = False) -> ScenarioResult:
    """One full attack-then-defend experiment for one seed.

    `pdr` / `ft_fraction` override the config axes (used by sweeps).
    """
    data = generate_data(cfg, seed)
    arch = make_arch(cfg)
    train_cfg = dataclasses.replace(cfg.train, seed=seed + 5)

    clean_model = purify.train(init_model(arch, seed + 2), data.train, train_cfg)
    trigger = make_trigger(clean_model, data.train, cfg)

    pcfg = attack.PoisonConfig(
        pdr=pdr if pdr is not None else cfg.attack.pdr,
        mode=cfg.attack.mode,
        conflict_fraction=cfg.attack.conflict_fraction,
        seed=seed + 3,
    )
    poisoned = attack.poison_dataset(data.train, trigger, pcfg)
    backdoored = purify.train(init_model(arch, seed + 4), poisoned, train_cfg)

    asr_set = attack.build_asr_set(data.test, trigger)
    clean_report = evaluate(clean_model, data.test, asr_set)
    bd_report = evaluate(backdoored, data.test, asr_set)

    d_ft = finetune_set(cfg, poisoned, data.pool, seed, fraction=ft_fraction)

    result = ScenarioResult(
        seed=seed, trigger=trigger,
        clean_report=clean_report, backdoored_report=bd_report,
    )
    for method in methods:
        model = purify_model(method, backdoored, d_ft, cfg, seed)
        result.method_reports[method] = evaluate(model, data.test, asr_set,
                                                 baseline=bd_report)
        if keep_models:
            result.models[method] = model
    if keep_models:
        result.models["clean"] = clean_model
        result.models["backdoored"] = backdoored
        result.d_ft = d_ft
        result.test = data.test
        result.asr_set = asr_set
    return result


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian product of (pdr x ft_fraction x seed x method); one row per
    run. Infeasible combinations are skipped with a reason, not a crash."""
    rows = []
    sw = cfg.sweep
    seeds = list(range(sw.n_seeds))
    for pdr in sw.pdr:
        for frac in sw.ft_fraction:
            for seed in seeds:
                try:
                    res = run_scenario(cfg, seed, methods=sw.methods,
                                       pdr=pdr, ft_fraction=frac)
                except Exception as exc:  # noqa: BLE001 - logged, not fatal
                    for method in sw.methods:
                        rows.append({
                            "pdr": pdr, "ft_fraction": frac, "seed": seed,
                            "method": method, "c_acc": "", "asr": "", "der": "",
                            "skipped": f"{type(exc).__name__}: {exc}",
                        })
                    continue
                for method in sw.methods:
                    rep = res.method_reports[method]
                    rows.append({
                        "pdr": pdr, "ft_fraction": frac, "seed": seed,
                        "method": method, "c_acc": rep.c_acc, "asr": rep.asr,
                        "der": rep.der, "skipped": "",
                    })
    return rows
