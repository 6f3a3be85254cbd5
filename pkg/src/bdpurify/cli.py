"""Command-line interface: staged experiment pipeline with persisted
artifacts.

Stages (composable through a shared output directory):

    gen-data  -> data/train.bin, data/test.bin, data/pool.bin
    poison    -> models/clean.json, data/poisoned.bin, data/trigger.json,
                 data/asr.bin
    train     -> models/backdoored.json (trained on the poisoned set)
    purify    -> models/purified_<method>.json, reports/purify_<method>.json
    evaluate  -> reports/eval_<name>.json
    sweep     -> reports/sweep.csv
    verify-theorem -> reports/theorem.json

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import attack, purify
from .analysis import evaluate as eval_model
from .analysis import verify_convergence_theorem
from .config import ExperimentConfig, config_hash, config_to_dict, load_config
from .data import Dataset, load_dataset, save_dataset
from .errors import BdpurifyError, ConfigurationError
from .nncore import Model, init_model
from .pipeline import (
    finetune_set,
    generate_data,
    make_arch,
    make_trigger,
    purify_model,
    run_sweep,
)

log = logging.getLogger("bdpurify")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _atomic_write(path: str, writer) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, doc) -> None:
    _atomic_write(path, lambda tmp: json.dump(doc, open(tmp, "w"), indent=2))


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise BdpurifyError(f"missing input artifact: {path}")
    return path


def _layout(out_dir: str) -> dict[str, str]:
    return {name: os.path.join(out_dir, name)
            for name in ("data", "models", "masks", "reports")}


class Stage:
    """Shared context for one CLI invocation."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, seed: int):
        self.cfg = cfg
        self.out = out_dir
        self.seed = seed
        self.dirs = _layout(out_dir)
        self.hash = config_hash(cfg)

    def path(self, kind: str, name: str) -> str:
        return os.path.join(self.dirs[kind], name)

    def run_record(self, stage: str, reports: dict, artifacts: list[str],
                   elapsed: float) -> None:
        rec = {
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.seed,
            "config": config_to_dict(self.cfg),
            "reports": reports,
            "artifact_paths": artifacts,
            "wall_time_s": elapsed,
        }
        _write_json(self.path("reports", f"run_{stage}_{self.hash}.json"), rec)


def cmd_gen_data(st: Stage) -> None:
    t0 = time.perf_counter()
    data = generate_data(st.cfg, st.seed)
    paths = []
    for name, ds in (("train", data.train), ("test", data.test), ("pool", data.pool)):
        p = st.path("data", f"{name}.bin")
        _atomic_write(p, lambda tmp, ds=ds: save_dataset(ds, tmp, "bin"))
        paths.append(p)
        log.info("wrote %s (%d rows)", p, len(ds))
    st.run_record("gen_data", {}, paths, time.perf_counter() - t0)


def cmd_poison(st: Stage) -> None:
    t0 = time.perf_counter()
    train_ds = load_dataset(_require(st.path("data", "train.bin")))
    arch = make_arch(st.cfg)
    train_cfg = dataclasses.replace(st.cfg.train, seed=st.seed + 5)
    clean = purify.train(init_model(arch, st.seed + 2), train_ds, train_cfg)
    trigger = make_trigger(clean, train_ds, st.cfg)
    pcfg = attack.PoisonConfig(
        pdr=st.cfg.attack.pdr, mode=st.cfg.attack.mode,
        conflict_fraction=st.cfg.attack.conflict_fraction, seed=st.seed + 3,
    )
    poisoned = attack.poison_dataset(train_ds, trigger, pcfg)
    test_ds = load_dataset(_require(st.path("data", "test.bin")))
    asr_set = attack.build_asr_set(test_ds, trigger)

    paths = []
    p = st.path("models", "clean.json")
    _atomic_write(p, clean.save)
    paths.append(p)
    p = st.path("data", "poisoned.bin")
    _atomic_write(p, lambda tmp: save_dataset(poisoned, tmp, "bin"))
    paths.append(p)
    p = st.path("data", "asr.bin")
    _atomic_write(p, lambda tmp: save_dataset(asr_set, tmp, "bin"))
    paths.append(p)
    p = st.path("data", "trigger.json")
    _atomic_write(p, lambda tmp: open(tmp, "w").write(trigger.to_json()))
    paths.append(p)
    st.run_record("poison", {"trigger_size": trigger.trigger_size}, paths,
                  time.perf_counter() - t0)


def cmd_train(st: Stage, data_path: str | None, model_out: str | None) -> None:
    t0 = time.perf_counter()
    data_path = data_path or st.path("data", "poisoned.bin")
    ds = load_dataset(_require(data_path))
    arch = make_arch(st.cfg)
    train_cfg = dataclasses.replace(st.cfg.train, seed=st.seed + 5)
    record: dict = {}
    model = purify.train(init_model(arch, st.seed + 4), ds, train_cfg,
                         record=record)
    out = model_out or st.path("models", "backdoored.json")
    _atomic_write(out, model.save)
    log.info("trained model on %s -> %s", data_path, out)
    st.run_record("train", {"loss_curve": record.get("loss_curve", [])},
                  [out], time.perf_counter() - t0)


def cmd_purify(st: Stage, method: str) -> None:
    t0 = time.perf_counter()
    model_bd = Model.load(_require(st.path("models", "backdoored.json")))
    train_ds = load_dataset(_require(st.path("data", "poisoned.bin")))
    pool = load_dataset(_require(st.path("data", "pool.bin")))
    d_ft = finetune_set(st.cfg, train_ds, pool, st.seed)
    record: dict = {}
    model = purify_model(method, model_bd, d_ft, st.cfg, st.seed, record=record)
    out = st.path("models", f"purified_{method}.json")
    _atomic_write(out, model.save)
    paths = [out]
    if "mask_summary" in record:
        p = st.path("masks", f"mask_{method}_{st.hash}.json")
        _write_json(p, record["mask_summary"])
        paths.append(p)
    rep_path = st.path("reports", f"purify_{method}.json")
    _write_json(rep_path, {
        "method": method,
        "config_hash": st.hash,
        "config": config_to_dict(st.cfg),
        "record": record,
        "wall_time_s": time.perf_counter() - t0,
    })
    paths.append(rep_path)
    st.run_record(f"purify_{method}", {"method": method}, paths,
                  time.perf_counter() - t0)


def cmd_evaluate(st: Stage, model_path: str | None, name: str) -> None:
    t0 = time.perf_counter()
    model_path = model_path or st.path("models", f"purified_{name}.json")
    model = Model.load(_require(model_path))
    test_ds = load_dataset(_require(st.path("data", "test.bin")))
    asr_set = load_dataset(_require(st.path("data", "asr.bin")))
    baseline = None
    bd_path = st.path("models", "backdoored.json")
    if os.path.exists(bd_path) and os.path.abspath(model_path) != os.path.abspath(bd_path):
        baseline = eval_model(Model.load(bd_path), test_ds, asr_set)
    report = eval_model(model, test_ds, asr_set, baseline=baseline)
    out = st.path("reports", f"eval_{name}.json")
    _write_json(out, report.to_dict())
    print(f"{name}: c_acc={report.c_acc:.4f} asr={report.asr:.4f}"
          + (f" der={report.der:.4f}" if report.der is not None else ""))
    st.run_record(f"evaluate_{name}", {name: report.to_dict()}, [out],
                  time.perf_counter() - t0)


SWEEP_COLUMNS = ["pdr", "ft_fraction", "seed", "method", "c_acc", "asr", "der", "skipped"]


def cmd_sweep(st: Stage) -> None:
    t0 = time.perf_counter()
    rows = run_sweep(st.cfg)
    out = st.path("reports", "sweep.csv")

    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow(row)

    _atomic_write(out, write)
    skipped = sum(1 for r in rows if r["skipped"])
    log.info("sweep: %d rows (%d skipped) -> %s", len(rows), skipped, out)
    st.run_record("sweep", {"rows": len(rows), "skipped": skipped}, [out],
                  time.perf_counter() - t0)


def cmd_verify_theorem(st: Stage, spectrum: list[float], etas: list[float],
                       T: int) -> None:
    if T < 4:
        raise ConfigurationError("T must be >= 4")
    if not spectrum:
        raise ConfigurationError("spectrum must be nonempty")
    lam = max(spectrum)
    if not etas:
        # default grid straddling the theorem bound 1/lambda_max
        etas = [f / lam for f in (0.2, 0.5, 0.8, 0.95, 1.05, 1.3, 1.6)]
    results = []
    for eta in etas:
        rep = verify_convergence_theorem(spectrum, eta, T)
        results.append(rep.to_dict())
        print(f"eta={eta:.6g}: converged={rep.converged} "
              f"(theorem bound {rep.theorem_bound:.6g}, "
              f"recurrence bound {rep.true_bound:.6g})")
    out = st.path("reports", "theorem.json")
    _write_json(out, {"spectrum": spectrum, "T": T, "results": results})
    st.run_record("verify_theorem", {"n_points": len(results)}, [out], 0.0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bdpurify",
        description="Backdoor purification experiments for malware-style "
                    "tabular classifiers.",
    )
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--log-level", default="info",
                   choices=["error", "warn", "info", "debug"])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate synthetic train/test/pool data")
    sub.add_parser("poison", help="build trigger, poison training data")
    sp = sub.add_parser("train", help="train a model on a dataset")
    sp.add_argument("--data", default=None, help="dataset path (default: poisoned set)")
    sp.add_argument("--model-out", default=None)
    sp = sub.add_parser("purify", help="run a purification method")
    sp.add_argument("--method", default="pbp",
                    choices=["pbp", "ft", "lp", "fe_tuning", "ft_init", "fst"])
    sp = sub.add_parser("evaluate", help="evaluate a model")
    sp.add_argument("--model", default=None, help="model path")
    sp.add_argument("--name", default="pbp", help="report name")
    sub.add_parser("sweep", help="run the configured parameter sweep")
    sp = sub.add_parser("verify-theorem", help="numerical convergence check")
    sp.add_argument("--spectrum", default="2,4",
                    help="comma-separated positive eigenvalues")
    sp.add_argument("--etas", default="",
                    help="comma-separated learning rates (default: grid)")
    sp.add_argument("--iters", type=int, default=2000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level={"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}[args.log_level],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        out_dir = args.out or cfg.out_dir
        st = Stage(cfg, out_dir, args.seed)
        if args.command == "gen-data":
            cmd_gen_data(st)
        elif args.command == "poison":
            cmd_poison(st)
        elif args.command == "train":
            cmd_train(st, args.data, args.model_out)
        elif args.command == "purify":
            cmd_purify(st, args.method)
        elif args.command == "evaluate":
            cmd_evaluate(st, args.model, args.name)
        elif args.command == "sweep":
            cmd_sweep(st)
        elif args.command == "verify-theorem":
            spectrum = [float(v) for v in args.spectrum.split(",") if v]
            etas = [float(v) for v in args.etas.split(",") if v]
            cmd_verify_theorem(st, spectrum, etas, args.iters)
        return EXIT_OK
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BdpurifyError as exc:
        log.error("runtime error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
