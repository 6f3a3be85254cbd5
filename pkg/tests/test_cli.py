"""Config schema, staged CLI pipeline, sweep, and theorem subcommand."""

import csv
import json
import os

import pytest

from bdpurify.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from bdpurify.config import (
    ExperimentConfig,
    config_from_dict,
    config_hash,
    load_config,
)
from bdpurify.errors import ConfigurationError


# small but complete experiment: every stage runs in a couple of seconds
TINY = {
    "synth": {"d": 16, "n": 600, "n_families": 3},
    "model": {"hidden_sizes": [16, 8]},
    "attack": {"trigger_size": 4},
    "train": {"epochs": 2, "batch_size": 64},
    "phase1": {"epochs": 1, "batch_size": 64},
    "phase2": {"epochs": 2, "batch_size": 64, "sigma": 0.1,
               "learning_rate": 0.05},
    "finetune": {"fraction": 0.2},
    "finetune_train": {"epochs": 1},
    "sweep": {"pdr": [0.01, 0.02], "ft_fraction": [0.2],
              "methods": ["pbp", "ft"], "n_seeds": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(args):
    return main(args)


# ---------------------------------------------------------------------------
# config schema


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError, match="pdrr"):
        config_from_dict({"attack": {"pdrr": 0.01}})


def test_unknown_toplevel_key():
    with pytest.raises(ConfigurationError, match="sigma"):
        config_from_dict({"sigma": 0.5})


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_load_config_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_config(p)


def test_config_hash_sensitivity():
    a = config_hash(ExperimentConfig())
    b = config_hash(config_from_dict({"attack": {"pdr": 0.02}}))
    assert a != b
    assert a == config_hash(ExperimentConfig())


def test_config_validation_values():
    with pytest.raises(ConfigurationError):
        config_from_dict({"attack": {"pdr": 1.5}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"seeds": []})
    with pytest.raises(ConfigurationError):
        config_from_dict({"sweep": {"methods": []}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"baselines": ["prune"]})


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_config_error(tmp_path, capsys):
    p = tmp_path / "config.json"
    p.write_text(json.dumps({"attack": {"pdrr": 0.01}}))
    code = run(["--config", str(p), "--out", str(tmp_path / "out"), "gen-data"])
    assert code == EXIT_CONFIG
    assert "pdrr" in capsys.readouterr().err


def test_exit_code_missing_artifact(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "out")
    code = run(["--config", tiny_config, "--out", out, "train"])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "poisoned.bin" in err  # names the missing path


# ---------------------------------------------------------------------------
# staged pipeline


def test_full_pipeline_stages(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "out")
    base = ["--config", tiny_config, "--out", out, "--log-level", "error"]
    assert run(base + ["gen-data"]) == EXIT_OK
    assert run(base + ["poison"]) == EXIT_OK
    assert run(base + ["train"]) == EXIT_OK
    assert run(base + ["purify", "--method", "pbp"]) == EXIT_OK
    assert run(base + ["purify", "--method", "ft"]) == EXIT_OK
    assert run(base + ["evaluate", "--name", "pbp"]) == EXIT_OK
    assert run(base + ["evaluate", "--name", "ft"]) == EXIT_OK

    for rel in (
        "data/train.bin", "data/test.bin", "data/pool.bin",
        "data/poisoned.bin", "data/asr.bin", "data/trigger.json",
        "models/clean.json", "models/backdoored.json",
        "models/purified_pbp.json", "models/purified_ft.json",
        "reports/purify_pbp.json", "reports/purify_ft.json",
        "reports/eval_pbp.json", "reports/eval_ft.json",
    ):
        assert (tmp_path / "out" / rel).exists(), rel

    # the two purify reports share the config hash
    rep_pbp = json.loads((tmp_path / "out" / "reports/purify_pbp.json").read_text())
    rep_ft = json.loads((tmp_path / "out" / "reports/purify_ft.json").read_text())
    assert rep_pbp["config_hash"] == rep_ft["config_hash"]

    # run records name only existing artifacts
    for rec_file in (tmp_path / "out" / "reports").glob("run_*.json"):
        rec = json.loads(rec_file.read_text())
        for path in rec["artifact_paths"]:
            assert os.path.exists(path), path

    ev = json.loads((tmp_path / "out" / "reports/eval_pbp.json").read_text())
    assert 0.0 <= ev["c_acc"] <= 1.0 and 0.0 <= ev["asr"] <= 1.0
    assert ev["der"] is not None  # backdoored model present as baseline


def test_pipeline_integrity_no_serialization_drift(tiny_config, tmp_path, capsys):
    """cmd_evaluate on a purified model reports the same numbers as an
    in-process evaluation of the loaded artifacts."""
    from bdpurify.analysis import evaluate
    from bdpurify.data import load_dataset
    from bdpurify.nncore import Model

    out = str(tmp_path / "out")
    base = ["--config", tiny_config, "--out", out, "--log-level", "error"]
    for stage in (["gen-data"], ["poison"], ["train"],
                  ["purify", "--method", "pbp"], ["evaluate", "--name", "pbp"]):
        assert run(base + stage) == EXIT_OK

    model = Model.load(tmp_path / "out" / "models" / "purified_pbp.json")
    test_ds = load_dataset(tmp_path / "out" / "data" / "test.bin")
    asr_set = load_dataset(tmp_path / "out" / "data" / "asr.bin")
    bd = Model.load(tmp_path / "out" / "models" / "backdoored.json")
    inproc = evaluate(model, test_ds, asr_set,
                      baseline=evaluate(bd, test_ds, asr_set))
    reported = json.loads(
        (tmp_path / "out" / "reports" / "eval_pbp.json").read_text())
    assert abs(reported["c_acc"] - inproc.c_acc) <= 1e-12
    assert abs(reported["asr"] - inproc.asr) <= 1e-12
    assert abs(reported["der"] - inproc.der) <= 1e-12


def test_evaluate_missing_model(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "out")
    base = ["--config", tiny_config, "--out", out, "--log-level", "error"]
    assert run(base + ["gen-data"]) == EXIT_OK
    assert run(base + ["evaluate", "--name", "pbp"]) == EXIT_RUNTIME


# ---------------------------------------------------------------------------
# sweep


def test_sweep_row_count_and_determinism(tiny_config, tmp_path):
    out = str(tmp_path / "out")
    base = ["--config", tiny_config, "--out", out, "--log-level", "error"]
    assert run(base + ["sweep"]) == EXIT_OK
    sweep_path = tmp_path / "out" / "reports" / "sweep.csv"
    first = sweep_path.read_bytes()
    with open(sweep_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    # 2 pdr x 1 fraction x 1 seed x 2 methods
    assert len(rows) == 4
    for row in rows:
        assert row["skipped"] == ""  # every tiny combination is feasible
        assert 0.0 <= float(row["c_acc"]) <= 1.0
        assert 0.0 <= float(row["asr"]) <= 1.0
    # deterministic: bytes identical on rerun (no timing columns in the CSV)
    assert run(base + ["sweep"]) == EXIT_OK
    assert sweep_path.read_bytes() == first


def test_sweep_empty_methods_rejected(tmp_path):
    doc = dict(TINY)
    doc["sweep"] = {"pdr": [0.01], "ft_fraction": [0.2], "methods": [],
                    "n_seeds": 1}
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    assert run(["--config", str(p), "--out", str(tmp_path / "o"), "sweep"]) \
        == EXIT_CONFIG


# ---------------------------------------------------------------------------
# verify-theorem


def test_verify_theorem_default_grid(tmp_path, capsys):
    out = str(tmp_path / "out")
    assert run(["--out", out, "verify-theorem"]) == EXIT_OK
    doc = json.loads((tmp_path / "out" / "reports" / "theorem.json").read_text())
    assert doc["spectrum"] == [2.0, 4.0]
    for res in doc["results"]:
        lam = max(doc["spectrum"])
        if res["eta"] < 1.0 / lam:
            assert res["converged"]
        if res["eta"] > 2.0 ** 0.5 / lam:
            assert res["diverged"]


def test_verify_theorem_single_eta(tmp_path):
    out = str(tmp_path / "out")
    assert run(["--out", out, "verify-theorem", "--etas", "0.1"]) == EXIT_OK
    doc = json.loads((tmp_path / "out" / "reports" / "theorem.json").read_text())
    assert len(doc["results"]) == 1
    assert doc["results"][0]["converged"]


def test_verify_theorem_small_T_rejected(tmp_path):
    assert run(["--out", str(tmp_path / "o"), "verify-theorem",
                "--iters", "3"]) == EXIT_CONFIG
