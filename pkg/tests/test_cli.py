from __future__ import annotations

import json

import pytest

from fsrl.cli import COMMANDS, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_USAGE, main


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["gen-data", "--n-train", "many"]) == EXIT_USAGE
    assert main(["sweep", "--kind", "depth"]) == EXIT_USAGE


def test_help_is_ok(capsys):
    assert main(["--help"]) == EXIT_OK
    assert main(["verify-theory", "--help"]) == EXIT_OK


def test_config_errors(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "data.nope=1"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", str(tmp_path), "--set", "noequals"]) == EXIT_CONFIG
    assert main(["train-adapter", "--out", str(tmp_path), "--variant", "tanh"]) == EXIT_CONFIG
    (tmp_path / "c.json").write_text("[1,")
    assert main(["gen-data", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG


def test_missing_artifacts(tmp_path):
    for cmd in ("train-sae", "train-adapter", "eval-loss", "ablate", "topk-baseline", "sweep"):
        assert main([cmd, "-q", "--out", str(tmp_path)]) == EXIT_MISSING, cmd


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "lm.ckpt").write_bytes(b"garbage")
    assert main(["train-sae", "-q", "--out", str(tmp_path)]) == EXIT_CHECKPOINT


def test_verify_theory_and_gen_data(tmp_path, capsys):
    assert main(["verify-theory", "-q", "--out", str(tmp_path), "--trials", "10"]) == EXIT_OK
    summary = json.loads((tmp_path / "theory_summary.json").read_text())
    assert summary["passed"] is True
    assert json.loads((tmp_path / "theory.csv.config.json").read_text())["config"]["theory"]["n_trials"] == 10
    assert main(["gen-data", "-q", "--out", str(tmp_path), "--n-train", "5", "--n-val", "3", "--n-corpus", "7"]) == EXIT_OK
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 5


def test_every_subcommand_is_registered():
    assert set(COMMANDS) == {
        "gen-data", "train-lm", "train-sae", "train-adapter", "train-baseline", "eval-loss", "ablate",
        "topk-baseline", "analyze-usage", "composition", "sweep", "verify-theory", "grad-check",
    }


def test_csv_cells_unwrap_numpy_scalars():
    import numpy as np

    from fsrl.reports import fmt

    assert fmt(np.float64(0.1)) == "0.1"
    assert fmt(np.int64(3)) == "3"
    assert fmt(np.bool_(True)) == "true"
    assert fmt(float("nan")) == "" and fmt(None) == ""
