"""Command line surface: every subcommand end to end in a temp directory."""

import json
import os

import numpy as np
import pytest

from vcforge.cli import main
from vcforge.config import StepMetrics


def write_config(tmp_path, **extra):
    cfg = {"task": "grid-seg", "iterations": 5, "eval_every": 5,
           "task_overrides": {"height": 10, "width": 10, "label_budget": 2}}
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_gen_writes_grid_jsonl(tmp_path, capsys):
    rc = main(["gen", "--config", write_config(tmp_path), "--out", str(tmp_path / "data")])
    assert rc == 0
    assert (tmp_path / "data" / "grid.jsonl").exists()


def test_gen_scene_task(tmp_path):
    cfg = tmp_path / "det.json"
    cfg.write_text(json.dumps({
        "task": "scene-det", "iterations": 2,
        "task_overrides": {"label_budget": 2, "num_unlabelled": 2, "num_test": 1}}))
    rc = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "data")])
    assert rc == 0
    assert (tmp_path / "data" / "scenes.jsonl").exists()


def test_train_writes_metrics_and_prints_summary(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--config", write_config(tmp_path), "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    summary = json.loads(printed)
    assert "final" in summary and "accuracy" in summary["final"]
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == StepMetrics.CSV_HEADER
    assert len(lines) == 1 + 5


def test_train_seed_flag_wins_over_config(tmp_path, capsys):
    path = write_config(tmp_path, seed=3)
    rc = main(["train", "--config", path, "--seed", "9", "--out", str(tmp_path / "r")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["config"]["seed"] == 9


def test_train_override_flag(tmp_path, capsys):
    rc = main(["train", "--config", write_config(tmp_path),
               "--override", "iterations=3",
               "--override", "thresholds.beta=0.5",
               "--out", str(tmp_path / "r")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations_run"] == 3
    assert summary["config"]["thresholds"]["beta"] == 0.5


def test_bad_config_key_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"task": "grid-seg", "warmup": 10}))
    assert main(["train", "--config", str(path)]) == 2


def test_bad_override_value_exits_2(tmp_path):
    rc = main(["train", "--config", write_config(tmp_path),
               "--override", "thresholds.t=2.0"])
    assert rc == 2


def test_ablate_writes_csv(tmp_path):
    rc = main(["ablate", "--config", write_config(tmp_path),
               "--out", str(tmp_path / "ab"),
               "--loss-forms", "vc-ce,baseline-discard", "--seeds", "0"])
    assert rc == 0
    text = (tmp_path / "ab" / "ablation.csv").read_text()
    lines = text.strip().split("\n")
    assert len(lines) == 1 + 2 + 2  # header, 2 runs, 2 aggregates


def test_gradcheck_exit_zero(tmp_path, capsys):
    rc = main(["gradcheck", "--cases", "3"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["total_failures"] == 0


def test_eval_roundtrip(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    run_dir = tmp_path / "run"
    assert main(["train", "--config", cfg_path, "--out", str(run_dir)]) == 0
    capsys.readouterr()
    rc = main(["eval", "--config", cfg_path, "--params", str(run_dir / "params.npz")])
    assert rc == 0
    result = json.loads(capsys.readouterr().out)
    assert "accuracy" in result and 0.0 <= result["accuracy"] <= 1.0


def test_unknown_subcommand_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
