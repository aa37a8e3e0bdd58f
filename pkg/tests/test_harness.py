"""Experiment harness: metrics files, ablation grids, and gradient checking."""

import dataclasses
import json
import os

import numpy as np
import pytest

import vcforge as vf
from vcforge.harness import (
    compute_miou,
    fd_check_leaf,
    gradcheck_form,
    gradcheck_suite,
    make_task,
    max_ablation_workers,
    metrics_csv,
    run_ablation,
    run_experiment,
)
from vcforge.config import StepMetrics

import vcforge.diffcore as dc


def tiny_config(**overrides):
    cfg = vf.default_config("grid-seg")
    base = dict(iterations=6, eval_every=3, seed=0,
                task_overrides={"height": 10, "width": 10, "label_budget": 2})
    base.update(overrides)
    return dataclasses.replace(cfg, **base)


# miou ---------------------------------------------------------------------------

def test_miou_crafted_example():
    pred = np.array([0, 1, 1, 1])
    gt = np.array([0, 0, 1, 1])
    # class 0: intersection 1, union 2; class 1: intersection 2, union 3
    assert compute_miou(pred, gt, num_classes=2) == pytest.approx(7.0 / 12.0)


def test_miou_perfect_is_one():
    labels = np.array([0, 1, 2, 2, 1])
    assert compute_miou(labels, labels, num_classes=3) == 1.0


def test_miou_ignores_classes_absent_from_gt():
    pred = np.array([0, 0, 2])
    gt = np.array([0, 0, 0])
    # only class 0 is present in gt; its IoU is 2/3
    assert compute_miou(pred, gt, num_classes=3) == pytest.approx(2.0 / 3.0)


# experiment ----------------------------------------------------------------------

def test_make_task_applies_overrides():
    cfg = tiny_config()
    task = make_task(cfg)
    assert task.features.shape[0] == 100
    assert len(task.labelled_ids) == 2 * task.num_classes


def test_run_experiment_writes_artifacts(tmp_path):
    cfg = tiny_config()
    summary = run_experiment(cfg, out_dir=str(tmp_path))
    assert (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "summary.json").exists()
    assert (tmp_path / "params.npz").exists()

    lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == StepMetrics.CSV_HEADER
    assert len(lines) == 1 + cfg.iterations

    with open(tmp_path / "summary.json") as fh:
        loaded = json.load(fh)
    assert loaded["final"] == summary["final"]
    assert loaded["config"]["seed"] == 0

    with np.load(tmp_path / "params.npz") as npz:
        assert any(k.startswith("student.") for k in npz.files)
        assert any(k.startswith("teacher.") for k in npz.files)


def test_run_experiment_deterministic_bytes(tmp_path):
    cfg = tiny_config()
    run_experiment(cfg, out_dir=str(tmp_path / "a"))
    run_experiment(cfg, out_dir=str(tmp_path / "b"))
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert csv_a == csv_b


def test_metrics_csv_serializes_rows():
    rows = [StepMetrics(iteration=i, loss_labelled=0.5, loss_vc=0.0,
                        confusing_ratio=0.0, pseudo_accuracy=1.0) for i in range(3)]
    text = metrics_csv(rows)
    assert text.startswith(StepMetrics.CSV_HEADER + "\n")
    assert text.count("\n") == 3 + 1  # header + rows + trailing newline


# ablation ------------------------------------------------------------------------

def test_run_ablation_row_count(tmp_path):
    cfg = tiny_config(iterations=4)
    text = run_ablation(cfg, policies=["mutual"], loss_forms=["vc-ce", "baseline-keep"],
                        weight_gens=["normalized"], seeds=[0, 1],
                        out_path=str(tmp_path / "ablation.csv"), max_workers=1)
    lines = text.strip().split("\n")
    # header + 2 forms x 2 seeds + 2 aggregate rows
    assert lines[0] == "policy,loss_form,weight_gen,seed,metric,mean,std,error"
    assert len(lines) == 1 + 4 + 2
    assert (tmp_path / "ablation.csv").read_text() == text
    agg = [ln for ln in lines if ",all," in ln]
    assert len(agg) == 2
    for ln in agg:
        assert ln.split(",")[5] != ""  # mean column populated


def test_run_ablation_bad_cell_reports_error():
    cfg = tiny_config(iterations=2)
    text = run_ablation(cfg, policies=["mutual"], loss_forms=["not-a-loss"],
                        weight_gens=["normalized"], seeds=[0], max_workers=1)
    assert "every seed failed" in text
    # error text must not break the CSV shape
    for line in text.strip().split("\n")[1:]:
        assert line.count(",") == 7


def test_max_ablation_workers_env(monkeypatch):
    monkeypatch.setenv("VC_FORGE_THREADS", "3")
    assert max_ablation_workers() == 3
    monkeypatch.delenv("VC_FORGE_THREADS")
    assert max_ablation_workers() >= 1


# gradient checking ----------------------------------------------------------------

def test_fd_check_leaf_vector_and_matrix():
    def build_vec(x):
        return dc.vsum(dc.mul(x, x))

    assert fd_check_leaf(build_vec, np.array([1.0, -2.0, 0.5])) < 1e-8

    def build_mat(w):
        return dc.vsum(dc.matvec(w, dc.constant(np.array([1.0, 2.0]))))

    assert fd_check_leaf(build_mat, np.array([[0.5, -0.25], [1.5, 2.0]])) < 1e-8


def test_gradcheck_single_form_passes():
    out = gradcheck_form("vc-ce", cases=10, rng=np.random.default_rng(0))
    assert out["failures"] == 0
    assert out["cases"] == 10


def test_gradcheck_suite_small_run():
    out = gradcheck_suite(cases_per_form=3, attention_cases=2, seed=1)
    assert out["total_failures"] == 0
    assert set(out["forms"]) == {
        "vc-ce", "vc-ce-focal", "vc-mse", "neg", "cosine", "attention-generator"}
    assert out["total_cases"] == 3 * 5 + 2
