"""Experiment plumbing: metrics, single runs, ablation matrices, gradient checks.

A run is a pure function of its RunConfig. run_experiment executes the
training loop, writes the per-step metrics CSV and a JSON summary, and
returns the summary; run_ablation fans a config matrix out over seeds and
aggregates. Files are written atomically (temp file + rename) so a crashed
run never leaves a half-written CSV behind.
"""
from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import diffcore as dc
from .classifier import ClassifierWeights
from .config import RunConfig, StepMetrics, config_from_dict, config_to_dict
from .engine import (TrainState, evaluate_grid, evaluate_scenes, init_state,
                     next_detection_batches, next_grid_batches, predict_grid,
                     train_step_detection, train_step_segmentation)
from .synthdata import GridTask, GridTaskSpec, SceneTaskSpec, gen_grid, gen_scene
from .vclearn import (PotentialCategorySet, attention_vc_loss, cosine_sim_loss,
                      extend_logits, make_virtual_weight_normalized, neg_loss,
                      vc_ce_loss, vc_mse_loss)

GRADCHECK_FORMS = ("vc-ce", "vc-ce-focal", "vc-mse", "neg", "cosine")


class HarnessError(ValueError):
    pass


def compute_miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over the classes present in the ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise HarnessError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    ious = []
    for c in range(num_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        union = np.logical_or(gt_c, pred_c).sum()
        ious.append(np.logical_and(gt_c, pred_c).sum() / union)
    if not ious:
        raise HarnessError("ground truth contains none of the classes")
    return float(np.mean(ious))


def make_task(config: RunConfig):
    """Build the synthetic task a config describes.

    The task seed defaults to the run seed, so sweeping seeds redraws the
    data as well as the training randomness; pin task_overrides["seed"] to
    hold the data fixed across runs.
    """
    overrides = dict(config.task_overrides)
    overrides.setdefault("seed", config.seed)
    if config.task == "grid-seg":
        return gen_grid(GridTaskSpec(**overrides))
    return gen_scene(SceneTaskSpec(**overrides))


def evaluate_state(state: TrainState, task) -> dict:
    if isinstance(task, GridTask):
        result = evaluate_grid(state, task)
        miou = compute_miou(result["predictions"], task.test_labels, task.num_classes)
        return {"accuracy": result["accuracy"], "miou": miou}
    return {"accuracy": evaluate_scenes(state, task)["accuracy"]}


def _eval_metric(scores: dict, task) -> float:
    return scores["miou"] if isinstance(task, GridTask) else scores["accuracy"]


def run_loop(task, config: RunConfig):
    """Train for config.iterations steps; returns (state, metric rows)."""
    state = init_state(task, config)
    rows: list[StepMetrics] = []
    grid = isinstance(task, GridTask)
    for i in range(config.iterations):
        if grid:
            batch_l, batch_u = next_grid_batches(state, task)
            metrics = train_step_segmentation(batch_l, batch_u, state, task)
        else:
            batch_l, batch_u = next_detection_batches(state, task)
            metrics = train_step_detection(batch_l, batch_u, state, task)
        if (i + 1) % config.eval_every == 0 or i == config.iterations - 1:
            metrics.eval_metric = _eval_metric(evaluate_state(state, task), task)
        rows.append(metrics)
    return state, rows


def metrics_csv(rows) -> str:
    lines = [StepMetrics.CSV_HEADER]
    lines.extend(row.csv_row() for row in rows)
    return "\n".join(lines) + "\n"


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_write_npz(path, arrays: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _param_arrays(state: TrainState) -> dict:
    out = {}
    for role, params in (("student", state.student), ("teacher", state.teacher)):
        for entry in params.layout:
            out[f"{role}.{entry.name}"] = params.view(entry.name).copy()
    return out


def run_experiment(config: RunConfig, out_dir=None) -> dict:
    """Run one training job and write metrics.csv / summary.json / params.npz.

    out_dir falls back to config.out_dir; with neither set nothing is written
    and only the summary dict is returned. A non-finite loss aborts with the
    step index attached; no partial files are left behind.
    """
    task = make_task(config)
    state, rows = run_loop(task, config)
    final = evaluate_state(state, task)
    summary = {
        "config": config_to_dict(config),
        "seed": config.seed,
        "iterations_run": len(rows),
        "final": final,
    }
    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        os.makedirs(target, exist_ok=True)
        _atomic_write_text(os.path.join(target, "metrics.csv"), metrics_csv(rows))
        _atomic_write_text(os.path.join(target, "summary.json"),
                           json.dumps(summary, sort_keys=True, indent=2) + "\n")
        _atomic_write_npz(os.path.join(target, "params.npz"), _param_arrays(state))
    return summary


# ablation ------------------------------------------------------------------

ABLATION_HEADER = "policy,loss_form,weight_gen,seed,metric,mean,std,error"


def _ablation_cell(base: RunConfig, policy: str, loss_form: str, weight_gen: str,
                   seed: int) -> RunConfig:
    return dataclasses.replace(
        base,
        policy=dataclasses.replace(base.policy, policy=policy),
        loss_form=loss_form,
        weight_gen=weight_gen,
        seed=seed,
        out_dir=None,
    )


def _run_cell(config_dict: dict):
    """Worker entry point; returns the headline metric or raises."""
    config = config_from_dict(config_dict)
    summary = run_experiment(config)
    final = summary["final"]
    return final.get("miou", final["accuracy"])


def max_ablation_workers() -> int:
    raw = os.environ.get("VC_FORGE_THREADS", "")
    if raw.strip():
        n = int(raw)
        if n < 1:
            raise HarnessError("VC_FORGE_THREADS must be a positive integer")
        return n
    return os.cpu_count() or 1


def run_ablation(base: RunConfig, policies, loss_forms, weight_gens, seeds,
                 out_path=None, max_workers: int | None = None) -> str:
    """One run per (policy, loss form, weight generator) cell per seed.

    Emits a CSV with one row per run plus one aggregate row per cell holding
    the mean and standard deviation over its successful seeds. A failed run
    is recorded in its row's error column; the rest of the matrix continues.
    """
    if not (policies and loss_forms and weight_gens and seeds):
        raise HarnessError("ablation matrix must not be empty")
    cells = [(p, lf, wg) for p in policies for lf in loss_forms for wg in weight_gens]
    jobs = [(cell, seed) for cell in cells for seed in seeds]
    if max_workers is None:
        max_workers = max_ablation_workers()
    max_workers = min(max_workers, len(jobs))

    results: dict = {}
    config_dicts: dict = {}
    for job in jobs:
        # a cell that cannot even be configured still gets an error row
        try:
            config_dicts[job] = config_to_dict(_ablation_cell(base, *job[0], job[1]))
        except Exception as exc:  # noqa: BLE001 - recorded per cell by contract
            results[job] = ("error", f"{type(exc).__name__}: {exc}")

    if max_workers <= 1:
        for job, config_dict in config_dicts.items():
            try:
                results[job] = ("ok", _run_cell(config_dict))
            except Exception as exc:  # noqa: BLE001
                results[job] = ("error", f"{type(exc).__name__}: {exc}")
    elif config_dicts:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = {job: pool.submit(_run_cell, config_dict)
                       for job, config_dict in config_dicts.items()}
            for job, fut in futures.items():
                try:
                    results[job] = ("ok", fut.result())
                except Exception as exc:  # noqa: BLE001
                    results[job] = ("error", f"{type(exc).__name__}: {exc}")

    lines = [ABLATION_HEADER]
    for cell in cells:
        p, lf, wg = cell
        values = []
        for seed in seeds:
            status, payload = results[(cell, seed)]
            if status == "ok":
                values.append(payload)
                lines.append(f"{p},{lf},{wg},{seed},{payload!r},,,")
            else:
                message = str(payload).replace(",", ";").replace("\n", " ")
                lines.append(f"{p},{lf},{wg},{seed},,,,{message}")
        if values:
            mean = float(np.mean(values))
            std = float(np.std(values))
            lines.append(f"{p},{lf},{wg},all,,{mean!r},{std!r},")
        else:
            lines.append(f"{p},{lf},{wg},all,,,,every seed failed")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        _atomic_write_text(out_path, text)
    return text


# gradient checking -----------------------------------------------------------

def fd_check_leaf(build, value, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    build(node) -> scalar node, with `node` a leaf holding `value` (vector or
    matrix). Relative error per coordinate is |a - n| / max(1, |a|).
    """
    value = np.asarray(value, dtype=np.float64)
    node = dc.leaf(value.copy())
    out = build(node)
    if out.shape != ():
        raise HarnessError("fd_check_leaf: build must return a scalar node")
    dc.backward(out)
    analytic = np.zeros_like(value) if node.grad is None else node.grad.copy()

    numeric = np.empty_like(value)
    flat_value = value.ravel()
    flat_numeric = numeric.ravel()
    for i in range(flat_value.size):
        probes = []
        for sign in (1.0, -1.0):
            shifted = value.copy()
            shifted.ravel()[i] += sign * step
            probes.append(float(build(dc.leaf(shifted)).value))
        flat_numeric[i] = (probes[0] - probes[1]) / (2.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


def random_loss_instance(rng, num_classes: int = 5, feature_dim: int = 8,
                         pc_min: int = 2, pc_max: int = 4):
    """One random (f, W, f_teacher, pc) tuple for gradient checking."""
    f = rng.normal(size=feature_dim)
    w = rng.normal(size=(num_classes, feature_dim))
    f_teacher = rng.normal(size=feature_dim)
    size = int(rng.integers(pc_min, pc_max + 1))
    pc = PotentialCategorySet(
        frozenset(int(c) for c in rng.choice(num_classes, size=size, replace=False)),
        "random")
    return f, w, f_teacher, pc


def _loss_builders(form: str, f, w, f_teacher, pc):
    """(build_wrt_f, build_wrt_w) closures for one loss form and instance."""
    weights = ClassifierWeights(w)
    gamma = 2.0 if form == "vc-ce-focal" else None

    def virtual():
        return make_virtual_weight_normalized(f_teacher, weights)

    if form in ("vc-ce", "vc-ce-focal"):
        def wrt_f(node):
            return vc_ce_loss(extend_logits(node, dc.constant(w), virtual()), pc,
                              focal_gamma=gamma)

        def wrt_w(node):
            return vc_ce_loss(extend_logits(dc.constant(f), node, virtual()), pc,
                              focal_gamma=gamma)
    elif form == "vc-mse":
        def wrt_f(node):
            return vc_mse_loss(extend_logits(node, dc.constant(w), virtual()), pc)

        def wrt_w(node):
            return vc_mse_loss(extend_logits(dc.constant(f), node, virtual()), pc)
    elif form == "neg":
        def wrt_f(node):
            return neg_loss(dc.matvec(dc.constant(w), node), pc)

        def wrt_w(node):
            return neg_loss(dc.matvec(node, dc.constant(f)), pc)
    elif form == "cosine":
        def wrt_f(node):
            return cosine_sim_loss(node, virtual(), dc.constant(w), pc)

        def wrt_w(node):
            return cosine_sim_loss(dc.constant(f), virtual(), node, pc)
    else:
        raise HarnessError(f"unknown gradcheck form {form!r}")
    return wrt_f, wrt_w


def _cosine_near_kink(f, w, pc, margin: float = 1e-2) -> bool:
    """The hinge in the cosine loss is non-differentiable where cos hits 0."""
    for i in range(w.shape[0]):
        if i in pc.classes:
            continue
        c = f @ w[i] / (np.linalg.norm(f) * np.linalg.norm(w[i]))
        if abs(c) < margin:
            return True
    return False


def gradcheck_form(form: str, cases: int, rng, step: float = 1e-5,
                   tolerance: float = 1e-4, num_classes: int = 5,
                   feature_dim: int = 8) -> dict:
    """Finite-difference check of one loss form on random instances."""
    worst = 0.0
    failures = 0
    done = 0
    while done < cases:
        f, w, f_teacher, pc = random_loss_instance(rng, num_classes, feature_dim)
        if form == "cosine" and _cosine_near_kink(f, w, pc):
            continue
        wrt_f, wrt_w = _loss_builders(form, f, w, f_teacher, pc)
        err = max(fd_check_leaf(wrt_f, f, step), fd_check_leaf(wrt_w, w, step))
        worst = max(worst, err)
        failures += int(err > tolerance)
        done += 1
    return {"cases": cases, "max_rel_err": worst, "failures": failures}


def gradcheck_attention(cases: int, rng, step: float = 1e-5,
                        tolerance: float = 1e-4, num_classes: int = 5,
                        feature_dim: int = 8) -> dict:
    """Finite-difference check of the generator loss wrt each projection matrix."""
    names = ("wq", "wk", "wv", "wo")
    worst = 0.0
    failures = 0
    for _ in range(cases):
        f, w, f_teacher, _pc = random_loss_instance(rng, num_classes, feature_dim)
        weights = ClassifierWeights(w)
        label = int(rng.integers(num_classes))
        mats = {name: rng.normal(0.0, 1.0 / np.sqrt(feature_dim),
                                 size=(feature_dim, feature_dim))
                for name in names}
        err = 0.0
        for target in names:
            def build(node, target=target):
                params = {name: (node if name == target else dc.constant(mats[name]))
                          for name in names}
                return attention_vc_loss(params, f, f_teacher, label, weights)

            err = max(err, fd_check_leaf(build, mats[target], step))
        worst = max(worst, err)
        failures += int(err > tolerance)
    return {"cases": cases, "max_rel_err": worst, "failures": failures}


def gradcheck_suite(cases_per_form: int = 120, attention_cases: int = 25,
                    seed: int = 0, step: float = 1e-5,
                    tolerance: float = 1e-4) -> dict:
    """Randomized gradient checks across every loss form plus the generator.

    Returns a report with per-form case counts, worst relative error, and
    failure counts; the caller maps failures to a nonzero exit code.
    """
    rng = np.random.default_rng(seed)
    forms = {}
    for form in GRADCHECK_FORMS:
        forms[form] = gradcheck_form(form, cases_per_form, rng, step, tolerance)
    forms["attention-generator"] = gradcheck_attention(attention_cases, rng,
                                                       step, tolerance)
    total = sum(r["cases"] for r in forms.values())
    failures = sum(r["failures"] for r in forms.values())
    return {"tolerance": tolerance, "step": step, "total_cases": total,
            "total_failures": failures, "forms": forms}
