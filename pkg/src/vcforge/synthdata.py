"""Synthetic dense-prediction tasks: a labelled-pixel grid and box scenes.

Features are class-conditional Gaussians. A confusable pair (i, j, sigma)
pulls the two class centers to a fixed small distance apart and inflates
their noise to sigma, which is where genuine confusing samples come from.
Everything is a pure function of (spec, seed): the same spec reproduces the
same task bit for bit, and the held-out test split is generated from a child
seed so its unit ids never overlap the training ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .boxgeom import BBox

WEAK_SIGMA = 0.05
STRONG_SIGMA = 0.3
STRONG_MASK_PROB = 0.5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GridTaskSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    feature_dim: int = 8
    label_budget: int = 5
    confusable_pairs: tuple = ((0, 1, 0.9),)
    class_centers: tuple | None = None
    base_sigma: float = 0.25
    center_spread: float = 2.0
    confusable_distance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("need at least two classes")
        if self.label_budget < 1:
            raise DataError("label budget must be positive")
        for i, j, sigma in self.confusable_pairs:
            if not (0 <= i < self.num_classes and 0 <= j < self.num_classes and i != j):
                raise DataError(f"bad confusable pair ({i}, {j})")
            if sigma <= 0.0:
                raise DataError("confusable overlap sigma must be positive")


@dataclass
class GridTask:
    spec: GridTaskSpec
    features: np.ndarray        # (H*W, C)
    labels: np.ndarray          # (H*W,) ground truth
    unit_ids: np.ndarray        # (H*W,) globally unique
    labelled_ids: np.ndarray    # indices into the arrays above
    unlabelled_ids: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    test_unit_ids: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def _build_centers(num_classes, feature_dim, confusable_pairs, spread, pair_distance, rng):
    centers = rng.normal(0.0, spread, size=(num_classes, feature_dim))
    for i, j, _sigma in confusable_pairs:
        direction = rng.normal(size=feature_dim)
        direction /= np.linalg.norm(direction)
        centers[j] = centers[i] + pair_distance * direction
    return centers


def _class_sigmas(spec) -> np.ndarray:
    sigmas = np.full(spec.num_classes, spec.base_sigma)
    for i, j, sigma in spec.confusable_pairs:
        sigmas[i] = sigma
        sigmas[j] = sigma
    return sigmas


def gen_grid(spec: GridTaskSpec) -> GridTask:
    root = np.random.SeedSequence(spec.seed)
    train_seq, test_seq, center_seq = root.spawn(3)
    if spec.class_centers is not None:
        centers = np.asarray(spec.class_centers, dtype=np.float64)
        if centers.shape != (spec.num_classes, spec.feature_dim):
            raise DataError("class_centers shape must be (num_classes, feature_dim)")
    else:
        centers = _build_centers(spec.num_classes, spec.feature_dim, spec.confusable_pairs,
                                 spec.center_spread, spec.confusable_distance,
                                 np.random.default_rng(center_seq))
    sigmas = _class_sigmas(spec)

    def sample_split(seq, id_offset):
        rng = np.random.default_rng(seq)
        n = spec.height * spec.width
        labels = rng.integers(0, spec.num_classes, size=n)
        noise = rng.normal(size=(n, spec.feature_dim))
        features = centers[labels] + sigmas[labels][:, None] * noise
        return features, labels, np.arange(id_offset, id_offset + n)

    n = spec.height * spec.width
    features, labels, unit_ids = sample_split(train_seq, 0)
    test_features, test_labels, test_ids = sample_split(test_seq, n)

    rng = np.random.default_rng(root.spawn(1)[0])
    labelled = []
    for c in range(spec.num_classes):
        pool = np.flatnonzero(labels == c)
        if pool.shape[0] < spec.label_budget:
            raise DataError(f"class {c} has only {pool.shape[0]} pixels, "
                            f"budget is {spec.label_budget}")
        labelled.append(rng.choice(pool, size=spec.label_budget, replace=False))
    labelled_ids = np.sort(np.concatenate(labelled))
    mask = np.ones(n, dtype=bool)
    mask[labelled_ids] = False
    return GridTask(spec=spec, features=features, labels=labels, unit_ids=unit_ids,
                    labelled_ids=labelled_ids, unlabelled_ids=np.flatnonzero(mask),
                    test_features=test_features, test_labels=test_labels,
                    test_unit_ids=test_ids)


@dataclass(frozen=True)
class SceneUnit:
    uid: int
    proposal: BBox
    gt_box: BBox
    gt_class: int
    features: np.ndarray


@dataclass(frozen=True)
class Scene:
    scene_id: int
    units: tuple


@dataclass(frozen=True)
class SceneTaskSpec:
    extent: float = 100.0
    objects_min: int = 2
    objects_max: int = 5
    num_fg_classes: int = 3
    feature_dim: int = 8
    label_budget: int = 8          # labelled scenes
    num_unlabelled: int = 40
    num_test: int = 15
    confusable_pairs: tuple = ((0, 1, 0.9),)
    class_centers: tuple | None = None
    base_sigma: float = 0.25
    center_spread: float = 2.0
    confusable_distance: float = 1.0
    box_jitter: float = 2.0
    bg_per_scene: int = 2
    box_min: float = 10.0
    box_max: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.num_fg_classes < 2:
            raise DataError("need at least two foreground classes")
        if not 0 < self.objects_min <= self.objects_max:
            raise DataError("bad object count range")
        for i, j, sigma in self.confusable_pairs:
            if not (0 <= i < self.num_fg_classes and 0 <= j < self.num_fg_classes and i != j):
                raise DataError(f"bad confusable pair ({i}, {j})")
            if sigma <= 0.0:
                raise DataError("confusable overlap sigma must be positive")

    @property
    def bg_index(self) -> int:
        """Background is the last slot of the (num_fg_classes + 1)-way head."""
        return self.num_fg_classes


@dataclass
class SceneTask:
    spec: SceneTaskSpec
    labelled: tuple
    unlabelled: tuple
    test: tuple

    @property
    def num_classes(self) -> int:
        return self.spec.num_fg_classes + 1

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim


def _random_box(rng, spec) -> BBox:
    w = rng.uniform(spec.box_min, spec.box_max)
    h = rng.uniform(spec.box_min, spec.box_max)
    x1 = rng.uniform(0.0, spec.extent - w)
    y1 = rng.uniform(0.0, spec.extent - h)
    return BBox(x1, y1, x1 + w, y1 + h)


def _jitter_box(rng, box: BBox, sigma: float, spec) -> BBox:
    if sigma == 0.0:
        return box
    for _ in range(64):
        vals = np.array([box.x1, box.y1, box.x2, box.y2]) + rng.normal(0.0, sigma, size=4)
        if (vals[0] >= 0.0 and vals[1] >= 0.0
                and vals[2] <= spec.extent and vals[3] <= spec.extent
                and vals[2] - vals[0] >= 1.0 and vals[3] - vals[1] >= 1.0):
            return BBox(*vals)
    # jitter kept leaving the scene or collapsing; clamp the original instead
    x1 = min(max(box.x1, 0.0), spec.extent - 1.0)
    y1 = min(max(box.y1, 0.0), spec.extent - 1.0)
    return BBox(x1, y1, max(min(box.x2, spec.extent), x1 + 1.0),
                max(min(box.y2, spec.extent), y1 + 1.0))


def gen_scene(spec: SceneTaskSpec) -> SceneTask:
    root = np.random.SeedSequence(spec.seed)
    center_seq, data_seq = root.spawn(2)
    total_classes = spec.num_fg_classes + 1
    if spec.class_centers is not None:
        centers = np.asarray(spec.class_centers, dtype=np.float64)
        if centers.shape != (total_classes, spec.feature_dim):
            raise DataError("class_centers shape must be (num_fg_classes + 1, feature_dim)")
    else:
        centers = _build_centers(total_classes, spec.feature_dim, spec.confusable_pairs,
                                 spec.center_spread, spec.confusable_distance,
                                 np.random.default_rng(center_seq))
    sigmas = np.full(total_classes, spec.base_sigma)
    for i, j, sigma in spec.confusable_pairs:
        sigmas[i] = sigma
        sigmas[j] = sigma

    rng = np.random.default_rng(data_seq)
    uid = 0

    def make_scene(scene_id):
        nonlocal uid
        units = []
        count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
        for _ in range(count):
            cls = int(rng.integers(0, spec.num_fg_classes))
            gt = _random_box(rng, spec)
            proposal = _jitter_box(rng, gt, spec.box_jitter, spec)
            feats = centers[cls] + sigmas[cls] * rng.normal(size=spec.feature_dim)
            units.append(SceneUnit(uid, proposal, gt, cls, feats))
            uid += 1
        for _ in range(spec.bg_per_scene):
            box = _random_box(rng, spec)
            feats = centers[spec.bg_index] + sigmas[spec.bg_index] * rng.normal(size=spec.feature_dim)
            units.append(SceneUnit(uid, box, box, spec.bg_index, feats))
            uid += 1
        return Scene(scene_id, tuple(units))

    n_total = spec.label_budget + spec.num_unlabelled + spec.num_test
    scenes = [make_scene(i) for i in range(n_total)]
    a, b = spec.label_budget, spec.label_budget + spec.num_unlabelled
    return SceneTask(spec=spec, labelled=tuple(scenes[:a]), unlabelled=tuple(scenes[a:b]),
                     test=tuple(scenes[b:]))


def perturb(features, strength: str, seed, sigma: float | None = None,
            mask_prob: float | None = None) -> np.ndarray:
    """Feature-space augmentation, deterministic in (features shape, seed).

    Weak adds small Gaussian noise. Strong adds larger noise and then zeroes
    each feature independently with the mask probability.
    """
    features = np.asarray(features, dtype=np.float64)
    if strength == "weak":
        sigma = WEAK_SIGMA if sigma is None else sigma
        mask_prob = 0.0 if mask_prob is None else mask_prob
    elif strength == "strong":
        sigma = STRONG_SIGMA if sigma is None else sigma
        mask_prob = STRONG_MASK_PROB if mask_prob is None else mask_prob
    else:
        raise DataError(f"unknown perturbation strength {strength!r}")
    rng = np.random.default_rng(seed)
    out = features + (rng.normal(size=features.shape) * sigma if sigma > 0.0 else 0.0)
    if mask_prob > 0.0:
        out = np.where(rng.random(features.shape) < mask_prob, 0.0, out)
    return out


def unit_seed(run_seed: int, step: int, uid: int, kind: int):
    """Stable per-unit augmentation seed: same unit and step always replays."""
    return (int(run_seed) & 0xFFFFFFFF, int(step), int(uid), int(kind))


# line-delimited serialization -------------------------------------------------

def write_grid_jsonl(task: GridTask, path) -> None:
    labelled = set(int(i) for i in task.labelled_ids)
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "grid-spec", **_grid_spec_dict(task.spec)}) + "\n")
        for split, feats, labels, ids in (("train", task.features, task.labels, task.unit_ids),
                                          ("test", task.test_features, task.test_labels,
                                           task.test_unit_ids)):
            for i in range(feats.shape[0]):
                rec = {"kind": "unit", "id": int(ids[i]), "split": split,
                       "features": [float(v) for v in feats[i]],
                       "label": int(labels[i])}
                if split == "train":
                    rec["labelled"] = i in labelled
                fh.write(json.dumps(rec) + "\n")


def read_grid_jsonl(path) -> GridTask:
    spec = None
    rows = {"train": [], "test": []}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "grid-spec":
                rec.pop("kind")
                rec["confusable_pairs"] = tuple(tuple(p) for p in rec["confusable_pairs"])
                if rec.get("class_centers") is not None:
                    rec["class_centers"] = tuple(tuple(c) for c in rec["class_centers"])
                spec = GridTaskSpec(**rec)
            else:
                rows[rec["split"]].append(rec)
    if spec is None:
        raise DataError("missing grid-spec record")
    for split in rows:
        rows[split].sort(key=lambda r: r["id"])

    def unpack(records):
        feats = np.array([r["features"] for r in records])
        labels = np.array([r["label"] for r in records])
        ids = np.array([r["id"] for r in records])
        return feats, labels, ids

    features, labels, unit_ids = unpack(rows["train"])
    test_features, test_labels, test_ids = unpack(rows["test"])
    labelled_ids = np.array([i for i, r in enumerate(rows["train"]) if r["labelled"]])
    mask = np.ones(features.shape[0], dtype=bool)
    mask[labelled_ids] = False
    return GridTask(spec=spec, features=features, labels=labels, unit_ids=unit_ids,
                    labelled_ids=labelled_ids, unlabelled_ids=np.flatnonzero(mask),
                    test_features=test_features, test_labels=test_labels,
                    test_unit_ids=test_ids)


def _grid_spec_dict(spec: GridTaskSpec) -> dict:
    return {"height": spec.height, "width": spec.width, "num_classes": spec.num_classes,
            "feature_dim": spec.feature_dim, "label_budget": spec.label_budget,
            "confusable_pairs": [list(p) for p in spec.confusable_pairs],
            "class_centers": None if spec.class_centers is None
            else [list(c) for c in spec.class_centers],
            "base_sigma": spec.base_sigma, "center_spread": spec.center_spread,
            "confusable_distance": spec.confusable_distance, "seed": spec.seed}


def _scene_spec_dict(spec: SceneTaskSpec) -> dict:
    return {"extent": spec.extent, "objects_min": spec.objects_min,
            "objects_max": spec.objects_max, "num_fg_classes": spec.num_fg_classes,
            "feature_dim": spec.feature_dim, "label_budget": spec.label_budget,
            "num_unlabelled": spec.num_unlabelled, "num_test": spec.num_test,
            "confusable_pairs": [list(p) for p in spec.confusable_pairs],
            "class_centers": None if spec.class_centers is None
            else [list(c) for c in spec.class_centers],
            "base_sigma": spec.base_sigma, "center_spread": spec.center_spread,
            "confusable_distance": spec.confusable_distance, "box_jitter": spec.box_jitter,
            "bg_per_scene": spec.bg_per_scene, "box_min": spec.box_min,
            "box_max": spec.box_max, "seed": spec.seed}


def write_scene_jsonl(task: SceneTask, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "scene-spec", **_scene_spec_dict(task.spec)}) + "\n")
        for split, scenes in (("labelled", task.labelled), ("unlabelled", task.unlabelled),
                              ("test", task.test)):
            for scene in scenes:
                rec = {"kind": "scene", "scene_id": scene.scene_id, "split": split,
                       "units": [{"uid": u.uid,
                                  "proposal": [u.proposal.x1, u.proposal.y1,
                                               u.proposal.x2, u.proposal.y2],
                                  "gt_box": [u.gt_box.x1, u.gt_box.y1, u.gt_box.x2, u.gt_box.y2],
                                  "gt_class": u.gt_class,
                                  "features": [float(v) for v in u.features]}
                                 for u in scene.units]}
                fh.write(json.dumps(rec) + "\n")


def read_scene_jsonl(path) -> SceneTask:
    spec = None
    splits = {"labelled": [], "unlabelled": [], "test": []}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "scene-spec":
                rec.pop("kind")
                rec["confusable_pairs"] = tuple(tuple(p) for p in rec["confusable_pairs"])
                if rec.get("class_centers") is not None:
                    rec["class_centers"] = tuple(tuple(c) for c in rec["class_centers"])
                spec = SceneTaskSpec(**rec)
            else:
                units = tuple(SceneUnit(u["uid"], BBox(*u["proposal"]), BBox(*u["gt_box"]),
                                        u["gt_class"], np.array(u["features"]))
                              for u in rec["units"])
                splits[rec["split"]].append(Scene(rec["scene_id"], units))
    if spec is None:
        raise DataError("missing scene-spec record")
    for split in splits.values():
        split.sort(key=lambda s: s.scene_id)
    return SceneTask(spec=spec, labelled=tuple(splits["labelled"]),
                     unlabelled=tuple(splits["unlabelled"]), test=tuple(splits["test"]))
