"""Potential-category discovery policies.

A policy looks at one or two prediction views of the same unit and emits the
set of classes the unit could plausibly be. Pixel-level policies work on
probability vectors or hard labels; box-level policies first align the two
prediction sets by greedy IoU matching and then compare classes pairwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxgeom import BBox, BoxPrediction, iou
from .vclearn import PotentialCategorySet


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class UnitPrediction:
    """One model's view of one unit."""

    unit_id: int
    probs: np.ndarray | None = None
    cls: int | None = None
    confidence: float | None = None


@dataclass(frozen=True)
class PolicyConfig:
    """Which discovery policy runs, and on which confidence band.

    For unit classification the trusted band (confidence above t) is verified
    by teacher-student mutual agreement and the retained band (between t_low
    and t) falls back to top-2 probabilities; applies_to narrows that routing
    to a single band. Box tasks use temporal or cross-model comparison and
    ignore applies_to.
    """

    policy: str = "mutual"
    iou_threshold: float = 0.5
    applies_to: str = "both"

    def __post_init__(self):
        if self.policy not in ("top2", "mutual", "temporal", "cross"):
            raise PolicyError(f"unknown policy {self.policy!r}")
        if self.applies_to not in ("trusted", "retained", "both"):
            raise PolicyError(f"unknown band selector {self.applies_to!r}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise PolicyError("iou_threshold must lie in (0, 1]")


def pcset_top2(probs) -> PotentialCategorySet:
    """The two most probable classes; ties resolve to the lowest index."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 2:
        raise PolicyError("top-2 needs at least two class probabilities")
    order = np.argsort(-probs, kind="stable")
    return PotentialCategorySet(frozenset((int(order[0]), int(order[1]))), "top2")


def pcset_mutual(y_teacher: int, y_student: int) -> PotentialCategorySet:
    """Singleton on agreement, the pair of labels on disagreement."""
    return PotentialCategorySet(frozenset((int(y_teacher), int(y_student))), "mutual")


@dataclass(frozen=True)
class BoxMatch:
    box_a: BoxPrediction
    box_b: BoxPrediction
    index_a: int
    index_b: int
    iou: float


def match_boxes(boxes_a: Sequence[BoxPrediction], boxes_b: Sequence[BoxPrediction],
                iou_threshold: float = 0.5):
    """Greedy one-to-one matching by descending IoU.

    Pairs below the threshold never match. Returns the matches plus the
    leftover boxes of each side. Candidate order is made deterministic by
    breaking IoU ties on (index_a, index_b).
    """
    candidates = []
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            v = iou(a.bbox, b.bbox)
            if v >= iou_threshold:
                candidates.append((v, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches: list[BoxMatch] = []
    for v, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append(BoxMatch(boxes_a[i], boxes_b[j], i, j, v))
    unmatched_a = [boxes_a[i] for i in range(len(boxes_a)) if i not in used_a]
    unmatched_b = [boxes_b[j] for j in range(len(boxes_b)) if j not in used_b]
    return matches, unmatched_a, unmatched_b


def pcset_pairwise_boxes(matches: Sequence[BoxMatch],
                         unmatched_a: Sequence[BoxPrediction],
                         unmatched_b: Sequence[BoxPrediction],
                         bg_index: int,
                         source: str = "pairwise"):
    """PC sets from an aligned pair of box prediction sets.

    A matched pair with equal classes is unambiguous; differing classes give
    the two-class set; a box with no counterpart might be background, so it
    gets {its class, bg}. Matched entries are anchored at the first set's box.
    """
    out: list[tuple[BoxPrediction, PotentialCategorySet]] = []
    for m in matches:
        if m.box_a.cls == m.box_b.cls:
            pc = PotentialCategorySet(frozenset([m.box_a.cls]), source)
        else:
            pc = PotentialCategorySet(frozenset([m.box_a.cls, m.box_b.cls]), source)
        out.append((m.box_a, pc))
    for box in list(unmatched_a) + list(unmatched_b):
        if box.cls == bg_index:
            pc = PotentialCategorySet(frozenset([box.cls]), source)
        else:
            pc = PotentialCategorySet(frozenset([box.cls, bg_index]), source)
        out.append((box, pc))
    return out


def pcset_temporal(pred_current: Sequence[BoxPrediction],
                   pred_last: Sequence[BoxPrediction] | None,
                   bg_index: int,
                   iou_threshold: float = 0.5):
    """Compare this visit's predictions with the ones stored at the last visit.

    On the first visit there is nothing to compare against, so every current
    box gets a singleton PC set and virtual-category training stays inactive.
    """
    if pred_last is None:
        return [(box, PotentialCategorySet(frozenset([box.cls]), "temporal"))
                for box in pred_current]
    matches, unmatched_cur, unmatched_last = match_boxes(pred_current, pred_last, iou_threshold)
    return pcset_pairwise_boxes(matches, unmatched_cur, unmatched_last, bg_index,
                                source="temporal")


def pcset_crossmodel(pred_model_a: Sequence[BoxPrediction],
                     pred_model_b: Sequence[BoxPrediction],
                     bg_index: int,
                     iou_threshold: float = 0.5):
    """Compare two independently trained models' predictions on the same input."""
    matches, unmatched_a, unmatched_b = match_boxes(pred_model_a, pred_model_b, iou_threshold)
    return pcset_pairwise_boxes(matches, unmatched_a, unmatched_b, bg_index, source="cross")


def pcset_crossmodel_unit(cls_model_a: int, cls_model_b: int) -> PotentialCategorySet:
    """Unit-level cross-model check; same semantics as mutual verification."""
    pc = pcset_mutual(cls_model_a, cls_model_b)
    return PotentialCategorySet(pc.classes, "cross")
