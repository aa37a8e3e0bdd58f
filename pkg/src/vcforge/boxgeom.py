"""Axis-aligned box geometry and the decoupled box-regression objective.

Boundary quality is judged per axis: a pseudo box earns its horizontal flag
only when both left and right edges sit within a fraction t_loc of its width
from the nearby reference box, and likewise vertically with heights. The
regression loss then trains x and w only under the horizontal flag and y and
h only under the vertical flag, so one well-localised axis is not discarded
because the other one drifted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Corner-form box (x1, y1, x2, y2) with strictly positive extent."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise BoxError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def center_form(self) -> np.ndarray:
        """(cx, cy, w, h)"""
        return np.array([(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0,
                         self.width, self.height])

    @classmethod
    def from_center_form(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


@dataclass(frozen=True)
class QualityFlags:
    """Per-axis regression gates."""

    q_hor: bool
    q_ver: bool


@dataclass(frozen=True)
class BoxPrediction:
    """A predicted or pseudo-labelled box with its class and confidence.

    uid optionally ties the prediction back to the unit it was made for.
    """

    bbox: BBox
    cls: int
    confidence: float = 1.0
    flags: QualityFlags | None = None
    uid: int | None = None


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boundary_quality(box: BBox, nearby: BBox, t_loc: float = 0.05) -> QualityFlags:
    """Per-axis agreement between a pseudo box and its nearby reference box.

    Horizontal: both |x1 - x1'| / w and |x2 - x2'| / w must fall strictly
    below t_loc, with w the width of `box`. Vertical mirrors it with heights.
    """
    if t_loc <= 0.0:
        raise BoxError("t_loc must be positive")
    q_hor = (abs(box.x1 - nearby.x1) / box.width < t_loc
             and abs(box.x2 - nearby.x2) / box.width < t_loc)
    q_ver = (abs(box.y1 - nearby.y1) / box.height < t_loc
             and abs(box.y2 - nearby.y2) / box.height < t_loc)
    return QualityFlags(q_hor=q_hor, q_ver=q_ver)


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside."""
    x = float(x)
    if abs(x) < 1.0:
        return 0.5 * x * x
    return abs(x) - 0.5


def _smooth_l1_node(d: Node) -> Node:
    # piecewise form chosen by the forward value, as usual for eager tape autodiff
    v = float(d.value)
    if abs(v) < 1.0:
        return dc.scale(dc.mul(d, d), 0.5)
    if v >= 0.0:
        return dc.sub(d, dc.constant(0.5))
    return dc.sub(dc.scale(d, -1.0), dc.constant(0.5))


def reg_star_loss(pred: Node, target, flags: QualityFlags) -> Node:
    """Flag-gated smooth-L1 over (x, y, w, h) regression values.

    x and w contribute only when q_hor is set, y and h only when q_ver is.
    With both flags down the result is a constant zero with no gradient path.
    """
    if pred.shape != (4,):
        raise BoxError(f"reg_star_loss expects 4 regression values, got shape {pred.shape}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (4,):
        raise BoxError("target must hold 4 regression values")
    gates = (flags.q_hor, flags.q_ver, flags.q_hor, flags.q_ver)
    total = None
    for i, gate in enumerate(gates):
        if not gate:
            continue
        onehot = np.zeros(4)
        onehot[i] = 1.0
        d = dc.sub(dc.dot(pred, dc.constant(onehot)), dc.constant(target[i]))
        term = _smooth_l1_node(d)
        total = term if total is None else dc.add(total, term)
    if total is None:
        return dc.constant(0.0)
    return total
