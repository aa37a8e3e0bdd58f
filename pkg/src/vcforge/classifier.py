"""Bias-free linear classifier head and the losses defined on raw logits.

Logits are produced as inner products between a feature vector and per-class
weight vectors; there is no bias term anywhere. Losses are built on diffcore
nodes so gradients flow to both the feature and the weights. Masking is
implemented with constant selection matrices: an ignored index is never part
of the surviving computation, so its probability is exactly zero and the
gradient of any downstream scalar with respect to it is exactly zero, not
merely small.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node


class ClassifierError(ValueError):
    pass


@dataclass
class ClassifierWeights:
    """Per-class weight vectors, one row per class, no bias."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ClassifierError("weights must be a (num_classes, feature_dim) matrix")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(norms == 0.0):
            raise ClassifierError("every class weight vector must have nonzero norm")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1]

    def min_norm(self) -> float:
        return float(np.linalg.norm(self.matrix, axis=1).min())


@dataclass(frozen=True)
class IgnoreMask:
    """Set of logit indices excluded from a masked computation."""

    ignored: frozenset = field(default_factory=frozenset)

    def validate(self, length: int) -> None:
        for i in self.ignored:
            if not 0 <= int(i) < length:
                raise ClassifierError(f"ignored index {i} out of range for length {length}")
        if len(self.ignored) >= length:
            raise ClassifierError("mask may not ignore every index")


def _as_weight_node(weights) -> Node:
    if isinstance(weights, Node):
        return weights
    if isinstance(weights, ClassifierWeights):
        return dc.constant(weights.matrix)
    return dc.constant(np.asarray(weights, dtype=np.float64))


def _as_feature_node(f) -> Node:
    return f if isinstance(f, Node) else dc.constant(np.asarray(f, dtype=np.float64))


def forward_logits(f, weights) -> Node:
    """Logit vector w_i . f for every class i."""
    return dc.matvec(_as_weight_node(weights), _as_feature_node(f))


def selection_matrix(kept: list[int], length: int) -> np.ndarray:
    """Rows of the identity picking out `kept` positions, in the given order."""
    s = np.zeros((len(kept), length))
    for r, i in enumerate(kept):
        s[r, i] = 1.0
    return s


def logsumexp(v: Node) -> Node:
    """log sum exp of a logit vector, with max subtraction for stability.

    The subtracted max is treated as a constant; the gradient of
    m + log sum exp(v - m) in v is the softmax regardless of the shift, so
    this is exact, not an approximation.
    """
    if v.value.ndim != 1 or v.shape[0] == 0:
        raise ClassifierError("logsumexp expects a nonempty vector")
    m = float(v.value.max())
    shifted = dc.sub(v, dc.constant(m))
    return dc.add(dc.log(dc.vsum(dc.exp(shifted))), dc.constant(m))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis, for inference paths."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss(logits: Node, label: int) -> Node:
    """Cross entropy written as log sum_i exp(l_i - l_label)."""
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise ClassifierError(f"label {label} out of range for {n} logits")
    onehot = np.zeros(n)
    onehot[label] = 1.0
    picked = dc.dot(logits, dc.constant(onehot))
    return dc.sub(logsumexp(logits), picked)


def masked_softmax(logits: Node, mask: IgnoreMask | frozenset | set) -> tuple[Node, np.ndarray]:
    """Softmax over the unignored indices.

    Returns the full-length probability vector (exact zeros at ignored
    positions, which also receive exactly zero gradient) together with the
    applied 0/1 keep mask.
    """
    if not isinstance(mask, IgnoreMask):
        mask = IgnoreMask(frozenset(int(i) for i in mask))
    n = logits.shape[0]
    mask.validate(n)
    kept = [i for i in range(n) if i not in mask.ignored]
    sel = selection_matrix(kept, n)
    picked = dc.matvec(dc.constant(sel), logits)
    m = float(picked.value.max())
    e = dc.exp(dc.sub(picked, dc.constant(m)))
    total = dc.vsum(e)
    inv_total = dc.exp(dc.scale(dc.log(total), -1.0))
    probs_kept = dc.mul(e, inv_total)
    probs_full = dc.matvec(dc.constant(sel.T), probs_kept)
    keep01 = np.zeros(n)
    keep01[kept] = 1.0
    return probs_full, keep01


def mse_targets_loss(logits: Node, targets, mask: IgnoreMask | frozenset | set = frozenset()) -> Node:
    """Sum of (sigmoid(l_i) - t_i)^2 over unignored indices, binary targets."""
    if not isinstance(mask, IgnoreMask):
        mask = IgnoreMask(frozenset(int(i) for i in mask))
    targets = np.asarray(targets, dtype=np.float64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ClassifierError(f"targets shape {targets.shape} does not match {n} logits")
    if not np.all(np.isin(targets, (0.0, 1.0))):
        raise ClassifierError("targets must be binary")
    mask.validate(n)
    kept = [i for i in range(n) if i not in mask.ignored]
    sel = selection_matrix(kept, n)
    picked = dc.matvec(dc.constant(sel), logits)
    diff = dc.sub(dc.sigmoid(picked), dc.constant(targets[kept]))
    return dc.vsum(dc.mul(diff, diff))
