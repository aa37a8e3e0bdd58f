"""Reverse-mode automatic differentiation over float64 scalars, vectors, and matrices.

Forward values are computed eagerly. Every operation records a closure that
pushes the output gradient to its parents, micrograd style, except that the
unit of data is a dense numpy array rather than a python float. backward()
topologically sorts the retained tape and visits each node exactly once, so
repeated calls on the same root produce bit-identical gradients.

Only scalar roots can be differentiated. Nodes marked constant never
accumulate gradient; everything else gets a fresh zero buffer at the start of
each backward pass.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GraphError(ValueError):
    """Base error for malformed graph operations."""


class ShapeMismatch(GraphError):
    """Operand shapes do not conform for the requested op."""


class DomainError(GraphError):
    """Operand value outside the mathematical domain of the op (log of 0, ...)."""


class NonFiniteError(GraphError):
    """A forward evaluation produced nan or inf."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class Node:
    __slots__ = ("value", "grad", "op", "parents", "constant", "_push")

    def __init__(self, value, parents=(), op="leaf", constant=False, push=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeMismatch(f"{op}: rank-{arr.ndim} values are not supported")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents: tuple[Node, ...] = tuple(parents)
        self.constant = bool(constant)
        self._push: Callable[[np.ndarray], None] | None = push

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, constant={self.constant})"


def leaf(value) -> Node:
    """Differentiable input node."""
    return Node(value, op="leaf")


def constant(value) -> Node:
    """Input node that never accumulates gradient."""
    return Node(value, op="const", constant=True)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.constant or node.grad is None:
        return
    if node.shape == () and np.ndim(g) > 0:
        g = g.sum()
    node.grad += g


def _binary_shapes(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def add(a: Node, b: Node) -> Node:
    _binary_shapes("add", a, b)
    out = Node(a.value + b.value, (a, b), "add")

    def push(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._push = push
    return out


def sub(a: Node, b: Node) -> Node:
    _binary_shapes("sub", a, b)
    out = Node(a.value - b.value, (a, b), "sub")

    def push(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    out._push = push
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; either side may be a scalar."""
    _binary_shapes("mul", a, b)
    out = Node(a.value * b.value, (a, b), "mul")

    def push(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._push = push
    return out


def scale(a: Node, c: float) -> Node:
    """Multiply by a python constant."""
    c = float(c)
    out = Node(a.value * c, (a,), "scale")

    def push(g):
        _accumulate(a, g * c)

    out._push = push
    return out


def matvec(m: Node, v: Node) -> Node:
    if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"matvec: shapes {m.shape} and {v.shape} do not conform")
    out = Node(m.value @ v.value, (m, v), "matvec")

    def push(g):
        _accumulate(m, np.outer(g, v.value))
        _accumulate(v, m.value.T @ g)

    out._push = push
    return out


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def push(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._push = push
    return out


def transpose(m: Node) -> Node:
    if m.value.ndim != 2:
        raise ShapeMismatch(f"transpose: expected a matrix, got shape {m.shape}")
    out = Node(m.value.T, (m,), "transpose")

    def push(g):
        _accumulate(m, g.T)

    out._push = push
    return out


def row(m: Node, i: int) -> Node:
    if m.value.ndim != 2:
        raise ShapeMismatch(f"row: expected a matrix, got shape {m.shape}")
    if not 0 <= i < m.shape[0]:
        raise GraphError(f"row: index {i} out of range for shape {m.shape}")
    out = Node(m.value[i].copy(), (m,), "row")

    def push(g):
        buf = np.zeros_like(m.value)
        buf[i] = g
        _accumulate(m, buf)

    out._push = push
    return out


def dot(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or b.value.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot: shapes {a.shape} and {b.shape} do not conform")
    out = Node(a.value @ b.value, (a, b), "dot")

    def push(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._push = push
    return out


def exp(a: Node) -> Node:
    val = np.exp(a.value)
    out = Node(val, (a,), "exp")

    def push(g):
        _accumulate(a, g * val)

    out._push = push
    return out


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise DomainError("log: operand has non-positive entries")
    out = Node(np.log(a.value), (a,), "log")

    def push(g):
        _accumulate(a, g / a.value)

    out._push = push
    return out


def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so neither branch exponentiates a large positive number
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Node(val, (a,), "sigmoid")

    def push(g):
        _accumulate(a, g * val * (1.0 - val))

    out._push = push
    return out


def relu(a: Node) -> Node:
    out = Node(np.maximum(a.value, 0.0), (a,), "relu")

    def push(g):
        _accumulate(a, g * (a.value > 0.0))

    out._push = push
    return out


def vsum(a: Node) -> Node:
    """Sum of all entries, yielding a scalar."""
    out = Node(a.value.sum(), (a,), "sum")

    def push(g):
        _accumulate(a, np.full(a.shape, float(g)))

    out._push = push
    return out


def norm2(a: Node) -> Node:
    """Euclidean norm of all entries, yielding a scalar."""
    val = float(np.sqrt((a.value ** 2).sum()))
    out = Node(val, (a,), "norm2")

    def push(g):
        if val == 0.0:
            raise DomainError("norm2: gradient undefined at the zero vector")
        _accumulate(a, (float(g) / val) * a.value)

    out._push = push
    return out


def concat(parts: Sequence[Node]) -> Node:
    parts = tuple(parts)
    if not parts:
        raise GraphError("concat: needs at least one part")
    pieces = []
    for p in parts:
        if p.value.ndim > 1:
            raise ShapeMismatch(f"concat: parts must be scalars or vectors, got {p.shape}")
        pieces.append(np.atleast_1d(p.value))
    sizes = [piece.shape[0] for piece in pieces]
    offsets = np.cumsum([0] + sizes)
    out = Node(np.concatenate(pieces), parts, "concat")

    def push(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = g[lo:hi]
            _accumulate(p, piece[0] if p.shape == () else piece)

    out._push = push
    return out


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(root: Node) -> None:
    """Populate .grad for every non-constant node reachable from the scalar root."""
    if root.shape != ():
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.constant:
        return
    order = _toposort(root)
    for node in order:
        if not node.constant:
            node.grad = np.zeros(node.shape)
    root.grad = np.ones(())
    for node in reversed(order):
        if node._push is not None:
            node._push(node.grad)


def finite_diff_check(fn: Callable[[Node], Node], point, step: float = 1e-5) -> float:
    """Compare analytic gradients of fn against central finite differences.

    fn takes a single vector leaf and returns a scalar node. The result is the
    max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0.0:
        raise GraphError("finite_diff_check: step must be positive")
    pt = np.asarray(point, dtype=np.float64)
    if pt.ndim != 1:
        raise ShapeMismatch("finite_diff_check: point must be a flat vector")

    x = leaf(pt.copy())
    out = fn(x)
    if out.shape != ():
        raise GraphError("finite_diff_check: fn must return a scalar node")
    if not np.isfinite(out.value):
        raise NonFiniteError("finite_diff_check: fn value is not finite at the base point")
    backward(out)
    analytic = np.zeros_like(pt) if x.grad is None else x.grad.copy()

    numeric = np.empty_like(pt)
    for i in range(pt.shape[0]):
        values = []
        for sign in (1.0, -1.0):
            shifted = pt.copy()
            shifted[i] += sign * step
            v = float(fn(leaf(shifted)).value)
            if not np.isfinite(v):
                raise NonFiniteError(
                    f"finite_diff_check: non-finite value at coordinate {i}", coordinate=i)
            values.append(v)
        numeric[i] = (values[0] - values[1]) / (2.0 * step)

    if pt.shape[0] == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
