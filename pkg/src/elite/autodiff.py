"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. Ops build :class:`Node` objects that remember
their parents and a closure that pushes the output gradient back to them.
:func:`backward` walks the graph in reverse topological order.

Only row-vector bias broadcasting (and its multiplicative twin,
:func:`scale_cols`) is supported; everything else requires matching shapes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError


class Node:
    """A value in the graph plus its accumulated gradient."""

    empty = False

    def __init__(self, value, parents=(), op="leaf", requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"expected a 2-D value, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def param(value) -> Node:
    """A trainable leaf."""
    return Node(value, requires_grad=True)


def const(value) -> Node:
    return Node(value)


def _make(value, parents, op, backward_fn):
    out = Node(value, parents, op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _acc(node, g):
    if node.requires_grad:
        node.grad += g


# --------------------------------------------------------------------------
# ops


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), "matmul", bw)


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), "transpose", lambda g: _acc(a, g.T))


def relu(a: Node) -> Node:
    on = a.value > 0

    def bw(g):
        _acc(a, g * on)

    return _make(np.where(on, a.value, 0.0), (a,), "relu", bw)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"add {a.shape} + {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.value + b.value, (a, b), "add", bw)


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"sub {a.shape} - {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.value - b.value, (a, b), "sub", bw)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product."""
    if a.shape != b.shape:
        raise DimensionError(f"mul {a.shape} * {b.shape}")

    def bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return _make(a.value * b.value, (a, b), "mul", bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), "scale", lambda g: _acc(a, g * c))


def add_bias(a: Node, b_row: Node) -> Node:
    if b_row.shape != (1, a.shape[1]):
        raise DimensionError(f"bias {b_row.shape} for input {a.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b_row, g.sum(axis=0, keepdims=True))

    return _make(a.value + b_row.value, (a, b_row), "add_bias", bw)


def scale_cols(a: Node, s_row: Node) -> Node:
    """Multiply column ``k`` of ``a`` by ``s_row[0, k]``."""
    if s_row.shape != (1, a.shape[1]):
        raise DimensionError(f"column scale {s_row.shape} for input {a.shape}")

    def bw(g):
        _acc(a, g * s_row.value)
        _acc(s_row, (g * a.value).sum(axis=0, keepdims=True))

    return _make(a.value * s_row.value, (a, s_row), "scale_cols", bw)


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise DimensionError("concat_cols of nothing")
    rows = nodes[0].shape[0]
    if any(n.shape[0] != rows for n in nodes):
        raise DimensionError("concat_cols row counts differ")
    edges = np.cumsum([0] + [n.shape[1] for n in nodes])

    def bw(g):
        for n, lo, hi in zip(nodes, edges[:-1], edges[1:]):
            _acc(n, g[:, lo:hi])

    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes, "concat_cols", bw)


def _check_index(index, n):
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return index


def gather_rows(a: Node, index) -> Node:
    index = _check_index(index, a.shape[0])
    n_src = a.shape[0]

    def bw(g):
        _acc(a, kernels.scatter_add_rows(g, index, n_src))

    return _make(a.value[index], (a,), "gather_rows", bw)


def group_mean_rows(a: Node, groups, n_groups: int | None = None) -> Node:
    """Average the rows of ``a`` that share a group id."""
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    if groups.shape[0] != a.shape[0]:
        raise DimensionError("one group id per row required")
    if n_groups is None:
        n_groups = int(groups.max()) + 1 if groups.size else 0
    groups = _check_index(groups, n_groups)
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    safe = np.where(counts > 0, counts, 1.0)[:, None]
    value = kernels.scatter_add_rows(a.value, groups, n_groups) / safe

    def bw(g):
        _acc(a, (g / safe)[groups])

    return _make(value, (a,), "group_mean_rows", bw)


def softmax_rows(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _acc(a, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, (a,), "softmax_rows", bw)


def sum_all(a: Node) -> Node:
    return _make(np.array([[a.value.sum()]]), (a,), "sum_all", lambda g: _acc(a, np.full(a.shape, g[0, 0])))


def add_scalars(nodes: Sequence[Node], weights: Sequence[float] | None = None) -> Node:
    """Weighted sum of 1x1 nodes, accumulated left to right."""
    nodes = list(nodes)
    if weights is None:
        weights = [1.0] * len(nodes)
    weights = [float(w) for w in weights]
    total = 0.0
    for n, w in zip(nodes, weights):
        if n.shape != (1, 1):
            raise DimensionError("add_scalars expects 1x1 nodes")
        total += w * n.value[0, 0]

    def bw(g):
        for n, w in zip(nodes, weights):
            _acc(n, g * w)

    return _make(np.array([[total]]), nodes, "add_scalars", bw)


# --------------------------------------------------------------------------
# backward pass


def _topo(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Fill ``grad`` of every node reachable from ``root`` with d root / d node.

    Gradients are reset first, so calling this twice does not accumulate.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar root, got {root.shape}")
    order = _topo(root)
    for n in order:
        n.grad = np.zeros_like(n.value)
    root.grad[0, 0] = 1.0
    for n in reversed(order):
        if n._backward is not None:
            n._backward(n.grad)


def grad_check(
    loss_fn: Callable[[], Node],
    params: Sequence[Node],
    eps: float = 1e-5,
    n_samples: int = 50,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current values of ``params``.
    Coordinates are sampled uniformly over all parameter entries.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise NumericError("loss is not finite")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for f in np.sort(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[k])
        v = params[k].value.reshape(-1)
        old = v[j]
        v[j] = old + eps
        up = loss_fn().item()
        v[j] = old - eps
        down = loss_fn().item()
        v[j] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss is not finite under perturbation")
        numeric = (up - down) / (2 * eps)
        a = analytic[k].reshape(-1)[j]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
