"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is a tape. Leaves are registered with :meth:`Graph.leaf`
(parameters, inputs that need gradients) or :meth:`Graph.constant`; every op
appends one record, so the record list is topologically ordered by
construction. :func:`backward` walks the records in exact reverse order.

Only the operations the multi-task network and its losses need are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """A tensor is used with a graph it does not belong to."""


class Tensor:
    """Dense array node. ``node_id`` is None for constants."""

    __slots__ = ("values", "grad", "node_id", "graph")

    def __init__(self, values, node_id: int | None = None, graph: "Graph | None" = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # arithmetic sugar, used mostly by tests and loss assembly
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    records: list[OpRecord] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _next_id: int = 0

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, values) -> Tensor:
        t = Tensor(values, self._new_id(), self)
        self.leaves[t.node_id] = t
        return t

    def constant(self, values) -> Tensor:
        return Tensor(values)

    def record(self, kind, inputs, out_values, backward_fn) -> Tensor:
        out = Tensor(out_values, self._new_id(), self)
        self.records.append(OpRecord(kind, tuple(inputs), out.node_id, backward_fn))
        return out


def _graph_of(*tensors: Tensor) -> Graph:
    graph = None
    for t in tensors:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError("operands belong to different graphs")
    if graph is None:
        # constants only; a private tape keeps the op differentiable-shaped
        graph = Graph()
    return graph


def backward(graph: Graph, seed: Tensor, wrt: Sequence[Tensor] | None = None,
             seed_grad: float = 1.0) -> dict[int, np.ndarray]:
    """Reverse sweep from the scalar ``seed``.

    Returns a map ``node_id -> gradient`` covering every leaf (zeros when the
    leaf does not reach ``seed``) and every intermediate node touched. Leaf
    ``.grad`` buffers are overwritten.

    With ``wrt`` given, only those leaves are filled and the sweep stops as
    soon as no remaining record can feed them.
    """
    if seed.graph is not graph or seed.node_id is None:
        raise GraphError("seed is not a node of this graph")
    if seed.values.size != 1:
        raise DimensionError(f"seed must be scalar, got shape {seed.shape}")

    grads: dict[int, np.ndarray] = {seed.node_id: np.full(seed.shape, seed_grad)}
    stop_below = -1
    if wrt is not None:
        for t in wrt:
            if t.graph is not graph:
                raise GraphError("wrt tensor is not in this graph")
        stop_below = min(t.node_id for t in wrt)

    for rec in reversed(graph.records):
        if rec.output_id < stop_below:
            break
        g_out = grads.get(rec.output_id)
        if g_out is None:
            continue
        in_grads = rec.backward_fn(g_out)
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or inp.node_id is None:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = g if prev is None else prev + g

    targets = wrt if wrt is not None else list(graph.leaves.values())
    for leaf in targets:
        g = grads.get(leaf.node_id)
        if g is None:
            g = np.zeros(leaf.shape)
            grads[leaf.node_id] = g
        leaf.grad = g
    return grads


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.values, b.values

    def bw(g):
        return g @ bv.T, av.T @ g

    return _graph_of(a, b).record("matmul", (a, b), av @ bv, bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast ``x[b, n] + bias[n]``."""
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias shapes {x.shape} and {bias.shape} do not align")

    def bw(g):
        return g, g.sum(axis=0)

    return _graph_of(x, bias).record("add_bias", (x, bias), x.values + bias.values, bw)


def relu(x: Tensor) -> Tensor:
    on = x.values > 0.0

    def bw(g):
        return (g * on,)

    return _graph_of(x).record("relu", (x,), np.where(on, x.values, 0.0), bw)


def softmax_xent(logits: Tensor, targets) -> Tensor:
    """Unreduced cross entropy: one loss per row of ``logits``."""
    if logits.values.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int_)
    n_rows, n_classes = logits.shape
    if targets.shape != (n_rows,):
        raise DimensionError(f"targets shape {targets.shape} vs {n_rows} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target index outside [0, {n_classes})")
    loss, probs = _kernels.softmax_xent_forward(logits.values, targets)

    def bw(g):
        return (_kernels.softmax_xent_backward(probs, targets, g),)

    return _graph_of(logits).record("softmax_xent", (logits,), loss, bw)


def l2sq(u: Tensor, v: Tensor) -> Tensor:
    """Squared Euclidean distance between two vectors."""
    if u.shape != v.shape or u.values.ndim != 1:
        raise DimensionError(f"l2sq needs equal 1-d shapes, got {u.shape} and {v.shape}")
    diff = u.values - v.values

    def bw(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _graph_of(u, v).record("l2sq", (u, v), np.array(diff @ diff), bw)


def normalize_rows(x: Tensor) -> Tensor:
    y, norms = _kernels.normalize_rows_forward(x.values)

    def bw(g):
        return (_kernels.normalize_rows_backward(y, norms, g),)

    return _graph_of(x).record("normalize_rows", (x,), y, bw)


def grad_reverse(x: Tensor, strength: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-strength``."""

    def bw(g):
        return (-strength * g,)

    return _graph_of(x).record("grad_reverse", (x,), x.values.copy(), bw)


def triplet_hinge(emb: Tensor, anchor, positive, negative, margin: float) -> Tensor:
    """Mean over triplets of ``max(0, |a-p|^2 - |a-n|^2 + margin)``."""
    anchor = np.asarray(anchor, dtype=np.int_)
    positive = np.asarray(positive, dtype=np.int_)
    negative = np.asarray(negative, dtype=np.int_)
    if len(anchor) == 0:
        return _graph_of(emb).record("triplet_hinge", (emb,), np.array(0.0),
                                     lambda g: (np.zeros(emb.shape),))
    n_rows = emb.shape[0]
    for idx in (anchor, positive, negative):
        if idx.min() < 0 or idx.max() >= n_rows:
            raise IndexError("triplet index outside the embedding batch")
    loss, active = _kernels.triplet_forward(emb.values, anchor, positive, negative, margin)
    ev = emb.values

    def bw(g):
        return (_kernels.triplet_backward(ev, anchor, positive, negative, active, float(g)),)

    return _graph_of(emb).record("triplet_hinge", (emb,), np.array(loss), bw)


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors as the columns of a ``b x t`` matrix."""
    n = columns[0].shape
    for c in columns:
        if c.shape != n or c.values.ndim != 1:
            raise DimensionError(f"columns must be equal-length vectors, got {c.shape}")

    def bw(g):
        return tuple(g[:, j] for j in range(g.shape[1]))

    out = np.stack([c.values for c in columns], axis=1)
    return _graph_of(*columns).record("stack_columns", tuple(columns), out, bw)


def masked_column_reduce(x: Tensor, mask: np.ndarray, reduction: str = "mean") -> Tensor:
    """Per-column sum (or mean over valid cells) of ``x * mask``.

    Masked cells are multiplied by exact zeros, so they influence neither the
    result nor any gradient. Columns with no valid cell reduce to 0.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape or x.values.ndim != 2:
        raise DimensionError(f"mask shape {mask.shape} vs loss matrix {x.shape}")
    if reduction == "mean":
        counts = mask.sum(axis=0)
        denom = np.where(counts > 0, counts, 1.0)
    elif reduction == "sum":
        denom = np.ones(mask.shape[1])
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    safe = np.where(mask > 0, x.values, 0.0)
    out = (safe * mask).sum(axis=0) / denom

    def bw(g):
        return (mask * (g / denom)[None, :],)

    return _graph_of(x).record("masked_column_reduce", (x,), out, bw)


def dot_const(x: Tensor, weights) -> Tensor:
    """``sum_i weights[i] * x[i]`` with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionError(f"weights shape {w.shape} vs {x.shape}")

    def bw(g):
        return (g * w,)

    return _graph_of(x).record("dot_const", (x,), np.array((w * x.values).sum()), bw)


def index(x: Tensor, i: int) -> Tensor:
    """Scalar element ``x[i]`` of a vector."""

    def bw(g):
        out = np.zeros(x.shape)
        out[i] = g
        return (out,)

    return _graph_of(x).record("index", (x,), np.array(x.values[i]), bw)


def take_rows(x: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int_)

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, rows, g)
        return (out,)

    return _graph_of(x).record("take_rows", (x,), x.values[rows], bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} and {b.shape} differ")
    return _graph_of(a, b).record("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} and {b.shape} differ")
    return _graph_of(a, b).record("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values
    return _graph_of(a, b).record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    return _graph_of(x).record("scale", (x,), c * x.values, lambda g: (c * g,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries."""
    return _graph_of(x).record("sum", (x,), np.array(x.values.sum()),
                               lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    return _graph_of(x).record("mean", (x,), np.array(x.values.mean()),
                               lambda g: (np.full(x.shape, float(g) / n),))
