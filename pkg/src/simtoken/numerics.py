"""Tensors, a small reverse-mode autodiff graph, and a finite-difference checker.

Tensors are plain ``float64`` numpy arrays. A :class:`Graph` records every op
applied to its nodes in append order, which is already a topological order,
so ``backward`` is a single reverse sweep.

Broadcasting is deliberately absent: binary elementwise ops require equal
shapes, except that an operand of size one acts as a scalar. Row-vector bias
addition is the explicit ``add_row`` op.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def tensor(data, checked: bool = True) -> np.ndarray:
    """Coerce ``data`` into a float64 array, rejecting NaN/Inf when checked."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim > 0 and 0 in arr.shape:
        raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "trainable", "name", "_backward")

    def __init__(self, id, op, inputs, value, backward=None, trainable=False, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.trainable = trainable
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _unbroadcast(g, shape):
    # Only the scalar-by-tensor case exists.
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if len(shape) else np.array(g.sum())


def _norm_axis(op, x, axis):
    nd = x.value.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.value.shape}")
    return axis % nd


class Graph:
    """Append-only computation graph.

    Leaves come from :meth:`param` (trainable) and :meth:`const`. Every other
    method appends one node and returns it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()
        self.counts: dict[str, int] = {}

    def _push(self, op, inputs, value, backward=None, trainable=False, name=None):
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), value, backward, trainable, name)
        self.nodes.append(node)
        self.counts[op] = self.counts.get(op, 0) + 1
        return node

    # leaves

    def param(self, value, name=None) -> Node:
        node = self._push("param", (), np.asarray(value, dtype=np.float64), trainable=True, name=name)
        self.parameters.add(node.id)
        return node

    def const(self, value, name=None) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), name=name)

    # linear algebra

    def matmul(self, a: Node, b: Node) -> Node:
        """2-D matrix product ``(m, k) @ (k, n) -> (m, n)``."""
        A, B = a.value, b.value
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {A.shape} vs {B.shape}")

        def back(g):
            return g @ B.T, A.T @ g

        return self._push("matmul", (a, b), A @ B, back)

    def transpose(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise ShapeError(f"transpose: expected 2-D input, got {x.value.shape}")
        return self._push("transpose", (x,), x.value.T.copy(), lambda g: (g.T,))

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(shape)
        if math.prod(shape) != x.value.size:
            raise ShapeError(f"reshape: cannot view {x.value.shape} as {shape}")
        old = x.value.shape
        return self._push("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))

    # elementwise

    def add(self, a: Node, b: Node) -> Node:
        _same_shape("add", a, b)
        sa, sb = a.value.shape, b.value.shape
        return self._push("add", (a, b), a.value + b.value,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape("sub", a, b)
        sa, sb = a.value.shape, b.value.shape
        return self._push("sub", (a, b), a.value - b.value,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        _same_shape("mul", a, b)
        A, B = a.value, b.value
        return self._push("mul", (a, b), A * B,
                          lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))

    def div(self, a: Node, b: Node) -> Node:
        _same_shape("div", a, b)
        A, B = a.value, b.value
        return self._push("div", (a, b), A / B,
                          lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)))

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (x,), x.value * c, lambda g: (g * c,))

    def add_row(self, x: Node, row: Node) -> Node:
        """Add a vector of shape ``(n,)`` to every row of an ``(m, n)`` matrix."""
        X, r = x.value, row.value
        if X.ndim != 2 or r.shape != (X.shape[1],):
            raise ShapeError(f"add_row: shape mismatch {X.shape} vs {r.shape}")
        return self._push("add_row", (x, row), X + r, lambda g: (g, g.sum(axis=0)))

    def exp(self, x: Node) -> Node:
        y = np.exp(x.value)
        return self._push("exp", (x,), y, lambda g: (g * y,))

    def log(self, x: Node) -> Node:
        X = x.value
        if np.any(X <= 0):
            raise ValueError("log: non-positive input")
        return self._push("log", (x,), np.log(X), lambda g: (g / X,))

    def sigmoid(self, x: Node) -> Node:
        y = _sigmoid(x.value)
        return self._push("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))

    def softplus(self, x: Node) -> Node:
        """``log(1 + exp(x))``, stable for large ``|x|``."""
        X = x.value
        y = np.logaddexp(0.0, X)
        return self._push("softplus", (x,), y, lambda g: (g * _sigmoid(X),))

    def gelu(self, x: Node) -> Node:
        """Tanh approximation: ``0.5 x (1 + tanh(c (x + k x^3)))``."""
        X = x.value
        t = np.tanh(GELU_C * (X + GELU_K * (X * X * X)))
        y = 0.5 * X * (1.0 + t)

        def back(g):
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * X * X)
            return (g * (0.5 * (1.0 + t) + 0.5 * X * dt),)

        return self._push("gelu", (x,), y, back)

    # reductions and structure

    def sum(self, x: Node, axis=None) -> Node:
        X = x.value
        if axis is None:
            return self._push("sum", (x,), np.array(X.sum()), lambda g: (np.full(X.shape, float(g)),))
        ax = _norm_axis("sum", x, axis)
        return self._push("sum", (x,), X.sum(axis=ax),
                          lambda g: (np.broadcast_to(np.expand_dims(g, ax), X.shape).copy(),))

    def mean(self, x: Node, axis=None) -> Node:
        X = x.value
        if axis is None:
            n = X.size
            return self._push("mean", (x,), np.array(X.mean()), lambda g: (np.full(X.shape, float(g) / n),))
        ax = _norm_axis("mean", x, axis)
        n = X.shape[ax]
        return self._push("mean", (x,), X.mean(axis=ax),
                          lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, X.shape).copy(),))

    def concat(self, xs: Sequence[Node], axis=0) -> Node:
        xs = list(xs)
        if not xs:
            raise ShapeError("concat: no inputs")
        ax = _norm_axis("concat", xs[0], axis)
        ref = xs[0].value.shape
        for n in xs[1:]:
            s = n.value.shape
            if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise ShapeError(f"concat: shape mismatch {ref} vs {s} along axis {ax}")
        bounds = np.cumsum([n.value.shape[ax] for n in xs])[:-1]

        def back(g):
            return tuple(np.split(g, bounds, axis=ax))

        return self._push("concat", xs, np.concatenate([n.value for n in xs], axis=ax), back)

    def slice(self, x: Node, axis: int, start: int, stop: int) -> Node:
        X = x.value
        ax = _norm_axis("slice", x, axis)
        if not 0 <= start < stop <= X.shape[ax]:
            raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {X.shape} axis {ax}")
        idx = [slice(None)] * X.ndim
        idx[ax] = slice(start, stop)
        idx = tuple(idx)

        def back(g):
            out = np.zeros(X.shape)
            out[idx] = g
            return (out,)

        return self._push("slice", (x,), X[idx].copy(), back)

    def embedding(self, table: Node, ids) -> Node:
        """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
        W = table.value
        ids = np.asarray(ids, dtype=np.int64)
        if W.ndim != 2 or ids.ndim != 1:
            raise ShapeError(f"embedding: expected 2-D table and 1-D ids, got {W.shape} and {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= W.shape[0]):
            raise ShapeError(f"embedding: id out of range for table {W.shape}")

        def back(g):
            out = np.zeros(W.shape)
            np.add.at(out, ids, g)
            return (out,)

        return self._push("embedding", (table,), W[ids], back)

    # normalisations

    def softmax(self, x: Node) -> Node:
        y = _softmax(x.value)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._push("softmax", (x,), y, back)

    def log_softmax(self, x: Node) -> Node:
        X = x.value
        z = X - X.max(axis=-1, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(y)

        def back(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._push("log_softmax", (x,), y, back)

    def layer_norm(self, x: Node, gain: Node, bias: Node) -> Node:
        """Normalise over the last axis of an ``(m, n)`` input, then apply ``gain`` and ``bias``."""
        X, G, B = x.value, gain.value, bias.value
        n = X.shape[-1]
        if X.ndim != 2 or G.shape != (n,) or B.shape != (n,):
            raise ShapeError(f"layer_norm: shape mismatch {X.shape} vs {G.shape}, {B.shape}")
        mu = X.mean(axis=-1, keepdims=True)
        xc = X - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv

        def back(g):
            gx = g * G
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return self._push("layer_norm", (x, gain, bias), xhat * G + B, back)

    # backward

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Populate ``grad`` on every node and return gradients of trainable leaves.

        Nodes the loss does not depend on get zero gradients.
        """
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        nodes = self.nodes
        if not (0 <= loss.id < len(nodes)) or nodes[loss.id] is not loss:
            raise GraphError("backward: loss node does not belong to this graph")
        grads: list[np.ndarray | None] = [None] * len(nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for n in reversed(nodes[: loss.id + 1]):
            g = grads[n.id]
            if g is None or n._backward is None:
                continue
            for i, gi in zip(n.inputs, n._backward(g)):
                if i >= n.id:
                    raise GraphError(f"backward: cycle detected at node {n.id} ({n.op})")
                if grads[i] is None:
                    grads[i] = gi
                else:
                    grads[i] = grads[i] + gi
        for n, g in zip(nodes, grads):
            n.grad = np.zeros_like(n.value) if g is None else g
        return {i: nodes[i].grad for i in sorted(self.parameters)}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# gradient checking

@dataclass
class CheckReport:
    max_rel_error: float
    tolerance: float
    n_coords: int
    finite: bool = True
    worst_index: tuple = ()
    analytic: np.ndarray | None = field(default=None, repr=False)
    numeric: np.ndarray | None = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error <= self.tolerance


def grad_check(function: Callable[[Graph, Node], Node], point, step: float = 1e-6,
               tolerance: float = 1e-5, backward=None) -> CheckReport:
    """Compare reverse-mode gradients of ``function`` against central differences.

    ``function(graph, x)`` must build a scalar loss from the leaf ``x``. The
    per-coordinate step is ``step * max(1, |x_i|)`` and the relative error
    uses the denominator ``max(1, |analytic|, |numeric|)``. ``backward``
    overrides how analytic gradients are obtained (used to inject faults).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)

    def evaluate(x):
        g = Graph()
        xn = g.param(x)
        return g, xn, function(g, xn)

    g, xn, loss = evaluate(x0)
    finite = bool(np.isfinite(loss.value).all())
    if backward is None:
        analytic = g.backward(loss)[xn.id]
    else:
        analytic = backward(g, xn, loss)
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        h = step * max(1.0, abs(x0[idx]))
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp = float(evaluate(xp)[2].value)
        fm = float(evaluate(xm)[2].value)
        numeric[idx] = (fp - fm) / (2.0 * h)
    finite = finite and bool(np.isfinite(numeric).all() and np.isfinite(analytic).all())
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    if not finite:
        rel = np.where(np.isfinite(rel), rel, np.inf)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return CheckReport(float(rel.max()) if rel.size else 0.0, tolerance, int(x0.size), finite,
                       tuple(int(i) for i in worst), analytic, numeric)


# binary tensor files

MAGIC_F32 = b"STKTENS1"
MAGIC_F64 = b"STKTENS2"


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr, precision: int = 32) -> bytes:
    """Serialise ``arr``: magic, u32 rank, u32 dims, row-major little-endian floats."""
    arr = np.asarray(arr, dtype=np.float64)
    magic, dtype = (MAGIC_F32, "<f4") if precision == 32 else (MAGIC_F64, "<f8")
    head = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return ``(array, next_offset)``."""
    magic = bytes(buf[offset: offset + 8])
    if magic == MAGIC_F32:
        dtype, width = "<f4", 4
    elif magic == MAGIC_F64:
        dtype, width = "<f8", 8
    else:
        raise TensorFormatError(f"{source}: bad tensor magic {magic!r}")
    pos = offset + 8
    if len(buf) < pos + 4:
        raise TensorFormatError(f"{source}: truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise TensorFormatError(f"{source}: truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = math.prod(dims) * width
    if len(buf) < pos + nbytes:
        raise TensorFormatError(f"{source}: truncated tensor data (need {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos).astype(np.float64)
    return arr.reshape(dims), pos + nbytes


def save_tensor(path, arr, precision: int = 32) -> None:
    Path(path).write_bytes(encode_tensor(arr, precision))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    arr, end = decode_tensor(buf, 0, source=str(path))
    if end != len(buf):
        raise TensorFormatError(f"{path}: trailing bytes after tensor")
    return arr
