"""Dense tensors with reverse-mode differentiation over a per-evaluation tape.

Tensors wrap numpy arrays (float32 by default). A tensor created with
``Tape.leaf`` is linked to that tape; every primitive applied to a linked
tensor appends a node, and ``backward`` walks the nodes in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-6


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def linked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.linked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar, each maps onto a single primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    saved: tuple
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...] = ()


@dataclass
class Tape:
    """Append-only record of one evaluation. Discard after ``backward``."""

    nodes: list[Node] = field(default_factory=list)
    leaves: set[int] = field(default_factory=set)

    def leaf(self, data, dtype=None) -> Tensor:
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.nodes.append(Node("leaf", (), (), None, arr.shape))
        idx = len(self.nodes) - 1
        self.leaves.add(idx)
        return Tensor(arr, self, idx)

    def record(self, kind: str, parents: Sequence[Tensor], out: np.ndarray, vjp, saved=()) -> Tensor:
        ids = []
        for p in parents:
            if p.tape is None:
                ids.append(-1)
            elif p.tape is not self:
                raise ValueError(f"{kind}: inputs belong to different tapes")
            else:
                ids.append(p.node)
        self.nodes.append(Node(kind, tuple(ids), saved, vjp, out.shape))
        return Tensor(out, self, len(self.nodes) - 1)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _emit(kind, inputs, out, vjp, saved=()):
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp, saved)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + ax for ax, n in enumerate(shape) if n == 1 and grad.shape[lead + ax] != 1)
    return grad.sum(axis=axes).reshape(shape)


def _check_broadcast(kind, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # weight matrix: fold leading dims into one GEMM
        A2 = A.reshape(-1, A.shape[-1])
        out = (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.linked else None
            gb = A2.T @ g2 if b.linked else None
            return ga, gb

        return _emit("matmul", (a, b), out, vjp2)
    out = np.matmul(A, B)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.linked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.linked else None
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data
    out = A * B

    def vjp(g):
        ga = _unbroadcast(g * B, A.shape) if a.linked else None
        gb = _unbroadcast(g * A, B.shape) if b.linked else None
        return ga, gb

    return _emit("mul", (a, b), out, vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * g.dtype.type(c),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def layernorm(a, eps: float = _LN_EPS) -> Tensor:
    """Normalize over the last axis; no learned affine."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layernorm", (a,), xhat, vjp)


def gelu(a) -> Tensor:
    """Exact erf form."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(g.dtype, copy=False),)

    return _emit("gelu", (a,), out, vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", ts, out, vjp)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {index!r} invalid for shape {a.shape}: {exc}") from None
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = np.reshape(g, np.shape(full[index]))
        return (full,)

    return _emit("slice", (a,), np.ascontiguousarray(out), vjp)


def _needs_add_at(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    n = a.data.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(n), shape).copy(),)

    return _emit("mean", (a,), out, vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean())

    def vjp(g):
        gd = g * d * d.dtype.type(2.0 / n)
        return gd, -gd

    return _emit("mse", (a, b), out, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", (a,), out, lambda g: (g.transpose(inv),))


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take", (table,), out, vjp)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf on ``tape``."""
    if loss.tape is not tape:
        raise ValueError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for idx in range(loss.node, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        if idx not in tape.leaves:
            del grads[idx]
        pgrads = node.vjp(g)
        for pid, pg in zip(node.parents, pgrads):
            if pid < 0 or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for leaf in tape.leaves:
        g = grads.get(leaf)
        out[leaf] = g if g is not None else np.zeros(tape.nodes[leaf].shape, dtype=loss.dtype)
    return out


def grad(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    g = backward(tape, loss)
    return [g[t.node] for t in wrt]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW update with decoupled weight decay. Returns new arrays."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state = AdamWState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    b1, b2 = betas
    step = state.step + 1
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adamw: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + eps
        upd = p * (1.0 - lr * weight_decay) - lr * (m / bc1) / denom
        new_p.append(upd.astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamWState(step, new_m, new_v)
