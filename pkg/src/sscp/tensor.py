"""Dense double-precision tensors with a recorded reverse-mode tape.

Every operation in this module (and in :mod:`sscp.functional`) returns a new
:class:`Tensor` whose ``_backward`` closure knows how to push an incoming
adjoint onto its parents.  ``Tensor.backward`` walks the tape in reverse
topological order.

Operations also report a floating-point cost to the active
:class:`FlopCounter`, which lets the analytic cost model in
:mod:`sscp.block` be checked against what a forward pass actually executes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_flop_counters: list["FlopCounter"] = []
_kink_monitors: list["KinkMonitor"] = []


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Accumulates the cost reported by every op executed inside the block.

    Costs follow one convention: a multiply-accumulate is 2 flops, every
    other elementwise arithmetic step (including norm, sigmoid, relu) is 1
    per output element, and pure data movement is free.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _flop_counters.append(self)
        return self

    def __exit__(self, *exc):
        _flop_counters.remove(self)
        return False


class KinkMonitor:
    """Records the branch taken by every piecewise op (relu, abs, clamp).

    Two evaluations of the same computation lie on the same smooth piece
    exactly when their recorded patterns are equal.
    """

    def __init__(self):
        self.patterns: list[np.ndarray] = []

    def __enter__(self):
        _kink_monitors.append(self)
        return self

    def __exit__(self, *exc):
        _kink_monitors.remove(self)
        return False

    def same_piece(self, other: "KinkMonitor") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _branch(pattern: np.ndarray) -> None:
    for m in _kink_monitors:
        m.patterns.append(pattern)


def _count(n: int) -> None:
    for c in _flop_counters:
        c.total += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd ----------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones(self.shape, dtype=DTYPE)
        order = _topo(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    need = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _count(out.size)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _count(out.size)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(-unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _count(out.size)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    _count(out.size)
    return _result(out, (a,), lambda g: a._accum(g * c))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_grad(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    _count(s.size)
    return _result(s, (a,), lambda g: a._accum(g * _sigmoid_grad(s)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _branch(mask)
    out = np.where(mask, a.data, 0.0)
    _count(out.size)
    return _result(out, (a,), lambda g: a._accum(g * mask))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    _branch(sign)
    out = np.abs(a.data)
    _count(out.size)
    return _result(out, (a,), lambda g: a._accum(g * sign))


# -- reductions ------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = np.array(a.data.sum())
    _count(a.size)
    return _result(out, (a,), lambda g: a._accum(np.broadcast_to(g, a.shape)))


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=DTYPE)
    count = a.size // max(out.size, 1)
    _count(a.size)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / count, a.shape))

    return _result(out, (a,), backward)


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(a * w)`` for a constant weight array."""
    w = np.asarray(w, dtype=DTYPE)
    out = np.array((a.data * w).sum())
    _count(2 * a.size)
    return _result(out, (a,), lambda g: a._accum(g * w))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    out = a.data @ b.data
    _count(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, shifted by the row max."""
    if x.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    _count(y.size)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result(y, (x,), backward)


# -- data movement ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: a._accum(g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: a._accum(g.transpose(inv)))


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] += g
        a._accum(full)

    return _result(np.array(out, dtype=DTYPE), (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            if p.requires_grad:
                p._accum(gp)

    return _result(out, parts, backward)


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections:
        raise ConfigError(f"cannot split {n} entries into {sections} equal parts")
    step = n // sections
    out = []
    for i in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        out.append(take(a, tuple(idx)))
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(np.take(g, i, axis=axis))

    return _result(out, parts, backward)


def unstack(a: Tensor) -> list[Tensor]:
    return [take(a, i) for i in range(a.shape[0])]


# -- row-major index helpers ----------------------------------------------

def strides_of(shape: Sequence[int]) -> list[int]:
    strides = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    return strides


def flat_index(coord: Sequence[int], shape: Sequence[int]) -> int:
    return sum(i * s for i, s in zip(coord, strides_of(shape)))


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    coord = []
    for s in strides_of(shape):
        q, flat = divmod(flat, s)
        coord.append(q)
    return tuple(coord)
