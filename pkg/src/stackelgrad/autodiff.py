"""Reverse-mode automatic differentiation on dense float64 arrays.

Graphs are built eagerly (define-by-run): every primitive evaluates its
output immediately and records a closure that maps the output cotangent to
cotangents of its inputs. :func:`grad` walks the recorded graph in reverse
topological order, visiting each node once.
"""
from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction and differentiation errors."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NumericError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"{op}: non-finite value in output")
        self.op = op


class Tensor:
    """A node of the computation graph.

    Leaves are created by the user (``Tensor(array)``); every other node is
    produced by a primitive and remembers its parents and a vector-Jacobian
    closure.
    """

    __slots__ = ("data", "parents", "vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, data, parents: tuple = (), vjp: Callable | None = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not parents and op == "leaf":
            # leaves own their storage so later caller mutation cannot leak in
            arr = arr.copy()
        self.data = arr
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _quiet(fn):
    """Silence numpy floating-point warnings; ``_node`` reports non-finite
    outputs as :class:`NumericError` instead."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _node(op: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(op)
    return Tensor(value, parents, vjp, op)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- arithmetic

@_quiet
def add(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(as_tensor(a), float(b))
    if _is_scalar(a):
        return shift(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _node("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", f"incompatible shapes {a.shape} and {b.shape}")


@_quiet
def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(as_tensor(a), -float(b))
    if _is_scalar(a):
        return shift(scale(as_tensor(b), -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", f"incompatible shapes {a.shape} and {b.shape}")
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


@_quiet
def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(as_tensor(a), float(b))
    if _is_scalar(a):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", f"incompatible shapes {a.shape} and {b.shape}")
    return _node("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


@_quiet
def scale(a: Tensor, c: float) -> Tensor:
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


@_quiet
def shift(a: Tensor, c: float) -> Tensor:
    return _node("shift", a.data + c, (a,), lambda g: (g,))


@_quiet
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return _node("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------- elementwise

@_quiet
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@_quiet
def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


@_quiet
def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node("exp", e, (a,), lambda g: (g * e,))


@_quiet
def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.data)
    return _node("log", v, (a,), lambda g: (g / a.data,))


@_quiet
def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _node("clamp", np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,))


@_quiet
def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("maximum", f"incompatible shapes {a.shape} and {b.shape}")
    pick_a = a.data >= b.data
    return _node("maximum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


@_quiet
def square(a: Tensor) -> Tensor:
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def stop_gradient(a: Tensor) -> Tensor:
    """Same value, but the result is a fresh leaf: no gradient flows back."""
    return Tensor(a.data, op="stop_gradient")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -------------------------------------------------------------- reductions

@_quiet
def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node("sum", a.data.sum(axis=axis), (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


@_quiet
def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis (fused, max-shifted)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node("log_softmax", out, (a,), vjp)


def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("gather", f"need (B, K) input and (B,) index, got {a.shape}, {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ShapeError("gather", "index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _node("gather", a.data[rows, index], (a,), vjp)


def masked_max(a: Tensor, mask) -> Tensor:
    """Row-wise max over entries where ``mask`` is true; lowest index wins ties."""
    mask = np.asarray(mask, dtype=bool)
    if a.ndim != 2 or mask.shape != a.shape:
        raise ShapeError("masked_max", f"mask shape {mask.shape} does not match {a.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_max", "a row has no unmasked entries")
    masked = np.where(mask, a.data, -np.inf)
    arg = masked.argmax(axis=1)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, arg] = g
        return (out,)

    return _node("masked_max", masked[rows, arg], (a,), vjp)


@_quiet
def kl_rows(logp: Tensor, logq: Tensor) -> Tensor:
    """Per-row KL(p || q) given log-probabilities of both rows."""
    if logp.shape != logq.shape or logp.ndim != 2:
        raise ShapeError("kl_rows", f"incompatible shapes {logp.shape} and {logq.shape}")
    p = np.exp(logp.data)
    diff = logp.data - logq.data
    value = (p * diff).sum(axis=1)

    def vjp(g):
        g = g[:, None]
        return (g * p * (diff + 1.0), -g * p)

    return _node("kl_rows", value, (logp, logq), vjp)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors unreachable from ``root`` get exact zeros.
    """
    if root.data.size != 1:
        raise ShapeError("grad", f"root must be scalar, got shape {root.shape}")
    cot = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = cot.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            key = id(parent)
            if key in cot:
                cot[key] = cot[key] + pg
            else:
                cot[key] = pg
    return [np.array(cot[id(t)], dtype=np.float64) if id(t) in cot
            else np.zeros_like(t.data) for t in wrt]


def value_and_grad(fn: Callable[..., Tensor], arrays: Iterable, argnums=None):
    """Bind ``arrays`` as leaves, evaluate ``fn`` and differentiate it.

    Returns ``(value, grads)`` with one gradient per index in ``argnums``
    (all arguments by default).
    """
    leaves = [Tensor(a) for a in arrays]
    idx = range(len(leaves)) if argnums is None else argnums
    out = fn(*leaves)
    return float(out.data), grad(out, [leaves[i] for i in idx])
