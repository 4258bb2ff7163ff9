"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active append a record holding
the local gradient rule; :func:`backward` replays the records in reverse.
Outside a tape nothing is recorded, which is the cheap path used for
inference and finite-difference probing.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class Tensor:
    """An n-dimensional float32/float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if arr.dtype.kind == "f":
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; tapes nest and are thread-local.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def first_nonfinite(self) -> Record | None:
        """Earliest record whose output holds NaN or Inf."""
        for rec in self.records:
            if not np.all(np.isfinite(rec.output.data)):
                return rec
        return None


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out`` in a Tensor and log it on the active tape if needed."""
    result = Tensor(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append(Record(op, tuple(inputs), result, grad_fn))
    return result


def backward(root: Tensor, tape: Tape, params=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Gradients add onto existing ``grad`` buffers; zero them between steps.
    Leaves that ``root`` does not depend on (and every tensor of ``params``,
    if given) end up with at least a zero gradient.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a single-element root, got shape {root.shape}")
    produced = {id(rec.output) for rec in tape.records}
    seed = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[int, Tensor] = {}
    if id(root) not in produced and root.requires_grad:
        leaves[id(root)] = root
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            grads[key] = grads[key] + gi if key in grads else gi
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    # each leaf's total is added once, so repeated calls accumulate exactly
    for key, t in leaves.items():
        if key in grads:
            _accumulate_leaf(t, grads[key])
        elif t.grad is None:
            t.grad = np.zeros_like(t.data)
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match leaf shape {t.shape}")
    g = g.astype(t.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), ad * bd, grad_fn)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, grad_fn)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return record("power", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record("log", (a,), np.log(ad), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


# --------------------------------------------------------------------------
# reductions and shape


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), np.asarray(out, dtype=a.dtype), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record("matmul", (a, b), np.matmul(ad, bd), grad_fn)
