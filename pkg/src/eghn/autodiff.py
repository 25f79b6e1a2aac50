"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op that touches a tensor with ``requires_grad`` appends
one record to the active :class:`Tape`.  :func:`backward` replays the tape in
reverse, accumulates gradients into the leaf tensors and clears the tape.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "as_tensor",
    "get_tape",
    "no_grad",
    "backward",
    "concat",
    "stack",
    "softmax",
    "silu",
    "sigmoid",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "broadcast_to",
    "matmul",
]

CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class _Op:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations (a Wengert list)."""

    def __init__(self) -> None:
        self.ops: list[_Op] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name, inputs, output, backward_fn) -> None:
        self.ops.append(_Op(name, inputs, output, backward_fn))

    def clear(self) -> None:
        self.ops = []


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _State()


def get_tape() -> Tape:
    """Return the tape of the calling thread."""
    return _state.tape


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int = -1, b: int = -2):
        return swapaxes(self, a, b)

    @property
    def mT(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# recording helpers
# ----------------------------------------------------------------------


def _check(name: str, out: np.ndarray) -> None:
    # a single reduction is cheaper than isfinite() and NaN/Inf propagate through it
    if CHECK_FINITE and not math.isfinite(out.sum()):
        if np.isfinite(out).all():
            return
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check(name, out)
    res = Tensor(out)
    if _state.enabled and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res._leaf = False
        _state.tape.record(name, tuple(inputs), res, backward_fn)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shapes(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise binary ops
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make("div", out, (a, b), bw)


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make("maximum", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


# ----------------------------------------------------------------------
# unary nonlinearities
# ----------------------------------------------------------------------


_sigmoid = expit


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    y = x * s
    # d/dx x*s(x) = s + y*(1 - s)
    return _make("silu", y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _make("sqrt", r, (a,), lambda g: (g * 0.5 / r,))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (rows by default)."""
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), bw)


# ----------------------------------------------------------------------
# linear algebra and shape ops
# ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _make("transpose", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


transpose = swapaxes


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) if ts[k].requires_grad else None
            for k in range(len(ts))
        )

    return _make("concat", out, ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(a.data[idx]), (a,), bw)


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every leaf that requires grad.

    Gradients accumulate into ``leaf.grad``; the returned map holds the
    gradient produced by this call for each reached leaf.  The tape is
    cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced: dict[Tensor, np.ndarray] = {}
    if loss._leaf and loss.requires_grad:
        produced[loss] = np.ones(loss.shape)
    try:
        for op in reversed(tape.ops):
            tape.visits += 1
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward_fn(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._leaf:
                    prev = produced.get(t)
                    produced[t] = gi.copy() if prev is None else prev + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()
    for t, g in produced.items():
        t.grad = g if t.grad is None else t.grad + g
    return produced


def numeric_grad(fn: Callable[[], float], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``fn`` with respect to ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = fn()
        flat[k] = orig - step
        fm = fn()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return out
