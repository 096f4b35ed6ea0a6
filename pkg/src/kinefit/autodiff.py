"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a numpy array; primitive operations record nodes on
the active :class:`Tape` (one tape per fitting worker, never shared across
threads).  Calling :meth:`Tape.backward` on a scalar loss walks the recorded
nodes in reverse creation order, which is a valid topological order, and
accumulates exact gradients into every leaf tensor created with
``requires_grad=True``.

The primitive set is intentionally small: enough to express an MLP, forward
kinematics built from axis-angle rotations, and robust reprojection losses.
Everything runs in float64; there is no GPU path and no higher-order
differentiation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "sqrt",
    "absolute",
    "atan2",
    "huber",
    "vector_norm",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "index_select",
    "reshape",
    "swap_last_axes",
    "masked_fill",
    "sinc_sqrt",
    "vercos_sqrt",
    "cos_sqrt",
]


class ShapeError(ValueError):
    """Raised at record time when operand shapes are incompatible."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(value, name: str = "") -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended in creation order, so reverse iteration is a
    topological order of the recorded graph and each node is visited exactly
    once.  Use as a context manager around the forward computation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` slot."""
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            gins = node.backward(gout)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    t.grad += g

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Backward pass returning one gradient array per parameter."""
        self.backward(loss)
        return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]

    def first_nonfinite(self) -> str | None:
        """Name of the earliest recorded node with non-finite output, if any."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.value)):
                return node.op
        return None


def _record(op: str, value: np.ndarray, inputs: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(_Node(op, out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# --- elementwise binary -----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _record("mul", a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def backward(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return _record("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.value, (a,), lambda g: (-g,))


# --- matmul ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", np.matmul(a.value, b.value), (a, b), backward)


# --- elementwise unary -------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    return _record("sin", np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a: Tensor) -> Tensor:
    return _record("cos", np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    return _record("abs", np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    _check_broadcast("atan2", y, x)

    def backward(g):
        denom = x.value * x.value + y.value * y.value
        return (_unbroadcast(g * x.value / denom, y.shape),
                _unbroadcast(-g * y.value / denom, x.shape))

    return _record("atan2", np.arctan2(y.value, x.value), (y, x), backward)


def huber(a: Tensor, delta: float) -> Tensor:
    """Elementwise robust penalty: 0.5*x**2 inside |x| <= delta, then linear.

    The linear branch is delta*(|x| - 0.5*delta), which makes the function C1
    at |x| = delta with slope sign(x)*delta on both sides.
    """
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    absx = np.abs(a.value)
    inside = absx <= delta
    out = np.where(inside, 0.5 * a.value * a.value, delta * (absx - 0.5 * delta))

    def backward(g):
        slope = np.where(inside, a.value, delta * np.sign(a.value))
        return (g * slope,)

    return _record("huber", out, (a,), backward)


def vector_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along one axis.

    At an exactly zero vector the gradient is defined as zero (a valid
    subgradient), which keeps losses built on norms NaN-free when residuals
    vanish.
    """
    out = np.sqrt(np.sum(a.value * a.value, axis=axis))

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        g_over = np.expand_dims(g / safe, axis=axis)
        return (g_over * a.value,)

    return _record("vector_norm", out, (a,), backward)


# --- reductions / shape ------------------------------------------------------

def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None,
               keepdims: bool = False) -> Tensor:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), backward)


def reduce_mean(a: Tensor, axis: int | tuple[int, ...] | None = None,
                keepdims: bool = False) -> Tensor:
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    out = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, ts, backward)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.value)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record("index_select", out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.value.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("swap_last_axes needs ndim >= 2")
    out = np.swapaxes(a.value, -1, -2)
    return _record("swap_last_axes", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def masked_fill(a: Tensor, keep_mask: np.ndarray, fill_value: float) -> Tensor:
    """Replace entries where ``keep_mask`` is False with a constant.

    Filled entries receive zero gradient; used to neutralise points behind
    the camera before a division by depth.
    """
    mask = np.asarray(keep_mask, dtype=bool)
    out = np.where(mask, a.value, fill_value)
    return _record("masked_fill", out, (a,), lambda g: (np.where(mask, g, 0.0),))


# --- smooth axis-angle helpers ----------------------------------------------
#
# Rotation formulas need sin(theta)/theta and (1 - cos(theta))/theta**2 with
# theta = sqrt(s) and s = |v|^2.  Both are analytic in s, so defining them as
# primitives of s (series near zero, closed form elsewhere) keeps gradients
# finite for arbitrarily small rotations.

_SERIES_CUTOFF = 1e-2


def _f_sinc(s: np.ndarray) -> np.ndarray:
    small = s < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    theta = np.sqrt(s_safe)
    closed = np.sin(theta) / theta
    series = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0
    return np.where(small, series, closed)


def _f_sinc_prime(s: np.ndarray) -> np.ndarray:
    small = s < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    theta = np.sqrt(s_safe)
    closed = (theta * np.cos(theta) - np.sin(theta)) / (2.0 * s_safe * theta)
    series = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90720.0
    return np.where(small, series, closed)


def _f_vercos(s: np.ndarray) -> np.ndarray:
    small = s < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    theta = np.sqrt(s_safe)
    closed = (1.0 - np.cos(theta)) / s_safe
    series = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0
    return np.where(small, series, closed)


def _f_vercos_prime(s: np.ndarray) -> np.ndarray:
    small = s < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    theta = np.sqrt(s_safe)
    closed = (0.5 * theta * np.sin(theta) - (1.0 - np.cos(theta))) / (s_safe * s_safe)
    series = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    return np.where(small, series, closed)


def sinc_sqrt(s: Tensor) -> Tensor:
    """sin(sqrt(s))/sqrt(s), smooth through s = 0."""
    return _record("sinc_sqrt", _f_sinc(s.value), (s,),
                   lambda g: (g * _f_sinc_prime(s.value),))


def vercos_sqrt(s: Tensor) -> Tensor:
    """(1 - cos(sqrt(s)))/s, smooth through s = 0."""
    return _record("vercos_sqrt", _f_vercos(s.value), (s,),
                   lambda g: (g * _f_vercos_prime(s.value),))


def cos_sqrt(s: Tensor) -> Tensor:
    """cos(sqrt(s)); derivative -sinc_sqrt(s)/2, smooth through s = 0."""
    theta_sq = s.value
    small = theta_sq < _SERIES_CUTOFF
    s_safe = np.where(small, 1.0, theta_sq)
    closed = np.cos(np.sqrt(s_safe))
    series = (1.0 - theta_sq / 2.0 + theta_sq * theta_sq / 24.0
              - theta_sq * theta_sq * theta_sq / 720.0)
    out = np.where(small, series, closed)
    return _record("cos_sqrt", out, (s,),
                   lambda g: (-0.5 * g * _f_sinc(s.value),))


def sigmoid_np(x) -> np.ndarray:
    """Plain numpy logistic; not differentiated anywhere."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                      step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; the gradient oracle."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
