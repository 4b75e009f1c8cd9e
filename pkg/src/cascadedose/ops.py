"""Differentiable primitives. No broadcasting except bias-add and scalar ops."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from .tensor import DimensionError, Tensor, make_result


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return make_result(out, (a, b), "div", lambda g: (g / b.data, -g * out / b.data))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.dtype.type(c), (x,), "mul_scalar", lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return make_result(x.data + x.dtype.type(c), (x,), "add_scalar", lambda g: (g,))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """x + b with ``b`` (1-D) laid along ``axis`` of ``x``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(x.data + b.data.reshape(view), (x, b), "add_bias",
                       lambda g: (g, g.sum(axis=others)))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    shifted = x.data + x.dtype.type(eps)
    return make_result(np.log(shifted), (x,), "log", lambda g: (g / shifted,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), "exp", lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.dtype, copy=False)
    return make_result(out, (x,), "gelu", lambda g: ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)), with softplus evaluated as logaddexp(0, x)."""
    sp = np.logaddexp(0.0, x.data)
    t = np.tanh(sp)
    out = x.data * t

    def backward(g):
        sig = special.expit(x.data)
        return (g * (t + x.data * (1.0 - t * t) * sig),)

    return make_result(out, (x,), "mish", backward)


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


# --- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes))
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]

    def backward(g):
        return (np.broadcast_to(g.reshape(keep), x.shape).copy(),)

    return make_result(out, (x,), "sum", backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul_scalar(sum(x, axes), 1.0 / n)


# --- structural --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e
    return make_result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "permute",
                       lambda g: (g.transpose(inv),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat on axis {axis}: incompatible shapes {[u.shape for u in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, xs, "concat", backward)


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), "index", backward)


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched 3-D product with equal leading extents."""
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return make_result(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b, -1) if b is not None else y


# --- normalisation -----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or shift.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/shift {shift.shape} do not match axis extent {n}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    view = [1] * x.ndim
    view[axis] = n
    gv = gain.data.reshape(view)
    out = xhat * gv + shift.data.reshape(view)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_result(out, (x, gain, shift), "layer_norm", backward)
