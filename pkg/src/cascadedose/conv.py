"""3-D convolution, transposed convolution and trilinear resampling.

Volumes are single samples laid out as (channels, depth, height, width).
conv3d is cross-correlation (no kernel flip). Two interchangeable kernels
back it: an offset-loop/im2col path that handles any stride, and an FFT path
for stride 1 that is much cheaper for 7^3 kernels.
"""
from __future__ import annotations

import numpy as np
from scipy import fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, DimensionError, Tensor, make_result

_IM2COL_LIMIT = 4_000_000  # elements; above this the offset loop is used
_BACKEND = "auto"


def set_conv_backend(name: str) -> None:
    """Force ``"direct"``, ``"fft"`` or ``"auto"`` (the default) for conv3d."""
    global _BACKEND
    if name not in ("auto", "direct", "fft"):
        raise ValueError(name)
    _BACKEND = name


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv3d: extent {n} with kernel {k}, stride {stride}, padding {padding} "
            f"gives non-integral output ({span}/{stride} + 1)")
    return span // stride + 1


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, stride: int):
    if x.ndim != 4 or w.ndim != 5:
        raise DimensionError(f"conv3d: expected input (C,D,H,W) and kernel (O,C,k,k,k), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3d: input channels {x.shape[0]} != kernel in-channels {w.shape[1]} "
                             f"(input {x.shape}, kernel {w.shape})")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv3d: bias {b.shape} does not match {w.shape[0]} output channels")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def _window(xp: np.ndarray, a: int, b_: int, c: int, out_shape, s: int) -> np.ndarray:
    D, H, W = out_shape
    return xp[:, a:a + s * (D - 1) + 1:s, b_:b_ + s * (H - 1) + 1:s, c:c + s * (W - 1) + 1:s]


# --- direct ------------------------------------------------------------------

def _direct_forward(x, w, s, p, out_shape):
    """Returns (output, im2col columns or None)."""
    ci = x.shape[0]
    co, _, kd, kh, kw = w.shape
    xp = _pad(x, p)
    m = int(np.prod(out_shape))
    if ci * kd * kh * kw * m <= _IM2COL_LIMIT:
        win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        win = win[:, :out_shape[0], :out_shape[1], :out_shape[2]]
        cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(ci * kd * kh * kw, m)
        out = w.reshape(co, -1) @ cols
        return out.reshape((co,) + tuple(out_shape)), cols
    out = np.zeros((co, m), dtype=x.dtype)
    for a in range(kd):
        for b_ in range(kh):
            for c in range(kw):
                out += w[:, :, a, b_, c] @ _window(xp, a, b_, c, out_shape, s).reshape(ci, m)
    return out.reshape((co,) + tuple(out_shape)), None


def _direct_backward(g, x, w, s, p, out_shape, cols=None):
    ci = x.shape[0]
    co, _, kd, kh, kw = w.shape
    m = int(np.prod(out_shape))
    g2 = g.reshape(co, m)
    padded = tuple(n + 2 * p for n in x.shape[1:])
    gxp = np.zeros((ci,) + padded, dtype=x.dtype)
    if cols is not None:
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (w.reshape(co, -1).T @ g2).reshape((ci, kd, kh, kw) + tuple(out_shape))
        for a in range(kd):
            for b_ in range(kh):
                for c in range(kw):
                    _window(gxp, a, b_, c, out_shape, s)[...] += gcols[:, a, b_, c]
    else:
        xp = _pad(x, p)
        gw = np.empty_like(w)
        for a in range(kd):
            for b_ in range(kh):
                for c in range(kw):
                    win = _window(xp, a, b_, c, out_shape, s).reshape(ci, m)
                    gw[:, :, a, b_, c] = g2 @ win.T
                    _window(gxp, a, b_, c, out_shape, s)[...] += (w[:, :, a, b_, c].T @ g2).reshape(
                        (ci,) + tuple(out_shape))
    if p:
        gxp = gxp[:, p:-p, p:-p, p:-p]
    return gxp, gw


# --- FFT (stride 1) ----------------------------------------------------------

def _fft_plan(x_shape, k, p):
    sizes = [sfft.next_fast_len(n + k - 1, real=True) for n in x_shape[1:]]
    off = k - 1 - p
    return sizes, off


def _fft_forward(x, w, p, out_shape):
    k = w.shape[2]
    sizes, off = _fft_plan(x.shape, k, p)
    X = sfft.rfftn(x, sizes, axes=(1, 2, 3))
    K = sfft.rfftn(w[:, :, ::-1, ::-1, ::-1], sizes, axes=(2, 3, 4))
    Y = np.einsum("oi...,i...->o...", K, X)
    full = sfft.irfftn(Y, sizes, axes=(1, 2, 3))
    # full linear convolution index t corresponds to padded-input position t - (k-1) + off
    D, H, W = out_shape
    lo = np.array([off] * 3)
    res = np.zeros((w.shape[0], D, H, W), dtype=x.dtype)
    # crop with clipping: positions outside [0, n+k-1) are zero (padding beyond the data)
    src = [(lo[i], lo[i] + out_shape[i]) for i in range(3)]
    valid = [x.shape[1 + i] + k - 1 for i in range(3)]
    sl_src, sl_dst = [], []
    for (s0, s1), v, n in zip(src, valid, out_shape):
        a0, a1 = max(s0, 0), min(s1, v)
        sl_src.append(slice(a0, a1))
        sl_dst.append(slice(a0 - s0, a1 - s0))
    res[(slice(None),) + tuple(sl_dst)] = full[(slice(None),) + tuple(sl_src)]
    return res, X, K, sizes, sl_src, sl_dst


def _fft_backward(g, x, w, cache):
    X, K, sizes, sl_src, sl_dst = cache
    k = w.shape[2]
    co = w.shape[0]
    gfull = np.zeros((co,) + tuple(sizes), dtype=g.dtype)
    gfull[(slice(None),) + tuple(sl_src)] = g[(slice(None),) + tuple(sl_dst)]
    G = sfft.rfftn(gfull, sizes, axes=(1, 2, 3))
    # adjoint of convolution = correlation with the same (flipped) kernel
    GX = np.einsum("oi...,o...->i...", np.conj(K), G)
    gx = sfft.irfftn(GX, sizes, axes=(1, 2, 3))
    D, H, W = x.shape[1:]
    gx = gx[:, :D, :H, :W].astype(x.dtype, copy=False)
    GW = np.einsum("o...,i...->oi...", G, np.conj(X))
    gwf = sfft.irfftn(GW, sizes, axes=(2, 3, 4))[:, :, :k, :k, :k]
    gw = gwf[:, :, ::-1, ::-1, ::-1].astype(w.dtype, copy=False)
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def _pick_backend(w_shape, stride, out_shape) -> str:
    if _BACKEND != "auto":
        return "direct" if (_BACKEND == "fft" and stride != 1) else _BACKEND
    k = w_shape[2]
    if stride != 1 or k == 1 or len(set(w_shape[2:])) != 1:
        return "direct"
    m = int(np.prod(out_shape))
    return "fft" if k >= 5 or m * k ** 3 * w_shape[1] > _IM2COL_LIMIT else "direct"


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_args(x, w, b, stride)
    k = w.shape[2:]
    out_shape = tuple(conv_output_extent(n, kk, stride, padding) for n, kk in zip(x.shape[1:], k))
    backend = _pick_backend(w.shape, stride, out_shape)
    xd, wd = x.data, w.data
    if backend == "fft":
        out, X, K, sizes, sl_src, sl_dst = _fft_forward(xd, wd, padding, out_shape)
        out = out.astype(xd.dtype, copy=False)
        cache = (X, K, sizes, sl_src, sl_dst)
    else:
        out, cols = _direct_forward(xd, wd, stride, padding, out_shape)
    if b is not None:
        out = out + b.data.reshape(-1, 1, 1, 1)

    def backward(g):
        if backend == "fft":
            gx, gw = _fft_backward(g, xd, wd, cache)
        else:
            gx, gw = _direct_backward(g, xd, wd, stride, padding, out_shape, cols)
        gb = g.sum(axis=(1, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, f"conv3d[{backend}]", backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of conv3d (no padding). Kernel layout (C_in, C_out, k, k, k)."""
    if x.ndim != 4 or w.ndim != 5 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"conv_transpose3d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"conv_transpose3d: bias {b.shape} does not match {w.shape[1]} output channels")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    ci, D, H, W = x.shape
    co, kd, kh, kw = w.shape[1:]
    s = stride
    out_shape = ((D - 1) * s + kd, (H - 1) * s + kh, (W - 1) * s + kw)
    xd, wd = x.data, w.data
    m = D * H * W
    x2 = xd.reshape(ci, m)

    if s == kd == kh == kw:
        # non-overlapping taps: a single matmul then interleave
        prod = wd.reshape(ci, co * kd * kh * kw).T @ x2  # (co*k^3, m)
        out = prod.reshape(co, kd, kh, kw, D, H, W).transpose(0, 4, 1, 5, 2, 6, 3).reshape((co,) + out_shape)
    else:
        out = np.zeros((co,) + out_shape, dtype=xd.dtype)
        for a in range(kd):
            for b_ in range(kh):
                for c in range(kw):
                    _window(out, a, b_, c, (D, H, W), s)[...] += (wd[:, :, a, b_, c].T @ x2).reshape(co, D, H, W)
    if b is not None:
        out = out + b.data.reshape(-1, 1, 1, 1)

    def backward(g):
        if s == kd == kh == kw:
            gt = g.reshape(co, D, kd, H, kh, W, kw).transpose(0, 2, 4, 6, 1, 3, 5).reshape(co * kd * kh * kw, m)
            gx = (wd.reshape(ci, -1) @ gt).reshape(xd.shape)
            gw = (x2 @ gt.T).reshape(wd.shape)
        else:
            gx = np.zeros_like(x2)
            gw = np.empty_like(wd)
            for a in range(kd):
                for b_ in range(kh):
                    for c in range(kw):
                        gs = _window(g, a, b_, c, (D, H, W), s).reshape(co, m)
                        gx += wd[:, :, a, b_, c] @ gs
                        gw[:, :, a, b_, c] = x2 @ gs.T
            gx = gx.reshape(xd.shape)
        gb = g.sum(axis=(1, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, "conv_transpose3d", backward)


# --- trilinear ---------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """1-D linear interpolation weights, align-corners=False, clamped at the low edge."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        A[i, i0] += 1.0 - lam
        A[i, i1] += lam
    return A


def trilinear_resize(x: Tensor, out_shape) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"trilinear_resize expects (C,D,H,W), got {x.shape}")
    out_shape = tuple(int(n) for n in out_shape)
    if len(out_shape) != 3 or min(out_shape) < 1 or min(x.shape) < 1:
        raise DimensionError(f"trilinear_resize: invalid target {out_shape} for {x.shape}")
    if out_shape == x.shape[1:]:
        return make_result(x.data.copy(), (x,), "trilinear_resize", lambda g: (g,))
    Az, Ay, Ax = (interp_matrix(n, m, x.dtype) for n, m in zip(x.shape[1:], out_shape))
    out = np.einsum("zd,yh,xw,cdhw->czyx", Az, Ay, Ax, x.data, optimize=True)

    def backward(g):
        return (np.einsum("zd,yh,xw,czyx->cdhw", Az, Ay, Ax, g, optimize=True),)

    return make_result(out, (x,), "trilinear_resize", backward)
