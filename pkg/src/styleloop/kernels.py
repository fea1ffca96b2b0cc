"""2-D convolution kernels: numba-jitted hot path with a pure-numpy fallback.

The backend is picked once at import from the STYLELOOP_BACKEND environment
variable ("numba" or "numpy"). Default is numba when importable, numpy
otherwise. Both paths compute the same direct convolution; results agree to
float rounding (accumulation order differs). `set_backend` exists for tests
and the benchmark harness.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_ENV_VAR = "STYLELOOP_BACKEND"
_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested in _VALID:
        if requested == "numba" and not HAS_NUMBA:
            return "numpy"
        return requested
    return "numba" if HAS_NUMBA else "numpy"


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy path: im2col + BLAS matmul
# ---------------------------------------------------------------------------


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: [N, C, Hp, Wp] -> [N, Ho*Wo, C*kh*kw]
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def _conv2d_forward_numpy(x, w, stride, pad):
    n, _, h, wd = x.shape
    oc, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    cols = _im2col(_pad_nchw(x, pad), kh, kw, stride)
    out = cols @ w.reshape(oc, -1).T  # [N, Ho*Wo, O]
    return out.transpose(0, 2, 1).reshape(n, oc, ho, wo)


def _conv2d_grad_weight_numpy(gout, x, kh, kw, stride, pad):
    n, oc, ho, wo = gout.shape
    cols = _im2col(_pad_nchw(x, pad), kh, kw, stride)  # [N, HoWo, Ckhkw]
    g2 = np.ascontiguousarray(gout.reshape(n, oc, ho * wo).transpose(1, 0, 2)).reshape(oc, -1)
    gw = g2 @ cols.reshape(n * ho * wo, -1)
    return gw.reshape(oc, x.shape[1], kh, kw)


def _conv2d_grad_input_numpy(gout, w, h, wd, stride, pad):
    n, oc, ho, wo = gout.shape
    _, c, kh, kw = w.shape
    g = gout.transpose(0, 2, 3, 1).reshape(n, ho * wo, oc)
    gcols = g @ w.reshape(oc, -1)  # [N, HoWo, C*kh*kw]
    # one contiguous rearrangement, then kh*kw strided slice adds
    gcols = np.ascontiguousarray(
        gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    )
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, i, j
            ]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


# ---------------------------------------------------------------------------
# numba path: direct loops over the padded input
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    # jitted im2col/col2im packing around BLAS matmuls: the packing loops are
    # where the numpy path burns time in stride-tricks copies

    @njit(cache=True, fastmath=False)
    def _pack_cols_jit(xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
        for b in range(n):
            for y in range(ho):
                for x_ in range(wo):
                    r = (b * ho + y) * wo + x_
                    idx = 0
                    for ic in range(c):
                        for i in range(kh):
                            row = xp[b, ic, y * stride + i]
                            for j in range(kw):
                                cols[r, idx] = row[x_ * stride + j]
                                idx += 1
        return cols

    @njit(cache=True, fastmath=False)
    def _conv2d_forward_jit(xp, w2, stride, ho, wo, kh, kw):
        n = xp.shape[0]
        oc = w2.shape[0]
        cols = _pack_cols_jit(xp, kh, kw, stride, ho, wo)
        flat = np.dot(cols, w2.T)  # [n*ho*wo, oc]
        out = np.empty((n, oc, ho, wo), dtype=xp.dtype)
        for b in range(n):
            for y in range(ho):
                for x_ in range(wo):
                    r = (b * ho + y) * wo + x_
                    for o in range(oc):
                        out[b, o, y, x_] = flat[r, o]
        return out

    @njit(cache=True, fastmath=False)
    def _conv2d_grad_weight_jit(gout, xp, kh, kw, stride):
        n, oc, ho, wo = gout.shape
        cols = _pack_cols_jit(xp, kh, kw, stride, ho, wo)
        g2 = np.empty((oc, n * ho * wo), dtype=gout.dtype)
        for b in range(n):
            for o in range(oc):
                for y in range(ho):
                    for x_ in range(wo):
                        g2[o, (b * ho + y) * wo + x_] = gout[b, o, y, x_]
        return np.dot(g2, cols)  # [oc, c*kh*kw]

    @njit(cache=True, fastmath=False)
    def _conv2d_grad_input_jit(gout, w2, hp, wp, c, kh, kw, stride):
        n, oc, ho, wo = gout.shape
        g = np.empty((n * ho * wo, oc), dtype=gout.dtype)
        for b in range(n):
            for o in range(oc):
                for y in range(ho):
                    for x_ in range(wo):
                        g[(b * ho + y) * wo + x_, o] = gout[b, o, y, x_]
        gcols = np.dot(g, w2)  # [n*ho*wo, c*kh*kw]
        gxp = np.zeros((n, c, hp, wp), dtype=gout.dtype)
        for b in range(n):
            for y in range(ho):
                for x_ in range(wo):
                    r = (b * ho + y) * wo + x_
                    idx = 0
                    for ic in range(c):
                        for i in range(kh):
                            row = gxp[b, ic, y * stride + i]
                            for j in range(kw):
                                row[x_ * stride + j] += gcols[r, idx]
                                idx += 1
        return gxp


def _conv2d_forward_numba(x, w, stride, pad):
    xp = np.ascontiguousarray(_pad_nchw(x, pad))
    oc, _, kh, kw = w.shape
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    w2 = np.ascontiguousarray(w.reshape(oc, -1))
    return _conv2d_forward_jit(xp, w2, stride, ho, wo, kh, kw)


def _conv2d_grad_weight_numba(gout, x, kh, kw, stride, pad):
    xp = np.ascontiguousarray(_pad_nchw(x, pad))
    gw2 = _conv2d_grad_weight_jit(np.ascontiguousarray(gout), xp, kh, kw, stride)
    return gw2.reshape(gout.shape[1], x.shape[1], kh, kw)


def _conv2d_grad_input_numba(gout, w, h, wd, stride, pad):
    oc, c, kh, kw = w.shape
    w2 = np.ascontiguousarray(w.reshape(oc, -1))
    gxp = _conv2d_grad_input_jit(
        np.ascontiguousarray(gout), w2, h + 2 * pad, wd + 2 * pad, c, kh, kw, stride
    )
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """x [N,C,H,W] convolved with w [O,C,kh,kw]; no bias."""
    if _backend == "numba":
        return _conv2d_forward_numba(x, w, stride, pad)
    return _conv2d_forward_numpy(x, w, stride, pad)


def conv2d_grad_weight(gout, x, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if _backend == "numba":
        return _conv2d_grad_weight_numba(gout, x, kh, kw, stride, pad)
    return _conv2d_grad_weight_numpy(gout, x, kh, kw, stride, pad)


def conv2d_grad_input(gout, w, h: int, wd: int, stride: int, pad: int) -> np.ndarray:
    if _backend == "numba":
        return _conv2d_grad_input_numba(gout, w, h, wd, stride, pad)
    return _conv2d_grad_input_numpy(gout, w, h, wd, stride, pad)
