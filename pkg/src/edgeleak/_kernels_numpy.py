"""Pure-NumPy implementations of the hot inner-loop kernels.

This is the fallback path selected by ``EDGELEAK_NO_NUMBA=1`` (or when numba
is not importable) and the reference the numba kernels are checked against.
Convolutions go through im2col views so the heavy lifting stays in BLAS.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# 3x3 kernels with one pixel of zero padding throughout; that is the only
# convolution geometry the encoder and the edge nets use.
_PAD = 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """3x3 convolution, zero padding 1. x: (N,C,H,W), w: (O,C,3,3), b: (O,)."""
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("ncijuv,ocuv->noij", win, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray, stride: int, h: int, wd: int) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. its input, for input size (h, wd)."""
    n = gy.shape[0]
    cin = w.shape[1]
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, cin, h + 2 * _PAD, wd + 2 * _PAD), dtype=gy.dtype)
    colg = np.einsum("noij,ocuv->ncijuv", gy, w, optimize=True)
    for u in range(3):
        for v in range(3):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += colg[..., u, v]
    return np.ascontiguousarray(gxp[:, :, _PAD:_PAD + h, _PAD:_PAD + wd])


def conv2d_backward_weight(x: np.ndarray, gy: np.ndarray, stride: int) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. the weight tensor."""
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(np.einsum("ncijuv,noij->ocuv", win, gy, optimize=True))


def sep_filter_reflect(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation with reflect-101 borders; output size = input size."""
    r = k.shape[0] // 2
    p = np.pad(img, r, mode="reflect")
    t = sliding_window_view(p, k.shape[0], axis=1) @ k
    return np.ascontiguousarray(sliding_window_view(t, k.shape[0], axis=0) @ k)


def sep_filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered windows."""
    t = sliding_window_view(img, k.shape[0], axis=1) @ k
    return np.ascontiguousarray(sliding_window_view(t, k.shape[0], axis=0) @ k)


# tan(22.5 deg) and tan(67.5 deg): sector bounds for gradient quantization.
_T1 = 0.41421356237309503
_T2 = 2.414213562373095


def canny_nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression of gradient magnitude along the gradient.

    Directions are quantized to 4 sectors by slope comparison (no trig) so
    the numba kernel can reproduce the decisions bit-for-bit. Row index
    grows downward, so the 45 deg sector (gx*gy > 0) compares the main
    diagonal neighbours. Out-of-bounds neighbours count as magnitude 0.
    """
    m = np.pad(mag, 1)
    c = m[1:-1, 1:-1]
    east, west = m[1:-1, 2:], m[1:-1, :-2]
    north, south = m[:-2, 1:-1], m[2:, 1:-1]
    nw, se = m[:-2, :-2], m[2:, 2:]
    ne, sw = m[:-2, 2:], m[2:, :-2]

    ax, ay = np.abs(gx), np.abs(gy)
    d0 = ay < _T1 * ax
    d2 = ay >= _T2 * ax
    diag = ~(d0 | d2)
    d1 = diag & (gx * gy > 0)
    d3 = diag & ~d1

    keep = (
        (d0 & (c >= east) & (c >= west))
        | (d1 & (c >= se) & (c >= nw))
        | (d2 & (c >= north) & (c >= south))
        | (d3 & (c >= ne) & (c >= sw))
    )
    return np.where(keep, c, 0.0)


def hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Grow strong edges through 8-connected weak pixels until a fixpoint."""
    out = strong.astype(bool).copy()
    weak = weak.astype(bool)
    while True:
        g = np.zeros_like(out)
        g[1:, :] |= out[:-1, :]
        g[:-1, :] |= out[1:, :]
        g[:, 1:] |= out[:, :-1]
        g[:, :-1] |= out[:, 1:]
        g[1:, 1:] |= out[:-1, :-1]
        g[:-1, :-1] |= out[1:, 1:]
        g[1:, :-1] |= out[:-1, 1:]
        g[:-1, 1:] |= out[1:, :-1]
        new = out | (g & weak)
        if np.array_equal(new, out):
            return new.astype(np.uint8)
        out = new
