"""Numba-jitted implementations of the hot inner-loop kernels.

Compiled lazily per dtype and cached on disk, so the first call in a fresh
environment pays a one-time compile cost. Loop structure keeps every prange
iteration independent, which makes all kernels deterministic.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, fastmath=True, parallel=True)
def conv2d_forward(x, w, b, stride):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for ni in prange(n):
        for oc in range(cout):
            for i in range(ho):
                i0 = i * stride - 1
                for j in range(wo):
                    j0 = j * stride - 1
                    acc = b[oc]
                    for ic in range(cin):
                        for u in range(3):
                            y = i0 + u
                            if y < 0 or y >= h:
                                continue
                            for v in range(3):
                                xx = j0 + v
                                if xx < 0 or xx >= wd:
                                    continue
                                acc += x[ni, ic, y, xx] * w[oc, ic, u, v]
                    out[ni, oc, i, j] = acc
    return out


@njit(cache=True, fastmath=True, parallel=True)
def conv2d_backward_input(gy, w, stride, h, wd):
    n, cout, ho, wo = gy.shape
    cin = w.shape[1]
    gx = np.zeros((n, cin, h, wd), dtype=gy.dtype)
    for ni in prange(n):
        for oc in range(cout):
            for i in range(ho):
                i0 = i * stride - 1
                for j in range(wo):
                    j0 = j * stride - 1
                    g = gy[ni, oc, i, j]
                    for ic in range(cin):
                        for u in range(3):
                            y = i0 + u
                            if y < 0 or y >= h:
                                continue
                            for v in range(3):
                                xx = j0 + v
                                if xx < 0 or xx >= wd:
                                    continue
                                gx[ni, ic, y, xx] += g * w[oc, ic, u, v]
    return gx


@njit(cache=True, fastmath=True, parallel=True)
def conv2d_backward_weight(x, gy, stride):
    n, cin, h, wd = x.shape
    cout, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    gw = np.zeros((cout, cin, 3, 3), dtype=x.dtype)
    for oc in prange(cout):
        for ni in range(n):
            for i in range(ho):
                i0 = i * stride - 1
                for j in range(wo):
                    j0 = j * stride - 1
                    g = gy[ni, oc, i, j]
                    for ic in range(cin):
                        for u in range(3):
                            y = i0 + u
                            if y < 0 or y >= h:
                                continue
                            for v in range(3):
                                xx = j0 + v
                                if xx < 0 or xx >= wd:
                                    continue
                                gw[oc, ic, u, v] += g * x[ni, ic, y, xx]
    return gw


@njit(cache=True)
def _reflect(i, n):
    # reflect-101: -1 -> 1, n -> n-2
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


@njit(cache=True)
def sep_filter_reflect(img, k):
    h, w = img.shape
    m = k.shape[0]
    r = m // 2
    t = np.empty((h, w), dtype=img.dtype)
    out = np.empty((h, w), dtype=img.dtype)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(m):
                acc += img[i, _reflect(j - r + u, w)] * k[u]
            t[i, j] = acc
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(m):
                acc += t[_reflect(i - r + u, h), j] * k[u]
            out[i, j] = acc
    return out


@njit(cache=True)
def sep_filter_valid(img, k):
    h, w = img.shape
    m = k.shape[0]
    t = np.empty((h, w - m + 1), dtype=img.dtype)
    out = np.empty((h - m + 1, w - m + 1), dtype=img.dtype)
    for i in range(h):
        for j in range(w - m + 1):
            acc = 0.0
            for u in range(m):
                acc += img[i, j + u] * k[u]
            t[i, j] = acc
    for i in range(h - m + 1):
        for j in range(w - m + 1):
            acc = 0.0
            for u in range(m):
                acc += t[i + u, j] * k[u]
            out[i, j] = acc
    return out


_T1 = 0.41421356237309503
_T2 = 2.414213562373095


@njit(cache=True)
def canny_nms(mag, gx, gy):
    h, w = mag.shape
    out = np.zeros((h, w), dtype=mag.dtype)
    for i in range(h):
        for j in range(w):
            c = mag[i, j]
            if c == 0.0:
                continue
            ax = abs(gx[i, j])
            ay = abs(gy[i, j])
            if ay < _T1 * ax:
                di1, dj1, di2, dj2 = 0, 1, 0, -1
            elif ay >= _T2 * ax:
                di1, dj1, di2, dj2 = -1, 0, 1, 0
            elif gx[i, j] * gy[i, j] > 0:
                di1, dj1, di2, dj2 = 1, 1, -1, -1
            else:
                di1, dj1, di2, dj2 = -1, 1, 1, -1
            n1 = 0.0
            y, x = i + di1, j + dj1
            if 0 <= y < h and 0 <= x < w:
                n1 = mag[y, x]
            n2 = 0.0
            y, x = i + di2, j + dj2
            if 0 <= y < h and 0 <= x < w:
                n2 = mag[y, x]
            if c >= n1 and c >= n2:
                out[i, j] = c
    return out


@njit(cache=True)
def hysteresis(strong, weak):
    h, w = strong.shape
    out = np.zeros((h, w), dtype=np.uint8)
    stack = np.empty((h * w, 2), dtype=np.int64)
    top = 0
    for i in range(h):
        for j in range(w):
            if strong[i, j]:
                out[i, j] = 1
                stack[top, 0] = i
                stack[top, 1] = j
                top += 1
    while top > 0:
        top -= 1
        i = stack[top, 0]
        j = stack[top, 1]
        for di in range(-1, 2):
            for dj in range(-1, 2):
                y = i + di
                x = j + dj
                if 0 <= y < h and 0 <= x < w and weak[y, x] and not out[y, x]:
                    out[y, x] = 1
                    stack[top, 0] = y
                    stack[top, 1] = x
                    top += 1
    return out
