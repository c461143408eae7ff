"""Minimal float32 layers with handwritten backprop, plus AdamW.

Only what the identity encoder needs: 3x3 strided convolutions, ReLU,
global average pooling, and affine layers. Convolutions run on the
selected kernel backend (numba or numpy). Layers cache their forward
inputs, so a layer instance belongs to one training thread.
"""
from __future__ import annotations

import numpy as np

from . import backend


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)


class Conv2d:
    """3x3 convolution, padding 1, configurable stride."""

    def __init__(self, name, in_ch, out_ch, stride, rng, weight_scale=None):
        scale = weight_scale if weight_scale is not None else np.sqrt(2.0 / (in_ch * 9))
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(out_ch, in_ch, 3, 3)))
        self.b = Param(f"{name}.b", np.zeros(out_ch))
        self.stride = stride
        self._x = None

    def forward(self, x):
        self._x = x
        return backend.conv2d_forward(x, self.w.value, self.b.value, self.stride)

    def backward(self, gy):
        x = self._x
        gy = np.ascontiguousarray(gy, dtype=np.float32)
        self.w.grad += backend.conv2d_backward_weight(x, gy, self.stride)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        return backend.conv2d_backward_input(gy, self.w.value, self.stride, x.shape[2], x.shape[3])

    def params(self):
        return [self.w, self.b]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, np.float32(0.0))

    def backward(self, gy):
        return np.where(self._mask, gy, np.float32(0.0))

    def params(self):
        return []


class GlobalAvgPool:
    """(N, C, H, W) -> (N, C) spatial mean."""

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, gy):
        n, c, h, w = self._shape
        g = np.broadcast_to(gy[:, :, None, None], (n, c, h, w))
        return np.ascontiguousarray(g, dtype=np.float32) / np.float32(h * w)

    def params(self):
        return []


class Linear:
    def __init__(self, name, in_dim, out_dim, rng, weight_scale=None):
        scale = weight_scale if weight_scale is not None else np.sqrt(2.0 / in_dim)
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(out_dim, in_dim)))
        self.b = Param(f"{name}.b", np.zeros(out_dim))
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, gy):
        gy = np.ascontiguousarray(gy, dtype=np.float32)
        self.w.grad += gy.T @ self._x
        self.b.grad += gy.sum(axis=0)
        return gy @ self.w.value

    def params(self):
        return [self.w, self.b]


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


class AdamW:
    """Adam with decoupled weight decay; biases are not decayed."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not p.name.endswith(".b"):
                update = update + self.weight_decay * p.value
            p.value -= np.float32(self.lr) * update.astype(np.float32)
