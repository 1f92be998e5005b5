"""Minimal layer zoo for the toy networks.

Everything is float32 NHWC and deterministic: parameter init draws from the
generator passed in, and forward/backward call the selected conv backend.
Each layer caches what its backward pass needs; ``backward`` must follow the
matching ``forward``.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Layer:
    def params(self):
        """List of (name, value, grad) triples; empty for stateless layers."""
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


class Conv2d(Layer):
    """NHWC convolution with (kh, kw, c_in, c_out) weights.

    ``gain`` is a fixed output multiplier with the weight init shrunk by the
    same factor: the initial function is unchanged, but every Adam step moves
    the function ``gain`` times further. Under Adam's scale-invariant updates
    this reproduces a ``gain``-times-larger learning rate without touching
    the optimizer, which keeps small from-scratch backbones trainable under
    a fine-tuning-sized learning rate.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, pad=1, weight_scale=None, rng=None, gain=1.0):
        self.stride = stride
        self.pad = pad
        self.gain = np.float32(gain)
        if weight_scale is None:
            weight_scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        weight_scale /= gain
        rng = rng or np.random.default_rng(0)
        self.w = (rng.standard_normal((kernel, kernel, c_in, c_out)) * weight_scale).astype(np.float32)
        self.b = np.zeros(c_out, dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def forward(self, x, train=False):
        if train:
            self._x = x
        y = kernels.conv2d_forward(x, self.w, self.b, self.stride, self.pad)
        if self.gain != 1.0:
            y *= self.gain
        return y

    def backward(self, gy):
        gy = np.ascontiguousarray(gy if self.gain == 1.0 else gy * self.gain)
        kh, kw = self.w.shape[0], self.w.shape[1]
        self.gw += kernels.conv2d_backward_weight(gy, self._x, kh, kw, self.stride, self.pad)
        self.gb += gy.sum(axis=(0, 1, 2))
        return kernels.conv2d_backward_input(
            gy, self.w, self.stride, self.pad, self._x.shape[1], self._x.shape[2]
        )


class LeakyReLU(Layer):
    def __init__(self, slope=0.1):
        self.slope = np.float32(slope)
        self._mask = None

    def forward(self, x, train=False):
        mask = x >= 0
        if train:
            self._mask = mask
        return np.where(mask, x, self.slope * x)

    def backward(self, gy):
        return np.where(self._mask, gy, self.slope * gy)


class GlobalAvgPool(Layer):
    """(n, h, w, c) -> (n, c)."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        if train:
            self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, gy):
        n, h, w, c = self._shape
        g = np.broadcast_to(gy[:, None, None, :], (n, h, w, c)) / np.float32(h * w)
        return np.ascontiguousarray(g.astype(np.float32))


class Flatten(Layer):
    """(n, h, w, c) -> (n, h*w*c)."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        if train:
            self._shape = x.shape
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))

    def backward(self, gy):
        return np.ascontiguousarray(gy.reshape(self._shape))


class LayerNorm(Layer):
    """Per-sample normalisation over the feature axis of (n, c) inputs.

    No learnable affine. Centering removes the large image-independent
    component of pooled conv features, which would otherwise start embedding
    training inside the collapsed-similarity fixed point.
    """

    def __init__(self, eps=1e-6):
        self.eps = eps
        self._cache = None

    def forward(self, x, train=False):
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        sigma = np.sqrt((centered**2).mean(axis=1, keepdims=True) + self.eps)
        y = centered / sigma
        if train:
            self._cache = (y, sigma)
        return y

    def backward(self, gy):
        y, sigma = self._cache
        mean_g = gy.mean(axis=1, keepdims=True)
        mean_gy = (gy * y).mean(axis=1, keepdims=True)
        return ((gy - mean_g - y * mean_gy) / sigma).astype(gy.dtype)


class Linear(Layer):
    def __init__(self, d_in, d_out, rng=None):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / d_in)
        self.w = (rng.standard_normal((d_in, d_out)) * scale).astype(np.float32)
        self.b = np.zeros(d_out, dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def forward(self, x, train=False):
        if train:
            self._x = x
        return x @ self.w + self.b

    def backward(self, gy):
        self.gw += self._x.T @ gy
        self.gb += gy.sum(axis=0)
        return gy @ self.w.T


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, value, grad in layer.params():
                out.append((f"{i}.{name}", value, grad))
        return out

    def zero_grad(self):
        for _, _, grad in self.params():
            grad[...] = 0

    def state_arrays(self):
        """Ordered parameter values, for checkpointing."""
        return [(name, value) for name, value, _ in self.params()]

    def load_state_arrays(self, arrays):
        own = self.params()
        if len(arrays) != len(own):
            raise ValueError(f"checkpoint has {len(arrays)} tensors, model needs {len(own)}")
        for (name, value, _), (ck_name, ck_value) in zip(own, arrays):
            if name != ck_name or value.shape != ck_value.shape:
                raise ValueError(f"checkpoint tensor {ck_name}{ck_value.shape} does not fit {name}{value.shape}")
            value[...] = ck_value


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.triples = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(v) for _, v, _ in self.triples]
        self.v = [np.zeros_like(v) for _, v, _ in self.triples]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for (_, value, grad), m, v in zip(self.triples, self.m, self.v):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            value -= (self.lr * update).astype(value.dtype)
