"""Layers with hand-written forward and backward passes (NHWC tensors)."""

from __future__ import annotations

import numpy as np

from .. import _kernels


class Layer:
    """Base layer: no parameters, identity shape."""

    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv3x3(Layer):
    kind = "Conv3x3"

    def __init__(self, in_channels: int, filters: int, rng, dtype=np.float32):
        super().__init__()
        fan_in = 9 * in_channels
        limit = np.sqrt(6.0 / fan_in)
        self.params["weight"] = rng.uniform(-limit, limit, (3, 3, in_channels, filters)).astype(dtype)
        self.params["bias"] = np.zeros(filters, dtype=dtype)
        self.filters = filters

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h - 2, w - 2, self.filters)

    def forward(self, x, train=False, rng=None):
        self._in_hw = x.shape[1:3]
        cols = _kernels.im2col3(x)
        self._cols = cols if train else None
        w = self.params["weight"].reshape(-1, self.filters)
        return cols @ w + self.params["bias"]

    def backward(self, grad):
        w = self.params["weight"]
        k = w.shape[0] * w.shape[1] * w.shape[2]
        g2 = grad.reshape(-1, self.filters)
        self.grads["weight"] = (self._cols.reshape(-1, k).T @ g2).reshape(w.shape)
        self.grads["bias"] = g2.sum(axis=0)
        dcols = grad @ w.reshape(k, self.filters).T
        return _kernels.col2im3(dcols, *self._in_hw)


class MaxPool2x2(Layer):
    kind = "MaxPool2x2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    def forward(self, x, train=False, rng=None):
        out, arg = _kernels.maxpool2(x)
        self._arg, self._in_hw = arg, x.shape[1:3]
        return out

    def backward(self, grad):
        return _kernels.maxpool2_backward(grad, self._arg, *self._in_hw)


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis except the last."""

    kind = "BatchNorm"

    def __init__(self, channels: int, epsilon: float = 1e-3, momentum: float = 0.99, dtype=np.float32):
        super().__init__()
        self.epsilon = epsilon
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        self._xhat, self._inv_std = xhat, inv_std
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        axes = tuple(range(grad.ndim - 1))
        n = grad.size // grad.shape[-1]
        xhat = self._xhat
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        dxhat = grad * self.params["gamma"]
        return (self._inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) during training."""

    kind = "Dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, units: int, rng, dtype=np.float32):
        super().__init__()
        limit = np.sqrt(6.0 / in_features)
        self.params["weight"] = rng.uniform(-limit, limit, (in_features, units)).astype(dtype)
        self.params["bias"] = np.zeros(units, dtype=dtype)
        self.units = units

    def output_shape(self, in_shape):
        return (self.units,)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = self._x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, rng=None):
        self._positive = x > 0
        return np.where(self._positive, x, x.dtype.type(0))

    def backward(self, grad):
        return grad * self._positive


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=-1, keepdims=True)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))
