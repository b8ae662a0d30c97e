"""Runtime layers with forward and backward passes on (N, C, H, W) arrays.

Parameters may be float32 (training/inference), float16 (storage precision,
f32 accumulate), or float64 (gradient checking); compute follows the wider of
input/parameter dtypes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _wide(arr: np.ndarray) -> np.ndarray:
    # f16 params are storage only; everything else computes as-is
    return arr.astype(np.float32) if arr.dtype == np.float16 else arr


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {k: np.zeros_like(_wide(v)) for k, v in self.params.items()}


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.kernel = kernel
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel), np.float32)
        else:
            std = np.sqrt(2.0 / (in_channels * kernel * kernel))
            w = rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)).astype(np.float32)
        self.params = {"w": w, "b": np.zeros(out_channels, np.float32)}

    def forward(self, x, training=False):
        w = _wide(self.params["w"])
        b = _wide(self.params["b"])
        s, p = self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._x = x
        k = w.shape[2]
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # (N,C,OH,OW,k,k)
        self._win_shape = win.shape
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(win.shape[0], win.shape[2], win.shape[3], -1)
        out = cols @ w.reshape(w.shape[0], -1).T + b
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        w = _wide(self.params["w"])
        s = self.stride
        x = self._x
        n, c, hp, wp = x.shape
        oc, _, k, _ = w.shape
        oh, ow = grad.shape[2], grad.shape[3]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                patch = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
                dw[:, :, i, j] = np.tensordot(grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.tensordot(
                    grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        self.grads["w"] = dw
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx


class MaxPool2D(Layer):
    def __init__(self, kernel):
        super().__init__()
        self.kernel = kernel

    def forward(self, x, training=False):
        k = self.kernel
        n, c, h, w = x.shape
        oh, ow = h // k, w // k
        self._in_shape = x.shape
        xc = x[:, :, :oh * k, :ow * k]
        win = xc.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
        self._arg = np.argmax(win, axis=-1)
        return np.max(win, axis=-1)

    def backward(self, grad):
        k = self.kernel
        n, c, h, w = self._in_shape
        oh, ow = grad.shape[2], grad.shape[3]
        dwin = np.zeros((n, c, oh, ow, k * k), dtype=grad.dtype)
        np.put_along_axis(dwin, self._arg[..., None], grad[..., None], axis=-1)
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        dx[:, :, :oh * k, :ow * k] = dwin.reshape(n, c, oh, ow, k, k) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
        return dx


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        if rng is None:
            w = np.zeros((in_dim, out_dim), np.float32)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, out_dim)).astype(np.float32)
        self.params = {"w": w, "b": np.zeros(out_dim, np.float32)}

    def forward(self, x, training=False):
        self._x = x
        return x @ _wide(self.params["w"]) + _wide(self.params["b"])

    def backward(self, grad):
        self.grads["w"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ _wide(self.params["w"]).T


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class BatchNorm2D(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(channels, np.float32), "beta": np.zeros(channels, np.float32)}
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def forward(self, x, training=False):
        gamma = _wide(self.params["gamma"])[None, :, None, None]
        beta = _wide(self.params["beta"])[None, :, None, None]
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
            self._x = x
            self._mu = mu
            self._inv_std = 1.0 / np.sqrt(var + self.eps)
            self._xhat = (x - mu[None, :, None, None]) * self._inv_std[None, :, None, None]
            self._training = True
            return gamma * self._xhat + beta
        self._training = False
        rm = _wide(self.running_mean)[None, :, None, None]
        rv = _wide(self.running_var)[None, :, None, None]
        self._inf_scale = gamma / np.sqrt(rv + self.eps)
        return self._inf_scale * (x - rm) + beta

    def backward(self, grad):
        if not self._training:
            self.grads["gamma"] = np.zeros_like(_wide(self.params["gamma"]))
            self.grads["beta"] = grad.sum(axis=(0, 2, 3))
            return grad * self._inf_scale
        gamma = _wide(self.params["gamma"])
        m = float(grad.shape[0] * grad.shape[2] * grad.shape[3])
        self.grads["gamma"] = (grad * self._xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        dxhat = grad * gamma[None, :, None, None]
        inv = self._inv_std[None, :, None, None]
        xc = self._x - self._mu[None, :, None, None]
        dvar = (dxhat * xc * -0.5 * inv**3).sum(axis=(0, 2, 3))
        dmu = (-dxhat * inv).sum(axis=(0, 2, 3)) + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
        return (dxhat * inv
                + dvar[None, :, None, None] * 2.0 * xc / m
                + dmu[None, :, None, None] / m)


class Flatten(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Unflatten(Layer):
    def __init__(self, chw):
        super().__init__()
        self.chw = tuple(chw)

    def forward(self, x, training=False):
        return x.reshape((x.shape[0],) + self.chw)

    def backward(self, grad):
        return grad.reshape(grad.shape[0], -1)


class Upsample(Layer):
    """Nearest-neighbor resize to a fixed target size (inverse of pooling or
    strided convolution in mirrored decoders)."""

    def __init__(self, target_hw):
        super().__init__()
        self.target_hw = tuple(target_hw)

    def forward(self, x, training=False):
        th, tw = self.target_hw
        h, w = x.shape[2], x.shape[3]
        self._in_hw = (h, w)
        self._yi = np.minimum(np.floor((np.arange(th) + 0.5) * (h / th)).astype(np.int64), h - 1)
        self._xi = np.minimum(np.floor((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64), w - 1)
        return x[:, :, self._yi][:, :, :, self._xi]

    def backward(self, grad):
        h, w = self._in_hw
        dx = np.zeros(grad.shape[:2] + (h, w), dtype=grad.dtype)
        np.add.at(dx, (slice(None), slice(None), self._yi[:, None], self._xi[None, :]), grad)
        return dx
