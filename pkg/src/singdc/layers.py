"""Stateful layer wrappers around the functional primitives.

A layer caches what its backward pass needs during ``forward`` and adds
parameter gradients into ``Param.grad`` during ``backward``.
"""
import numpy as np

from . import tensor as T
from .tensor import Param


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        kh, kw = kernel
        self.kernel = (kh, kw)
        self.weight = Param(T.kaiming_uniform(rng, (out_channels, in_channels, kh, kw),
                                              in_channels * kh * kw, dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False, rng=None):
        out, self._cache = T.conv2d(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = T.conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        self._cache = None
        return dx


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False, rng=None):
        out, self._cache = T.batchnorm2d(x, self.gamma.value, self.beta.value,
                                         self.running_mean, self.running_var, training)
        return out

    def backward(self, dout):
        dx, dg, db = T.batchnorm2d_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        self._cache = None
        return dx


class Linear:
    def __init__(self, din, dout, rng, dtype=np.float32):
        self.weight = Param(T.kaiming_uniform(rng, (dout, din), din, dtype))
        self.bias = Param(np.zeros(dout, dtype=dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False, rng=None):
        out, self._cache = T.linear(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = T.linear_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        self._cache = None
        return dx
