"""Stateful layer objects wrapping the primitives in :mod:`.ops`.

A module owns ``params``/``grads``/``buffers`` dicts and caches whatever its
forward pass needs; calling ``backward`` without a preceding forward raises
:class:`~ctbias.errors.StateError`.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import StateError
from . import ops


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def children(self):
        return ()

    def modules(self):
        """This module and every descendant, depth first."""
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads.get(k)
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv(Module):
    def __init__(self, in_ch, out_ch, kernel, ndim, rng, stride=1, padding="same"):
        super().__init__()
        k = ops._ntuple(kernel, ndim)
        fan_in = in_ch * math.prod(k)
        self.params["w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch) + k)
        self.params["b"] = np.zeros(out_ch)
        self.stride = ops._ntuple(stride, ndim)
        self.padding = padding

    def forward(self, x, train=False):
        out, self._cache = ops.conv_forward(x, self.params["w"], self.params["b"], self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = ops.conv_backward(dout, self._take_cache())
        return dx


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train=False):
        out, self._cache = ops.batchnorm_forward(
            x,
            self.params["gamma"],
            self.params["beta"],
            "train" if train else "infer",
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.momentum,
            self.eps,
        )
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = ops.batchnorm_backward(dout, self._take_cache())
        return dx


class Dense(Module):
    def __init__(self, in_features, out_features, rng, zero=False):
        super().__init__()
        std = 0.0 if zero else math.sqrt(2.0 / in_features)
        self.params["w"] = rng.normal(0.0, 1.0, (in_features, out_features)) * std
        self.params["b"] = np.zeros(out_features)

    def forward(self, x, train=False):
        out, self._cache = ops.dense_forward(x, self.params["w"], self.params["b"])
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = ops.dense_backward(dout, self._take_cache())
        return dx


class Activation(Module):
    def __init__(self, kind="relu"):
        super().__init__()
        self.kind = kind

    def forward(self, x, train=False):
        out, self._cache = ops.activation_forward(x, self.kind)
        return out

    def backward(self, dout):
        return ops.activation_backward(dout, self._take_cache())


class Pool(Module):
    def __init__(self, kind="max", factor=2):
        super().__init__()
        self.kind = kind
        self.factor = factor

    def forward(self, x, train=False):
        out, self._cache = ops.pool_forward(x, self.kind, self.factor)
        return out

    def backward(self, dout):
        return ops.pool_backward(dout, self._take_cache())


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        out, self._cache = ops.global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return ops.global_avg_pool_backward(dout, self._take_cache())


class Upsample(Module):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=False):
        out, self._cache = ops.upsample_forward(x, self.factor)
        return out

    def backward(self, dout):
        return ops.upsample_backward(dout, self._take_cache())


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return ((str(i), layer) for i, layer in enumerate(self.layers))

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class ResidualBlock(Module):
    """Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv plus skip.

    A strided 1x1 projection replaces the identity skip when the stride or
    channel count changes.
    """

    def __init__(self, in_ch, out_ch, ndim, rng, stride=1, kernel=3):
        super().__init__()
        stride = ops._ntuple(stride, ndim)
        self.bn1 = BatchNorm(in_ch)
        self.act1 = Activation("relu")
        self.conv1 = Conv(in_ch, out_ch, kernel, ndim, rng, stride=stride)
        self.bn2 = BatchNorm(out_ch)
        self.act2 = Activation("relu")
        self.conv2 = Conv(out_ch, out_ch, kernel, ndim, rng)
        self.proj = None
        if in_ch != out_ch or any(s != 1 for s in stride):
            self.proj = Conv(in_ch, out_ch, 1, ndim, rng, stride=stride)

    def children(self):
        kids = [("bn1", self.bn1), ("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2)]
        if self.proj is not None:
            kids.append(("proj", self.proj))
        return kids

    def forward(self, x, train=False):
        h = self.act1.forward(self.bn1.forward(x, train))
        skip = self.proj.forward(h) if self.proj is not None else x
        h = self.conv1.forward(h)
        h = self.conv2.forward(self.act2.forward(self.bn2.forward(h, train)))
        return h + skip

    def backward(self, dout):
        dh = self.bn2.backward(self.act2.backward(self.conv2.backward(dout)))
        dh = self.conv1.backward(dh)
        if self.proj is not None:
            dh = dh + self.proj.backward(dout)
            return self.bn1.backward(self.act1.backward(dh))
        return self.bn1.backward(self.act1.backward(dh)) + dout
