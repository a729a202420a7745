"""Layers with explicit forward caches and manual backward passes.

Convolution tensors are NCHW; dense inputs are (batch, features).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | flatten | softmax
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "relu", "flatten", "softmax"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and (self.n_in <= 0 or self.n_out <= 0):
            raise ValueError(f"{self.kind} needs positive widths")
        if self.kind == "conv2d" and (self.kernel <= 0 or self.stride <= 0):
            raise ValueError("conv2d needs positive kernel and stride")


class Layer:
    kind = ""

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


def _uniform(rng, fan_in, shape, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, gain=np.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = _uniform(rng, n_in, (n_in, n_out), gain)
        self.b = np.zeros(n_out)

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ShapeMismatch(f"dense expects (N, {self.W.shape[0]}), got {x.shape}")
        return x @ self.W + self.b, x

    def backward(self, dy, x):
        return dy @ self.W.T, [x.T @ dy, dy.sum(axis=0)]


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel, stride=1, rng=None, gain=np.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = int(stride)
        self.W = _uniform(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel), gain)
        self.b = np.zeros(c_out)

    @property
    def params(self):
        return [self.W, self.b]

    def output_hw(self, h, w):
        k = self.W.shape[2]
        return (h - k) // self.stride + 1, (w - k) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.W.shape[1]:
            raise ShapeMismatch(f"conv2d expects (N, {self.W.shape[1]}, H, W), got {x.shape}")
        if min(x.shape[2:]) < self.W.shape[2]:
            raise ShapeMismatch("input smaller than kernel")
        x = np.ascontiguousarray(x, dtype=np.float64)
        return kernels.conv2d_forward(x, self.W, self.b, self.stride), x

    def backward(self, dy, x):
        dx, dW, db = kernels.conv2d_backward(x, self.W, np.ascontiguousarray(dy), self.stride)
        return dx, [dW, db]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, []


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        p = softmax(x)
        return p, p

    def backward(self, dy, p):
        return p * (dy - (dy * p).sum(axis=-1, keepdims=True)), []


def build_layer(spec: LayerSpec, rng=None, gain=np.sqrt(2.0)) -> Layer:
    if spec.kind == "dense":
        return Dense(spec.n_in, spec.n_out, rng, gain)
    if spec.kind == "conv2d":
        return Conv2D(spec.n_in, spec.n_out, spec.kernel, spec.stride, rng, gain)
    return {"relu": ReLU, "flatten": Flatten, "softmax": Softmax}[spec.kind]()


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def from_specs(cls, specs, rng, out_gain=1.0):
        layers = []
        last = max((i for i, s in enumerate(specs) if s.kind in ("dense", "conv2d")), default=-1)
        for i, s in enumerate(specs):
            layers.append(build_layer(s, rng, out_gain if i == last else np.sqrt(2.0)))
        return cls(layers)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        grads = []
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, c)
            grads = g + grads
        return dy, grads


@dataclass
class ParamGroup:
    name: str
    module: Sequential
    trainable: bool = True

    @property
    def tensors(self) -> list[np.ndarray]:
        return self.module.params
