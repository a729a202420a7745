"""Parameter updates over ParamGroups. Frozen groups are never written."""

import numpy as np

from .layers import ShapeMismatch


def _check(groups, grads):
    if len(groups) != len(grads):
        raise ShapeMismatch("one gradient list per parameter group required")
    for g, gl in zip(groups, grads):
        if gl is None:
            continue
        if len(gl) != len(g.tensors) or any(t.shape != d.shape for t, d in zip(g.tensors, gl)):
            raise ShapeMismatch(f"gradient shapes do not match group {g.name!r}")


def sgd_step(groups, grads, lr):
    """theta <- theta - lr * grad, in place, for trainable groups only."""
    _check(groups, grads)
    for g, gl in zip(groups, grads):
        if not g.trainable or gl is None:
            continue
        for t, d in zip(g.tensors, gl):
            t -= lr * d


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, groups, grads):
        sgd_step(groups, grads, self.lr)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, groups, grads):
        _check(groups, grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for g, gl in zip(groups, grads):
            if not g.trainable or gl is None:
                continue
            for k, (t, d) in enumerate(zip(g.tensors, gl)):
                key = (g.name, k)
                m = self.m.setdefault(key, np.zeros_like(t))
                v = self.v.setdefault(key, np.zeros_like(t))
                m *= self.beta1
                m += (1 - self.beta1) * d
                v *= self.beta2
                v += (1 - self.beta2) * d * d
                t -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, lr):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
