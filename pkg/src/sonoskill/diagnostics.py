"""Finite-difference gradient checks over every layer kind and the policy composites."""

from __future__ import annotations

import numpy as np

from .nn import Conv2D, Dense, Flatten, ReLU, Sequential, Softmax, cross_entropy, grad_check, mse_loss
from .policy import ACTION_HEAD, FRONT, QUALITY_HEAD, ArchConfig, Batch, PolicyParams

GRAD_TOL = 1e-4
LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "softmax")

# small enough that perturbing every parameter stays fast
TINY_ARCH = ArchConfig(image_hw=9, conv_channels=(2,), conv_kernel=3, conv_stride=2, feature_dim=3,
                       pose_hidden=4, force_hidden=4, action_hidden=(4,), quality_hidden=(4,))


def _module_check(model: Sequential, x, loss_of, flip: float) -> float:
    x = x.copy()

    def f():
        return loss_of(model.forward(x)[0])[0]

    out, caches = model.forward(x)
    _, dout = loss_of(out)
    dx, grads = model.backward(dout, caches)
    analytic = [flip * g for g in grads] + [flip * dx]
    return grad_check(f, model.params + [x], analytic)


def layer_checks(flip: float = 1.0) -> dict:
    """One entry per layer kind; each wraps the layer so its input gradient is exercised."""
    rng = np.random.default_rng(0)
    t = rng.normal(size=(4, 3))
    mse = lambda y, t=t: mse_loss(y, t)  # noqa: E731
    out = {
        "dense": _module_check(Sequential([Dense(5, 3, rng)]), rng.normal(size=(4, 5)), mse, flip),
        "conv2d": _module_check(
            Sequential([Conv2D(2, 3, 3, 2, rng)]), rng.normal(size=(2, 2, 7, 7)),
            lambda y, t=rng.normal(size=(2, 3, 3, 3)): mse_loss(y, t), flip),
        "relu": _module_check(Sequential([Dense(5, 3, rng), ReLU()]), rng.normal(size=(4, 5)), mse, flip),
        "flatten": _module_check(
            Sequential([Flatten(), Dense(12, 3, rng)]), rng.normal(size=(4, 3, 2, 2)), mse, flip),
        "softmax": _module_check(
            Sequential([Dense(5, 3, rng), Softmax()]), rng.normal(size=(4, 5)), mse, flip),
    }
    return out


def _policy_check(head: str, flip: float) -> float:
    rng = np.random.default_rng(1)
    p = PolicyParams(TINY_ARCH, seed=3)
    n = 3
    hw = TINY_ARCH.image_hw
    q = rng.normal(size=(n, 4))
    batch = Batch(rng.uniform(size=(n, hw, hw)), q / np.linalg.norm(q, axis=1, keepdims=True),
                  rng.normal(size=(n, 6)))
    names = FRONT + (head,)
    if head == ACTION_HEAD:
        target = rng.normal(size=(n, 7))
        fwd, bwd = p.action_forward, p.action_backward

        def loss_of(y):
            return mse_loss(y, target)
    else:
        labels = np.array([0, 1, 1])
        fwd, bwd = p.quality_forward, p.quality_backward

        def loss_of(y):
            return cross_entropy(y, labels)

    out, cache = fwd(batch)
    _, dout = loss_of(out)
    grads = bwd(dout, cache, through_front=True)
    params = [t for nm in names for t in p.groups[nm].tensors]
    analytic = [flip * g for nm in names for g in grads[nm]]
    return grad_check(lambda: loss_of(fwd(batch)[0])[0], params, analytic)


def composite_checks(flip: float = 1.0) -> dict:
    return {"policy.action": _policy_check(ACTION_HEAD, flip),
            "policy.quality": _policy_check(QUALITY_HEAD, flip)}


def run_all(fault: bool = False) -> dict:
    """Worst relative error per check; ``fault`` flips analytic signs to prove the checker bites."""
    flip = -1.0 if fault else 1.0
    return {**layer_checks(flip), **composite_checks(flip)}
