import numpy as np
import pytest

from sonoskill.nn import (
    Conv2D,
    Dense,
    Flatten,
    ParamGroup,
    ReLU,
    Sequential,
    ShapeMismatch,
    Softmax,
    cross_entropy,
    grad_check,
    mse_loss,
    sgd_step,
    softmax,
)
from sonoskill.nn import _fallback, kernels


def naive_conv(x, w, b, stride):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for a in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    s = b[o]
                    for ch in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                s += x[a, ch, i * stride + ki, j * stride + kj] * w[o, ch, ki, kj]
                    out[a, o, i, j] = s
    return out


def test_dense_identity():
    d = Dense(3, 3)
    d.W[:] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(d.forward(x)[0], x)


def test_relu_example():
    y, _ = ReLU().forward(np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(y, [0, 0, 2])


@pytest.mark.parametrize("impl", [kernels, _fallback], ids=["selected", "numpy"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive_loop(impl, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(impl.conv2d_forward(x, w, b, stride), naive_conv(x, w, b, stride), atol=1e-12, rtol=0)


def test_conv_single_channel_5x5():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 5, 5))
    c = Conv2D(1, 1, 3, 1, rng)
    y, _ = c.forward(x)
    assert y.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(y, naive_conv(x, c.W, c.b, 1), atol=1e-12, rtol=0)


def test_backends_agree_on_backward():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 9, 9))
    w = rng.normal(size=(4, 2, 3, 3))
    dy = rng.normal(size=(3, 4, 4, 4))
    for got, ref in zip(kernels.conv2d_backward(x, w, dy, 2), _fallback.conv2d_backward(x, w, dy, 2)):
        np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        Dense(3, 2).forward(np.zeros((1, 4)))
    with pytest.raises(ShapeMismatch):
        Conv2D(2, 1, 3).forward(np.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros(2), np.zeros(3))


def test_mse_examples():
    assert mse_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0
    loss, grad = mse_loss([1.0, 2.0], [0.0, 0.0])
    assert loss == 2.5
    np.testing.assert_allclose(grad, [1.0, 2.0])


def test_mse_symmetric_nonnegative():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
    assert mse_loss(a, b)[0] == mse_loss(b, a)[0] > 0


def _central(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(4)
    p, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    _, g = mse_loss(p, t)
    num = _central(lambda z: mse_loss(z, t)[0], p)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([0.0, 0.0]), 1)[0] == pytest.approx(np.log(2), abs=1e-12)
    assert cross_entropy(np.array([10.0, -10.0]), 0)[0] < 1e-8
    loss, g = cross_entropy(np.array([1000.0, -1000.0]), 1)
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    z = rng.normal(size=2)
    _, g = cross_entropy(z, 1)
    np.testing.assert_allclose(g, softmax(z) - np.array([0.0, 1.0]), atol=1e-15)
    num = _central(lambda v: cross_entropy(v, 1)[0], z)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)
    zb, yb = rng.normal(size=(6, 2)), np.array([0, 1, 1, 0, 1, 0])
    w = np.array([0.3, 1.7])
    _, gb = cross_entropy(zb, yb, w)
    np.testing.assert_allclose(gb, _central(lambda v: cross_entropy(v, yb, w)[0], zb), rtol=1e-6, atol=1e-9)


def test_softmax_normalized():
    p = softmax(np.random.default_rng(6).normal(size=(50, 2)) * 30)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_sgd_step_examples():
    g_train = ParamGroup("a", Sequential([Dense(1, 1)]))
    g_frozen = ParamGroup("b", Sequential([Dense(1, 1)]), trainable=False)
    g_train.tensors[0][:] = 1.0
    frozen_before = [t.copy() for t in g_frozen.tensors]
    sgd_step([g_train, g_frozen], [[np.full((1, 1), 2.0), np.zeros(1)], [np.ones((1, 1)), np.ones(1)]], 0.001)
    assert g_train.tensors[0][0, 0] == 1.0 - 0.001 * 2.0 == 0.998
    assert all(np.array_equal(a, b) for a, b in zip(g_frozen.tensors, frozen_before))
    before = [t.copy() for t in g_train.tensors]
    sgd_step([g_train], [[np.zeros((1, 1)), np.zeros(1)]], 0.001)
    assert all(np.array_equal(a, b) for a, b in zip(g_train.tensors, before))
    with pytest.raises(ShapeMismatch):
        sgd_step([g_train], [[np.zeros((2, 1)), np.zeros(1)]], 0.001)


def _check_module(model, x, loss_of):
    def f():
        return loss_of(model.forward(x)[0])[0]

    out, caches = model.forward(x)
    _, dout = loss_of(out)
    _, grads = model.backward(dout, caches)
    return grad_check(f, model.params, grads)


def test_grad_check_linear_mse():
    rng = np.random.default_rng(7)
    model = Sequential([Dense(4, 3, rng)])
    t = rng.normal(size=(5, 3))
    assert _check_module(model, rng.normal(size=(5, 4)), lambda y: mse_loss(y, t)) < 1e-9


def test_grad_check_two_layer_relu():
    rng = np.random.default_rng(0)
    model = Sequential([Dense(4, 8, rng), ReLU(), Dense(8, 2, rng)])
    t = rng.normal(size=(6, 2))
    assert _check_module(model, rng.normal(size=(6, 4)), lambda y: mse_loss(y, t)) < 1e-4


def test_grad_check_conv_dense_cross_entropy():
    rng = np.random.default_rng(8)
    model = Sequential([Conv2D(1, 3, 3, 2, rng), ReLU(), Flatten(), Dense(3 * 3 * 3, 2, rng)])
    labels = np.array([0, 1, 1])
    assert _check_module(model, rng.normal(size=(3, 1, 7, 7)), lambda y: cross_entropy(y, labels)) < 1e-4


def test_grad_check_softmax_layer():
    rng = np.random.default_rng(9)
    model = Sequential([Dense(3, 4, rng), Softmax()])
    t = softmax(rng.normal(size=(4, 4)))
    assert _check_module(model, rng.normal(size=(4, 3)), lambda y: mse_loss(y, t)) < 1e-4


def test_input_gradient_through_conv():
    rng = np.random.default_rng(10)
    c = Conv2D(2, 2, 3, 2, rng)
    x = rng.normal(size=(2, 2, 7, 7))
    t = rng.normal(size=(2, 2, 3, 3))
    y, cache = c.forward(x)
    dx, _ = c.backward(mse_loss(y, t)[1], cache)
    num = _central(lambda z: mse_loss(c.forward(z)[0], t)[0], x)
    np.testing.assert_allclose(dx, num, rtol=1e-5, atol=1e-8)
