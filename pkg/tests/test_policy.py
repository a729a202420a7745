import numpy as np
import pytest

from sonoskill.bc import Dataset, TrainConfig, train_quality
from sonoskill.geometry import Action
from sonoskill.nn import Adam, ShapeMismatch, grad_check, mse_loss
from sonoskill.policy import (
    ACTION_HEAD,
    FRONT,
    QUALITY_HEAD,
    ArchConfig,
    Batch,
    InvalidConfig,
    Normalizer,
    PolicyParams,
    init_policy,
)
from sonoskill.diagnostics import TINY_ARCH
from sonoskill.sim import Observation, Simulator, Wrench


def make_obs(rng, hw=64, position=None):
    q = rng.normal(size=4)
    return Observation(rng.uniform(size=(hw, hw)), rng.normal(size=3) if position is None else position,
                       q / np.linalg.norm(q), Wrench(rng.normal(size=3), rng.normal(size=3)))


def test_init_deterministic_and_widths():
    a, b = init_policy(seed=0), init_policy(seed=0)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    assert ArchConfig().concat_width == 96
    assert ArchConfig.full_scale().concat_width == 384
    assert a.n_params == 128809
    with pytest.raises(InvalidConfig):
        ArchConfig(image_hw=3)
    with pytest.raises(InvalidConfig):
        ArchConfig(feature_dim=0)


def test_group_partition_is_disjoint_and_exhaustive():
    p = init_policy(seed=1)
    ids = [id(t) for n in FRONT + (ACTION_HEAD, QUALITY_HEAD) for t in p.groups[n].tensors]
    assert len(ids) == len(set(ids)) == len(p.tensors())


def test_position_blindness():
    rng = np.random.default_rng(0)
    p = init_policy(seed=2)
    p.norm = Normalizer(0.4, 0.2, rng.normal(size=4), rng.uniform(0.5, 2, 4), rng.normal(size=6),
                        rng.uniform(0.5, 2, 6), rng.normal(size=7), rng.uniform(0.5, 2, 7))
    for _ in range(5):
        o = make_obs(rng)
        moved = Observation(o.image, o.position + rng.normal(size=3) * 10, o.orientation, o.wrench)
        assert np.array_equal(p.encode(o), p.encode(moved))
        assert p.predict_action(o) == p.predict_action(moved)
        assert p.quality(o) == p.quality(moved)


def test_golden_features():
    p = init_policy(seed=0)
    o = Observation(np.zeros((64, 64)), np.zeros(3), np.array([1.0, 0, 0, 0]), Wrench(np.zeros(3), np.zeros(3)))
    f = p.encode(o)
    assert f.shape == (96,)
    # zero image and zero wrench meet zero biases, so only the pose block is live
    assert not np.any(f[:32]) and not np.any(f[64:])
    np.testing.assert_allclose(f[32:36], [0.74012657, 1.3465611, 0.0, 0.22506553], atol=1e-8)
    assert np.linalg.norm(f) == pytest.approx(2.8903042886571515, abs=1e-12)


def test_shape_mismatch():
    p = init_policy(seed=0)
    with pytest.raises(ShapeMismatch):
        p.encode(make_obs(np.random.default_rng(0), hw=32))


def test_predictions_deterministic_and_finite():
    rng = np.random.default_rng(3)
    p = init_policy(seed=3)
    o = make_obs(rng)
    a1, a2 = p.predict_action(o), p.predict_action(o)
    assert a1 == a2 and a1.dP.shape == (3,) and a1.dO.shape == (4,)
    assert np.all(np.isfinite(a1.as_vector()))


def test_quality_range_and_normalization():
    rng = np.random.default_rng(4)
    p = init_policy(seed=4)
    for scale in (1.0, 1e3):
        o = make_obs(rng)
        o = Observation(o.image * scale, o.position, o.orientation, Wrench(o.wrench.force * scale, o.wrench.torque))
        probs = p.quality_probs(o)
        assert 0.0 <= probs[1] <= 1.0
        assert abs(probs.sum() - 1.0) <= 1e-12


def test_single_sample_overfit():
    rng = np.random.default_rng(5)
    p = init_policy(seed=5)
    o = make_obs(rng)
    target = Action(np.array([0.004, -0.002, 0.001]), np.array([-0.01, 0.02, 0.0, 0.005]))
    batch = Batch.from_observations([o])
    names = FRONT + (ACTION_HEAD,)
    p.set_trainable(names)
    opt = Adam(1e-3)
    for _ in range(400):
        out, cache = p.action_forward(batch)
        _, dout = mse_loss(out, target.as_vector()[None])
        opt.step(p.group_list(names), p.grads_for(p.action_backward(dout, cache), names))
    np.testing.assert_allclose(p.predict_action(o).as_vector(), target.as_vector(), atol=1e-3)


def test_freezing_front_during_quality_training():
    sim = Simulator()
    traces = [sim.record_demonstration(np.random.default_rng([6, e])) for e in range(6)]
    d = Dataset.from_traces(traces, 64)
    p = init_policy(seed=6)
    before = p.snapshot()
    train_quality(p, d, TrainConfig(epochs=3, batch_size=4))
    after = p.snapshot()
    for n in FRONT + (ACTION_HEAD,):
        assert all(np.array_equal(a, b) for a, b in zip(before[n], after[n]))
    assert not all(np.array_equal(a, b) for a, b in zip(before[QUALITY_HEAD], after[QUALITY_HEAD]))


def test_composite_gradient():
    rng = np.random.default_rng(7)
    p = PolicyParams(TINY_ARCH, seed=7)
    hw = TINY_ARCH.image_hw
    batch = Batch.from_observations([make_obs(rng, hw) for _ in range(3)])
    target = rng.normal(size=(3, 7))
    out, cache = p.action_forward(batch)
    _, dout = mse_loss(out, target)
    grads = p.action_backward(dout, cache)
    names = FRONT + (ACTION_HEAD,)
    params = [t for n in names for t in p.groups[n].tensors]
    analytic = [g for n in names for g in grads[n]]
    err = grad_check(lambda: mse_loss(p.action_forward(batch)[0], target)[0], params, analytic)
    assert err < 1e-4


def test_copy_is_independent():
    p = init_policy(seed=8)
    c = p.copy()
    c.tensors()[0][...] += 1.0
    assert not np.array_equal(p.tensors()[0], c.tensors()[0])
