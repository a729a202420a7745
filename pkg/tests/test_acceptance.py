"""Acceptance criteria 1-7, run at their stated tolerances on the desk configuration.

The desk pipeline (configs/desk.cfg) runs once per session through the CLI; the
criteria then read its artifacts. Each test records a one-line verdict that the
conftest prints after the run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from sonoskill import io
from sonoskill.bc import param_checksum
from sonoskill.cli import main
from sonoskill.diagnostics import GRAD_TOL, LAYER_KINDS, run_all
from sonoskill.geometry import (
    Action,
    Box,
    ProbeFrame,
    action_between,
    apply_action,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
)
from sonoskill.guided import (
    AggregationBuffer,
    _forward_obs,
    guided_rollout,
    reward,
    rollout_eval,
    select_target_action,
)
from sonoskill.nn import _fallback, kernels
from sonoskill.policy import FRONT
from sonoskill.sim import Observation, SimState, Simulator

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
STAGES = ("gen-data", "train-bc", "train-quality", "post-opt")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    timings = {}
    for cmd in STAGES:
        t0 = time.perf_counter()
        code = main([cmd, "--config", str(DESK), "--out", str(out)])
        timings[cmd] = time.perf_counter() - t0
        assert code == 0, f"{cmd} exited {code}"
    cfg = io.load_config(DESK)
    return {"out": out, "cfg": cfg, "sim": Simulator(cfg.phantom, cfg.sim), "t": timings}


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    errs = run_all()
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    covered = set(LAYER_KINDS) <= set(errs) and any(k.startswith("policy.") for k in errs)
    ok = covered and worst < GRAD_TOL and dt < 120
    record(1, ok, f"max_rel_err={worst:.2e} over {len(errs)} checks (< {GRAD_TOL:g}), {dt:.1f}s (< 120s)")
    assert ok, errs


def test_criterion_2_behavior_cloning(desk):
    rows = io.read_rows(desk["out"] / "bc_loss.csv")
    v0, vf = float(rows[0]["val_loss"]), float(rows[-1]["val_loss"])
    epochs = int(rows[-1]["epoch"])
    dt = desk["t"]["train-bc"]
    n_ep = io.read_dataset(desk["out"] / "demos.usdemo").n_episodes
    ok = n_ep == 100 and epochs <= 50 and vf <= 0.1 * v0 and dt < 900
    record(2, ok, f"val_loss {v0:.4g} -> {vf:.4g} (ratio {vf / v0:.3f} <= 0.1) after {epochs} epochs, "
                  f"{n_ep} episodes, {dt:.0f}s (< 900s)")
    assert ok


def test_criterion_3_quality_classifier(desk):
    rows = io.read_rows(desk["out"] / "quality.csv")
    acc = float(rows[-1]["val_accuracy"])
    bc = io.read_checkpoint(desk["out"] / "bc.ckpt")
    q = io.read_checkpoint(desk["out"] / "quality.ckpt")
    frozen = all(np.array_equal(a, b) and a.tobytes() == b.tobytes()
                 for n in FRONT for a, b in zip(bc.groups[n].tensors, q.groups[n].tensors))
    dt = desk["t"]["train-quality"]
    ok = acc >= 0.95 and frozen and q.quality_trained and dt < 600
    record(3, ok, f"val_accuracy={acc:.4f} (>= 0.95), front bit-identical={frozen}, {dt:.0f}s (< 600s)")
    assert ok


def test_criterion_4_overshoot_and_repair(desk):
    cfg, sim = desk["cfg"], desk["sim"]
    t0 = time.perf_counter()
    pre = io.read_checkpoint(desk["out"] / "quality.ckpt")
    post = io.read_checkpoint(desk["out"] / "post.ckpt")
    _, s_pre = rollout_eval(pre, sim, 50, cfg.eval_max_steps, cfg.eval_seed)
    _, s_post = rollout_eval(post, sim, 50, cfg.eval_max_steps, cfg.eval_seed)
    dt = desk["t"]["post-opt"] + time.perf_counter() - t0
    epochs = len(io.read_rows(desk["out"] / "post_opt.csv"))
    sp, op = s_pre["success_rate"], s_pre["overshoot_rate"]
    sq, oq = s_post["success_rate"], s_post["overshoot_rate"]
    reproduced = op > sp or op >= 0.20
    repaired = sq >= 0.80 and oq <= 0.10 and sq > sp
    ok = reproduced and repaired and epochs == 200 and cfg.guide.epsilon == 0 and dt < 1800
    record(4, ok, f"pre success={sp:.2f} overshoot={op:.2f}; post success={sq:.2f} (>= 0.80) "
                  f"overshoot={oq:.2f} (<= 0.10); {epochs} epochs, {dt:.0f}s (< 1800s)")
    assert ok, (s_pre, s_post)


def test_criterion_5_reward_and_selection(desk):
    sim = desk["sim"]
    params = io.read_checkpoint(desk["out"] / "quality.ckpt")
    rng = np.random.default_rng(55)
    worst_gap, worst_zero = np.inf, 0.0
    for _ in range(1000):
        state = SimState(sim.sample_start(rng))
        obs = sim.observe(state.frame)
        model, q = _forward_obs(params, obs)
        guide = sim.oracle_policy(state)
        _, _, r_sel, _ = select_target_action(params, sim, state, guide, model_action=model, q_now=q)
        best = max(reward(params, sim, state, model, q), reward(params, sim, state, guide, q))
        worst_gap = min(worst_gap, r_sel - best)
        worst_zero = max(worst_zero, abs(reward(params, sim, state, Action.zero())))
    identical = True
    for e in range(10):
        start = sim.sample_start(np.random.default_rng([77, e]))
        a = guided_rollout(params, sim, start, 30, 0.0, AggregationBuffer(1000), probe=True)
        b = guided_rollout(params, sim, start, 30, 0.0, None, probe=False)
        identical &= len(a.frames) == len(b.frames) and all(f == g for f, g in zip(a.frames, b.frames))
    ok = worst_gap >= -1e-12 and worst_zero == 0.0 and identical
    record(5, ok, f"min(selected - best)={worst_gap:.2e} (>= -1e-12), max|r(zero)|={worst_zero:g}, "
                  f"probed rollouts bit-identical={identical}")
    assert ok


TINY = """\
episodes = 6
quality_episodes = 10
bc.epochs = 2
bc.optimizer = adam
quality.epochs = 3
quality.optimizer = adam
guide.epochs = 2
guide.rollouts_per_epoch = 1
guide.max_steps = 6
eval_episodes = 2
eval_max_steps = 10
"""


def test_criterion_6_determinism_and_persistence(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in STAGES + ("eval",):
            assert main([cmd, "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
        runs.append(out)
    a, b = runs
    names = sorted(p.name for p in a.iterdir())
    same = names == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)

    d = io.read_dataset(a / "demos.usdemo")
    io.write_dataset(tmp_path / "d2.usdemo", d)
    p = io.read_checkpoint(a / "post.ckpt")
    io.write_checkpoint(tmp_path / "p2.ckpt", p)
    round_trip = ((tmp_path / "d2.usdemo").read_bytes() == (a / "demos.usdemo").read_bytes()
                  and (tmp_path / "p2.ckpt").read_bytes() == (a / "post.ckpt").read_bytes()
                  and param_checksum(io.read_checkpoint(tmp_path / "p2.ckpt")) == param_checksum(p))

    raw = bytearray((a / "post.ckpt").read_bytes())
    raw[len(raw) // 2 + 500] ^= 0x10
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    try:
        io.read_checkpoint(tmp_path / "bad.ckpt")
        detected = False
    except io.ChecksumMismatch:
        detected = True
    exit_code = main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--ckpt", str(tmp_path / "bad.ckpt")])
    ok = same and round_trip and detected and exit_code == 3
    record(6, ok, f"{len(names)} artifacts bit-identical={same}, round trips bit-exact={round_trip}, "
                  f"corruption -> ChecksumMismatch={detected} (exit {exit_code})")
    assert ok


def _naive_conv(x, w, b, stride):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for a in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = x[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    s = b[o]
                    for ch in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                s += patch[ch, ki, kj] * w[o, ch, ki, kj]
                    out[a, o, i, j] = s
    return out


def test_criterion_7_geometry_and_mdp(desk):
    rng = np.random.default_rng(7)
    sim = desk["sim"]

    # quaternion <-> axis-angle and q * conj(q)
    q_err = 0.0
    for _ in range(1000):
        q = quat_normalize(rng.normal(size=4))
        q = q if q[0] >= 0 else -q
        v = q[1:]
        angle = 2 * np.arctan2(np.linalg.norm(v), q[0])
        back = quat_from_axis_angle(v, angle)
        ident = quat_multiply(q, q * [1, -1, -1, -1])
        q_err = max(q_err, np.max(np.abs(back - q)), np.max(np.abs(ident - [1, 0, 0, 0])))

    box = Box(np.full(3, -1.0), np.full(3, 1.0))
    inv_err = 0.0
    for _ in range(1000):
        f = ProbeFrame(rng.uniform(-0.9, 0.9, 3), quat_normalize(rng.normal(size=4)))
        g = ProbeFrame(rng.uniform(-0.9, 0.9, 3), quat_normalize(rng.normal(size=4)))
        out = apply_action(f, action_between(f, g), box)
        inv_err = max(inv_err, np.max(np.abs(out.position - g.position)),
                      np.max(np.abs(out.orientation - g.orientation)))

    params = io.read_checkpoint(desk["out"] / "post.ckpt")
    blind = True
    for _ in range(20):
        o = sim.observe(sim.sample_start(rng))
        moved = Observation(o.image, o.position + rng.normal(scale=0.05, size=3), o.orientation, o.wrench)
        blind &= (np.array_equal(params.encode(o), params.encode(moved))
                  and params.predict_action(o) == params.predict_action(moved)
                  and params.quality(o) == params.quality(moved))

    reached = 0
    for _ in range(100):
        state = SimState(sim.sample_start(rng))
        while not sim.ground_truth_label(state.frame) and state.step_index < sim.config.max_steps:
            state, _ = sim.step(state, sim.oracle_policy(state))
        reached += sim.ground_truth_label(state.frame)

    conv_err = 0.0
    for stride in (1, 2):
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        ref = _naive_conv(x, w, b, stride)
        for impl in (kernels, _fallback):
            conv_err = max(conv_err, np.max(np.abs(impl.conv2d_forward(x, w, b, stride) - ref)))

    ok = q_err <= 1e-12 and inv_err <= 1e-12 and blind and reached == 100 and conv_err <= 1e-12
    record(7, ok, f"quat err={q_err:.1e}, inverse err={inv_err:.1e}, position-blind={blind}, "
                  f"oracle {reached}/100, conv err={conv_err:.1e} (all <= 1e-12)")
    assert ok
