"""Stage two: guided post-optimization with dataset aggregation, plus evaluation rollouts.

At each visited state the policy's own action is scored by the change in
predicted state quality it would cause. Low-scoring steps consult the scripted
guide, keep whichever of the two candidates scores higher, and store the pair
for fine-tuning.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .bc import DivergenceDetected, TrainReport, param_checksum
from .geometry import Action
from .nn import make_optimizer, mse_loss, softmax
from .policy import ACTION_HEAD, FRONT, QUALITY_HEAD, Batch, PolicyParams
from .sim import EpisodeTrace, Observation, Simulator, SimState, TraceStep

log = logging.getLogger(__name__)

TIE_TOL = 1e-12
SUCCESS_WINDOW = 10
HIGH_Q = 0.8
LOW_Q = 0.2


class QualityHeadUntrained(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    epsilon: float = 0.0
    epochs: int = 200
    rollouts_per_epoch: int = 4
    max_steps: int = 60
    lr: float = 1e-3
    buffer_capacity: int = 4096
    batch_size: int = 32
    updates_per_epoch: int = 10
    optimizer: str = "sgd"
    # the quality head reads front features, so updating the front shifts q
    update_front: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.max_steps < 1:
            raise ValueError("epochs >= 1 and max_steps >= 1 required")
        if self.buffer_capacity < 1 or self.batch_size < 1 or self.rollouts_per_epoch < 0:
            raise ValueError("buffer_capacity, batch_size >= 1 and rollouts_per_epoch >= 0 required")


class AggregationBuffer:
    """FIFO store of (observation, target action) pairs chosen by the argmax rule."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def push(self, obs: Observation, target: Action, chosen: str, target_reward: float, model_reward: float):
        self.items.append((obs, target.as_vector(), chosen, target_reward, model_reward))

    def batch(self, idx) -> tuple[Batch, np.ndarray]:
        picked = [self.items[i] for i in idx]
        return Batch.from_observations([p[0] for p in picked]), np.stack([p[1] for p in picked])


# -- reward and selection ------------------------------------------------------

def _forward_obs(params: PolicyParams, obs: Observation) -> tuple[Action, float]:
    """Policy action and confidence from one shared encoding."""
    feat, _ = params.encode_batch(Batch.from_observations([obs]))
    out, _ = params.groups[ACTION_HEAD].module.forward(feat)
    logits, _ = params.groups[QUALITY_HEAD].module.forward(feat)
    a = Action.from_vector(out[0] * params.norm.action_std + params.norm.action_mean)
    return a, float(softmax(logits)[0, 1])


def reward(params: PolicyParams, sim: Simulator, state: SimState, a: Action,
           q_now: float | None = None) -> float:
    """q(next observation) - q(current observation); the live state is not advanced."""
    if q_now is None:
        q_now = params.quality(sim.observe(state.frame))
    nxt = sim.transition(state.frame, a)
    return params.quality(sim.observe(nxt)) - q_now


def select_target_action(params: PolicyParams, sim: Simulator, state: SimState, guide_action: Action,
                         model_action: Action | None = None, q_now: float | None = None):
    """Argmax of the reward over {model action, guide action}; ties go to the model.

    Returns (action, chosen, chosen_reward, model_reward).
    """
    obs = None
    if model_action is None or q_now is None:
        obs = sim.observe(state.frame)
        m, q = _forward_obs(params, obs)
        model_action = m if model_action is None else model_action
        q_now = q if q_now is None else q_now
    r_model = reward(params, sim, state, model_action, q_now)
    r_guide = reward(params, sim, state, guide_action, q_now)
    if r_guide - r_model > TIE_TOL:
        return guide_action, "guide", r_guide, r_model
    return model_action, "model", r_model, r_model


# -- rollouts ------------------------------------------------------------------

@dataclass
class GuidedRollout:
    frames: list = field(default_factory=list)
    relabeled: int = 0
    guide_chosen: int = 0
    mean_q: float = 0.0


def guided_rollout(params: PolicyParams, sim: Simulator, start, max_steps: int, epsilon: float,
                   buffer: AggregationBuffer | None = None, probe: bool = True) -> GuidedRollout:
    """Execute the policy from ``start``; with ``probe`` score and relabel low-reward steps."""
    state = SimState(start)
    out = GuidedRollout(frames=[state.frame])
    qs = []
    for _ in range(max_steps):
        obs = sim.observe(state.frame)
        a_model, q_now = _forward_obs(params, obs)
        qs.append(q_now)
        if probe:
            r_model = reward(params, sim, state, a_model, q_now)
            if r_model < epsilon:
                guide = sim.oracle_policy(state)
                target, chosen, r_target, _ = select_target_action(
                    params, sim, state, guide, model_action=a_model, q_now=q_now)
                out.relabeled += 1
                out.guide_chosen += chosen == "guide"
                if buffer is not None:
                    buffer.push(obs, target, chosen, r_target, r_model)
        state, _ = sim.step(state, a_model)
        out.frames.append(state.frame)
    out.mean_q = float(np.mean(qs)) if qs else 0.0
    return out


def post_optimize(params: PolicyParams, sim: Simulator, cfg: GuidanceConfig, seed: int = 0,
                  buffer: AggregationBuffer | None = None, on_epoch=None) -> tuple[PolicyParams, list]:
    """Guided exploration + aggregation fine-tuning of the action head (and front if configured).

    ``on_epoch(epoch, params)`` is called after every epoch's update when given.
    """
    if not params.quality_trained:
        raise QualityHeadUntrained("post-optimization needs a trained quality head")
    names = (FRONT if cfg.update_front else ()) + (ACTION_HEAD,)
    groups = params.group_list(names)
    buffer = buffer if buffer is not None else AggregationBuffer(cfg.buffer_capacity)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    nm = params.norm
    reports = []
    for epoch in range(1, cfg.epochs + 1):
        params.set_trainable(())
        relabeled = guide_chosen = 0
        qs = []
        for r in range(cfg.rollouts_per_epoch):
            rng = np.random.default_rng([seed, epoch, r])
            ro = guided_rollout(params, sim, sim.sample_start(rng), cfg.max_steps, cfg.epsilon, buffer)
            relabeled += ro.relabeled
            guide_chosen += ro.guide_chosen
            qs.append(ro.mean_q)
        params.set_trainable(names)
        losses = []
        if len(buffer):
            rng = np.random.default_rng([seed, epoch, 1 << 20])
            for _ in range(cfg.updates_per_epoch):
                idx = rng.integers(0, len(buffer), size=min(cfg.batch_size, len(buffer)))
                batch, targets = buffer.batch(idx)
                out, cache = params.action_forward(batch)
                loss, dout = mse_loss(out, (targets - nm.action_mean) / nm.action_std)
                if not np.isfinite(loss):
                    raise DivergenceDetected(f"non-finite post-optimization loss at epoch {epoch}")
                grads = params.action_backward(dout, cache, through_front=cfg.update_front)
                opt.step(groups, params.grads_for(grads, names))
                losses.append(loss)
        params.set_trainable(())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "buffer_size": len(buffer), "relabeled": relabeled, "guide_chosen": guide_chosen,
               "mean_q": float(np.mean(qs)) if qs else float("nan")}
        reports.append(row)
        log.info("post-opt epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, params)
    report = TrainReport(rows=reports, checksum=param_checksum(params),
                         info={"stage": "post_opt", "epsilon": cfg.epsilon})
    return params, [report]


# -- evaluation ----------------------------------------------------------------

def classify_trace(qs, labels, window: int = SUCCESS_WINDOW) -> tuple[bool, bool]:
    """(success, overshoot) for one episode's confidence and label sequences."""
    qs = np.asarray(qs, dtype=np.float64)
    labels = np.asarray(labels)
    success = len(qs) >= window and bool(np.all(labels[-window:] == 1) and np.all(qs[-window:] >= HIGH_Q))
    overshoot = False
    high = np.flatnonzero(qs > HIGH_Q)
    if len(high):
        overshoot = bool(np.any(qs[high[0] + 1:] < LOW_Q))
    return success, overshoot


def rollout_eval(policy, sim: Simulator, n_episodes: int, max_steps: int, seed: int = 0,
                 confidence=None, keep_obs: bool = False):
    """Unguided rollouts; returns (traces, summary).

    ``policy`` is a PolicyParams or a callable ``(state, obs) -> Action``.
    ``confidence(obs, frame) -> q`` defaults to the policy's quality head.
    """
    if isinstance(policy, PolicyParams):
        params = policy

        def act(state, obs):
            return params.predict_action(obs)

        if confidence is None:
            def confidence(obs, frame):
                return params.quality(obs)
    else:
        act = policy
    if confidence is None:
        raise ValueError("a confidence function is required for non-network policies")
    traces = []
    for e in range(n_episodes):
        rng = np.random.default_rng([seed, e])
        state = SimState(sim.sample_start(rng))
        tr = EpisodeTrace()
        for _ in range(max_steps):
            obs = sim.observe(state.frame)
            q = float(confidence(obs, state.frame))
            a = act(state, obs)
            tr.steps.append(TraceStep(obs if keep_obs else None, a, sim.ground_truth_label(state.frame), q))
            state, _ = sim.step(state, a)
        tr.final_offset = sim.lateral_offset(state.frame)
        tr.success, tr.overshoot = classify_trace([s.q for s in tr.steps], [s.label for s in tr.steps])
        traces.append(tr)
    n = max(n_episodes, 1)
    summary = {
        "n_episodes": n_episodes,
        "success_rate": sum(t.success for t in traces) / n,
        "overshoot_rate": sum(t.overshoot for t in traces) / n,
        "mean_final_offset": float(np.mean([t.final_offset for t in traces])) if traces else float("nan"),
    }
    return traces, summary


def oracle_controller(sim: Simulator):
    def act(state, obs):
        return sim.oracle_policy(state)

    return act


def label_confidence(sim: Simulator):
    """Ground-truth label used as confidence (for harness self-checks without a model)."""

    def conf(obs, frame):
        return float(sim.ground_truth_label(frame))

    return conf
