"""Synthetic phantom-scanning environment.

A flat tissue surface with an ellipsoidal target embedded below it. The probe
images a plane perpendicular to its axis at the nominal target depth, so the
target cross-section shifts in the image with lateral offset and tilt. Contact
is a linear spring along the surface normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import (
    Action,
    Box,
    ProbeFrame,
    apply_action,
    cap_translation,
    quat_from_axis_angle,
    quat_to_matrix,
    tilt_angle,
)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
TRUNCATED = "truncated"
HOLD = "hold"


class EpisodeDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    image_hw: int = 64
    pixel_pitch: float = 0.0015
    edge_width: float = 0.06
    background: float = 0.2
    target_intensity: float = 0.8
    speckle_low: float = 0.8
    speckle_high: float = 1.2
    nominal_penetration: float = 0.005
    probe_length: float = 0.1
    tau_pos: float = 0.005
    tau_ang_deg: float = 5.0
    step_cap: float = 0.01
    workspace_half_width: float = 0.15
    r_in: float = 0.01
    r_out: float = 0.03
    start_tilt_deg: float = 8.0
    start_pen_low: float = 0.001
    start_pen_high: float = 0.008
    k_p: float = 3.0
    k_z: float = 0.5
    k_o: float = 0.5
    orient_cap: float = 0.05
    max_steps: int = 200

    def __post_init__(self):
        if self.image_hw < 8:
            raise ValueError("image_hw must be >= 8")
        if not (0 <= self.r_in <= self.r_out):
            raise ValueError("need 0 <= r_in <= r_out")
        for name in ("pixel_pitch", "tau_pos", "tau_ang_deg", "step_cap", "k_p", "k_z", "k_o"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def tau_ang(self) -> float:
        return np.deg2rad(self.tau_ang_deg)


@dataclass(frozen=True)
class Phantom:
    surface_height: float = 0.0
    target_center: tuple = (0.0, 0.0, -0.045)
    target_radii: tuple = (0.012, 0.009, 0.01)
    stiffness: float = 200.0
    speckle_seed: int = 0

    def __post_init__(self):
        c = np.asarray(self.target_center, dtype=np.float64)
        r = np.asarray(self.target_radii, dtype=np.float64)
        if c.shape != (3,) or r.shape != (3,):
            raise ValueError("target_center and target_radii must be 3-vectors")
        if c[2] >= self.surface_height:
            raise ValueError("target must lie below the surface")
        if np.any(r <= 0) or self.stiffness <= 0:
            raise ValueError("radii and stiffness must be positive")
        object.__setattr__(self, "target_center", tuple(float(v) for v in c))
        object.__setattr__(self, "target_radii", tuple(float(v) for v in r))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.target_center)

    @property
    def radii(self) -> np.ndarray:
        return np.asarray(self.target_radii)


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass(frozen=True)
class Observation:
    image: np.ndarray  # (H, W) in [0, 1]
    position: np.ndarray
    orientation: np.ndarray
    wrench: Wrench


@dataclass(frozen=True)
class SimState:
    frame: ProbeFrame
    step_index: int = 0


@dataclass
class TraceStep:
    obs: Observation
    action: Action
    label: int
    q: float = float("nan")


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    final_offset: float = float("nan")
    success: bool = False
    overshoot: bool = False

    def __len__(self):
        return len(self.steps)


class Simulator:
    """Bundles a phantom with its configuration; all methods are pure."""

    def __init__(self, phantom: Phantom | None = None, config: SimConfig | None = None):
        self.phantom = phantom or Phantom()
        self.config = config or SimConfig()
        ph, cfg = self.phantom, self.config
        self.workspace = Box.around(ph.center, cfg.workspace_half_width)
        self.target_position = np.array(
            [ph.center[0], ph.center[1], ph.surface_height - cfg.nominal_penetration]
        )
        self.imaging_depth = float(self.target_position[2] - ph.center[2])
        n = cfg.image_hw
        offs = (np.arange(n) - (n - 1) / 2.0) * cfg.pixel_pitch
        self._u = np.broadcast_to(offs[None, :], (n, n))  # column -> probe x
        self._v = np.broadcast_to(offs[:, None], (n, n))  # row -> probe y

    @cached_property
    def _speckle(self) -> tuple[np.ndarray, float, float]:
        cfg = self.config
        extent = 2 * cfg.workspace_half_width + cfg.image_hw * cfg.pixel_pitch * 2
        m = int(np.ceil(extent / cfg.pixel_pitch)) + 1
        rng = np.random.default_rng(self.phantom.speckle_seed)
        tex = rng.uniform(cfg.speckle_low, cfg.speckle_high, size=(m, m))
        x0 = self.phantom.center[0] - extent / 2
        y0 = self.phantom.center[1] - extent / 2
        return tex, x0, y0

    # -- observation model ---------------------------------------------------

    def contact_wrench(self, frame: ProbeFrame) -> Wrench:
        pen = self.phantom.surface_height - frame.position[2]
        if pen <= 0:
            return Wrench(np.zeros(3), np.zeros(3))
        fn = self.phantom.stiffness * pen
        force = np.array([0.0, 0.0, fn])
        # normal force at the tip, moment about the sensor one probe length up the axis
        axis = quat_to_matrix(frame.orientation)[:, 2] * -1.0
        torque = self.config.probe_length * np.cross(axis, force)
        return Wrench(force, torque)

    def render_image(self, frame: ProbeFrame) -> np.ndarray:
        cfg, ph = self.config, self.phantom
        R = quat_to_matrix(frame.orientation)
        e1, e2, e3 = R[:, 0], R[:, 1], R[:, 2]
        origin = frame.position - self.imaging_depth * e3
        rel = origin - ph.center
        # world coordinates of every pixel, relative to the target center
        wx = rel[0] + self._u * e1[0] + self._v * e2[0]
        wy = rel[1] + self._u * e1[1] + self._v * e2[1]
        wz = rel[2] + self._u * e1[2] + self._v * e2[2]
        r = ph.radii
        rho = np.sqrt((wx / r[0]) ** 2 + (wy / r[1]) ** 2 + (wz / r[2]) ** 2)
        alpha = np.clip((1.0 - rho) / cfg.edge_width + 0.5, 0.0, 1.0)
        base = cfg.background + (cfg.target_intensity - cfg.background) * alpha
        tex, x0, y0 = self._speckle
        m = tex.shape[0]
        ix = np.clip(((wx + ph.center[0] - x0) / cfg.pixel_pitch).astype(np.int64), 0, m - 1)
        iy = np.clip(((wy + ph.center[1] - y0) / cfg.pixel_pitch).astype(np.int64), 0, m - 1)
        return np.clip(base * tex[iy, ix], 0.0, 1.0)

    def lateral_offset(self, frame: ProbeFrame) -> float:
        d = frame.position[:2] - self.phantom.center[:2]
        return float(np.hypot(d[0], d[1]))

    def in_contact(self, frame: ProbeFrame) -> bool:
        return bool(frame.position[2] < self.phantom.surface_height)

    def ground_truth_label(self, frame: ProbeFrame) -> int:
        ok = (
            self.lateral_offset(frame) < self.config.tau_pos
            and tilt_angle(frame.orientation) < self.config.tau_ang
            and self.in_contact(frame)
        )
        return int(ok)

    def observe(self, frame: ProbeFrame) -> Observation:
        return Observation(
            image=self.render_image(frame),
            position=frame.position.copy(),
            orientation=frame.orientation.copy(),
            wrench=self.contact_wrench(frame),
        )

    # -- dynamics --------------------------------------------------------------

    def sample_start(self, rng: np.random.Generator) -> ProbeFrame:
        cfg, ph = self.config, self.phantom
        radius = rng.uniform(cfg.r_in, cfg.r_out)
        heading = rng.uniform(0.0, 2 * np.pi)
        pen = rng.uniform(cfg.start_pen_low, cfg.start_pen_high)
        tilt_dir = rng.uniform(0.0, 2 * np.pi)
        tilt = rng.uniform(0.0, np.deg2rad(cfg.start_tilt_deg))
        position = np.array(
            [
                ph.center[0] + radius * np.cos(heading),
                ph.center[1] + radius * np.sin(heading),
                ph.surface_height - pen,
            ]
        )
        q = quat_from_axis_angle([np.cos(tilt_dir), np.sin(tilt_dir), 0.0], tilt)
        return ProbeFrame(position, q)

    def transition(self, frame: ProbeFrame, a: Action) -> ProbeFrame:
        return apply_action(frame, cap_translation(a, self.config.step_cap), self.workspace)

    def step(self, state: SimState, a: Action) -> tuple[SimState, Observation]:
        frame = self.transition(state.frame, a)
        return SimState(frame, state.step_index + 1), self.observe(frame)

    # -- scripted expert -------------------------------------------------------

    def oracle_action(self, frame: ProbeFrame, stop: bool = True) -> Action:
        """Proportional step toward the centered vertical pose.

        With ``stop`` the zero action is returned once the frame is acceptable.
        """
        cfg = self.config
        if stop and self.ground_truth_label(frame):
            return Action.zero()
        err = self.target_position - frame.position
        dp = np.array([cfg.k_p * err[0], cfg.k_p * err[1], cfg.k_z * err[2]])
        n = np.linalg.norm(dp)
        if n > cfg.step_cap:
            dp *= cfg.step_cap / n
        do = cfg.k_o * (IDENTITY_QUAT - frame.orientation)
        n = np.linalg.norm(do)
        if n > cfg.orient_cap:
            do *= cfg.orient_cap / n
        return Action(dp, do)

    def oracle_policy(self, state: SimState) -> Action:
        return self.oracle_action(state.frame)

    def record_demonstration(
        self,
        rng: np.random.Generator,
        mode: str = TRUNCATED,
        hold_steps: int = 10,
        max_steps: int | None = None,
    ) -> EpisodeTrace:
        if mode not in (TRUNCATED, HOLD):
            raise ValueError(f"unknown truncation mode {mode!r}")
        max_steps = self.config.max_steps if max_steps is None else max_steps
        state = SimState(self.sample_start(rng))
        trace = EpisodeTrace()
        obs = self.observe(state.frame)
        for _ in range(max_steps + 1):
            if self.ground_truth_label(state.frame):
                break
            a = self.oracle_policy(state)
            trace.steps.append(TraceStep(obs, a, 0))
            state, obs = self.step(state, a)
        else:
            raise EpisodeDiverged(f"no acceptable frame within {max_steps} steps")
        if mode == TRUNCATED:
            # recording stops at acquisition; the demonstrator is still moving
            trace.steps.append(TraceStep(obs, self.oracle_action(state.frame, stop=False), 1))
        else:
            zero = Action.zero()
            trace.steps.append(TraceStep(obs, zero, 1))
            for _ in range(hold_steps):
                state, obs = self.step(state, zero)
                trace.steps.append(TraceStep(obs, zero, 1))
        trace.final_offset = self.lateral_offset(state.frame)
        trace.success = True
        return trace
