"""Quaternion/pose arithmetic and the action algebra on probe frames.

Quaternions are stored as float64 arrays ``(w, x, y, z)``. Pose differences
are raw componentwise differences; applying one adds the difference and
renormalizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
DEGENERATE_NORM = 1e-12


class DegenerateQuaternion(ValueError):
    pass


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n <= DEGENERATE_NORM:
        raise DegenerateQuaternion(f"cannot normalize quaternion with norm {n:g}")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n <= DEGENERATE_NORM:
        raise DegenerateQuaternion("rotation axis has zero length")
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def tilt_angle(q) -> float:
    """Angle (rad) between the probe's local z axis and world z."""
    w, x, y, z = q
    c = 1 - 2 * (x * x + y * y)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi < lo):
            raise ValueError("workspace box has hi < lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, center, half_width: float) -> "Box":
        c = np.asarray(center, dtype=np.float64)
        return cls(c - half_width, c + half_width)

    def clamp(self, p: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(p, self.lo), self.hi)

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass(frozen=True)
class ProbeFrame:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        o = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite probe position")
        if abs(np.linalg.norm(o) - 1.0) > UNIT_TOL:
            raise ValueError(f"orientation is not a unit quaternion: {o}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o)

    def __eq__(self, other):
        if not isinstance(other, ProbeFrame):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.orientation, other.orientation
        )

    __hash__ = None


@dataclass(frozen=True)
class Action:
    dP: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dO: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        dp = np.asarray(self.dP, dtype=np.float64).reshape(3)
        do = np.asarray(self.dO, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(do))):
            raise ValueError("non-finite action")
        object.__setattr__(self, "dP", dp)
        object.__setattr__(self, "dO", do)

    @classmethod
    def zero(cls) -> "Action":
        return cls(np.zeros(3), np.zeros(4))

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dP, self.dO])

    def is_zero(self) -> bool:
        return not (np.any(self.dP) or np.any(self.dO))

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return np.array_equal(self.dP, other.dP) and np.array_equal(self.dO, other.dO)

    __hash__ = None


def action_between(prev: ProbeFrame, next: ProbeFrame) -> Action:
    return Action(next.position - prev.position, next.orientation - prev.orientation)


def cap_translation(a: Action, cap: float) -> Action:
    """Scale dP down so its norm does not exceed ``cap``."""
    n = float(np.linalg.norm(a.dP))
    if n <= cap:
        return a
    return Action(a.dP * (cap / n), a.dO)


def apply_action(frame: ProbeFrame, a: Action, workspace: Box) -> ProbeFrame:
    position = workspace.clamp(frame.position + a.dP)
    if not np.any(a.dO):
        # renormalizing an already-unit quaternion can move it by an ulp
        return ProbeFrame(position, frame.orientation)
    summed = frame.orientation + a.dO
    n = float(np.linalg.norm(summed))
    if n <= DEGENERATE_NORM:
        raise DegenerateQuaternion(f"orientation + dO has norm {n:g}")
    if n == 1.0:
        return ProbeFrame(position, summed)
    return ProbeFrame(position, summed / n)
