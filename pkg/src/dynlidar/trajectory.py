"""Continuous-time platform trajectory.

Poses are ``T_v0``: they map world coordinates into the platform frame.
Between knots the platform moves with a constant body-centric twist, so a
query inside segment ``k`` is ``exp((t - t_k) * twist_k) ∘ P_k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .se3 import Pose, se3_exp, se3_log


class TrajectoryError(ValueError):
    pass


class OutOfRangeError(TrajectoryError):
    def __init__(self, t):
        self.timestamp = t
        super().__init__(f"timestamp {t!r} outside the trajectory extrapolation window")


@dataclass(frozen=True)
class Twist:
    linear: np.ndarray
    angular: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular], axis=-1)


class Trajectory:
    """Piecewise constant-velocity SE(3) trajectory, immutable after construction."""

    def __init__(self, times, poses: Pose):
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.size == 0:
            raise TrajectoryError("trajectory needs at least one knot")
        if np.any(np.diff(times) <= 0):
            raise TrajectoryError("knot timestamps must be strictly increasing")
        R = np.asarray(poses.rotation, dtype=float).reshape(-1, 3, 3)
        p = np.asarray(poses.translation, dtype=float).reshape(-1, 3)
        if len(R) != times.size:
            raise TrajectoryError("one pose per knot required")
        try:
            Pose(R, p).check()
        except ValueError as exc:
            raise TrajectoryError(str(exc)) from None
        self.times = times
        self.rotations = R
        self.translations = p
        if times.size > 1:
            # relative motion P_{k+1} ∘ P_k^{-1}
            rel = Pose(R[1:], p[1:]).compose(Pose(R[:-1], p[:-1]).inverse())
            dt = np.diff(times)
            self.twists = se3_log(rel.rotation, rel.translation) / dt[:, None]
            self._lo = times[0] - dt[0]
            self._hi = times[-1] + dt[-1]
        else:
            self.twists = np.zeros((0, 6))
            self._lo, self._hi = -np.inf, np.inf
        for arr in (self.times, self.rotations, self.translations, self.twists):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.times.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def covers(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t >= self._lo) & (t <= self._hi)

    def _segments(self, t):
        t = np.asarray(t, dtype=float)
        if not np.all(self.covers(t)):
            bad = t[~self.covers(t)] if t.ndim else t
            raise OutOfRangeError(float(np.ravel(bad)[0]))
        seg = np.searchsorted(self.times, t, side="right") - 1
        return t, np.clip(seg, 0, max(self.times.size - 2, 0))

    def pose_at(self, t) -> Pose:
        """Pose(s) at time(s) ``t``; a scalar gives a single pose."""
        t, seg = self._segments(t)
        if self.times.size == 1:
            shape = t.shape
            return Pose(np.broadcast_to(self.rotations[0], shape + (3, 3)).copy(),
                        np.broadcast_to(self.translations[0], shape + (3,)).copy())
        dt = t - self.times[seg]
        dR, dp = se3_exp(dt[..., None] * self.twists[seg])
        R0, p0 = self.rotations[seg], self.translations[seg]
        R = dR @ R0
        p = np.einsum("...ij,...j->...i", dR, p0) + dp
        # knots are returned exactly
        k = np.clip(np.searchsorted(self.times, t), 0, self.times.size - 1)
        hit = self.times[k] == t
        if np.any(hit):
            R = np.where(hit[..., None, None], self.rotations[k], R)
            p = np.where(hit[..., None], self.translations[k], p)
        return Pose(R, p)

    def velocity_at(self, t) -> Twist:
        t, seg = self._segments(t)
        if self.times.size == 1:
            z = np.zeros(t.shape + (3,))
            return Twist(z, z.copy())
        xi = self.twists[seg]
        return Twist(xi[..., :3], xi[..., 3:])

    @classmethod
    def from_twist(cls, times, start: Pose, twist) -> Trajectory:
        """Knots of a constant-twist motion starting from ``start`` at ``times[0]``."""
        times = np.asarray(times, dtype=float)
        dR, dp = se3_exp((times - times[0])[:, None] * np.asarray(twist, dtype=float))
        poses = Pose(dR, dp).compose(start)
        return cls(times, poses)


def transform_to_world(pose: Pose, point_platform) -> np.ndarray:
    """Map platform-frame point(s) back to the world frame (``T_v0^{-1}``)."""
    return pose.apply_inverse(point_platform)


def read_trajectory(path) -> Trajectory:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise TrajectoryError(f"{path}:{lineno}: {exc}") from None
        if rows and vals[0] <= rows[-1][0]:
            raise TrajectoryError(f"{path}:{lineno}: timestamps must be strictly increasing")
        rows.append(vals)
    if not rows:
        raise TrajectoryError(f"{path}: no knots")
    arr = np.array(rows)
    q = arr[:, 4:8]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return Trajectory(arr[:, 0], Pose.from_quaternion(q, arr[:, 1:4]))


def write_trajectory(traj: Trajectory, path) -> None:
    q = Pose(traj.rotations, traj.translations).quaternion()
    lines = ["# t tx ty tz qw qx qy qz  (T_v0: world -> platform)"]
    for t, p, qq in zip(traj.times, traj.translations, q):
        lines.append(" ".join(repr(float(v)) for v in (t, *p, *qq)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
