"""Motion-compensated freespace check.

For a world point ``q`` and laser ``l`` the lateral offset of ``q`` from the
laser's ray at time ``t`` is the (y, z) part of
``T_lh · T_hv(t) · T_v0(t) · q``. Minimising it over ``t`` (Gauss-Newton) and
walking over neighbouring lasers in elevation order gives the reference ray
passing nearest to ``q``; the side of ``q``'s surface plane on which that
ray's endpoint lies decides whether ``q`` was seen through.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .compare import NormalCloud
from .scan import Label, LabelImage, LaserRig, LidarScan, PointCloud, hub_rotation
from .trajectory import Trajectory

log = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """Query point (numerically) on the hub rotation axis."""


class FreespaceVerdict(Enum):
    INSIDE = "inside"
    BORDER = "border"
    OUTSIDE = "outside"


@dataclass(frozen=True)
class FreespaceConfig:
    border_tol: float = 0.5
    gn_tol: float = 1e-7
    gn_max_iter: int = 20
    forward_gap: int = 1

    def __post_init__(self):
        if not self.border_tol >= 0:
            raise ValueError("border_tol must be non-negative")
        if self.gn_max_iter < 1 or not self.gn_tol > 0:
            raise ValueError("invalid Gauss-Newton settings")
        if self.forward_gap < 1:
            raise ValueError("forward_gap must be >= 1")


@dataclass(frozen=True)
class Measurement:
    laser: int
    firing: int
    timestamp: float
    range: float
    valid: bool


@dataclass(frozen=True)
class RaySolveResult:
    laser: int
    time: float
    residual: float
    measurement: Measurement
    iterations: int


AXIS_EPS = 1e-6


def _laser_frame(q, lasers, t, rig: LaserRig, traj: Trajectory, t_start, jacobian=False):
    """Point(s) in the laser frame, optionally with their time derivative."""
    pose = traj.pose_at(t)
    x_v = pose.apply(q)
    R_hv = hub_rotation(rig.omega * (t - t_start))
    x_h = np.einsum("...ij,...j->...i", R_hv, x_v)
    ext = rig.extrinsics
    R_lh = ext.rotation[lasers]
    x_l = np.einsum("...ij,...j->...i", R_lh, x_h) + ext.translation[lasers]
    if not jacobian:
        return x_l, None, x_h
    vel = traj.velocity_at(t)
    xdot_v = np.cross(vel.angular, x_v) + vel.linear
    xdot_h = np.einsum("...ij,...j->...i", R_hv, xdot_v)
    xdot_h = xdot_h - rig.omega * np.stack(
        [-x_h[..., 1], x_h[..., 0], np.zeros_like(x_h[..., 0])], axis=-1)
    xdot_l = np.einsum("...ij,...j->...i", R_lh, xdot_h)
    return x_l, xdot_l, x_h


def ray_residual(q0, laser, t, rig: LaserRig, traj: Trajectory, t_start: float = 0.0):
    """Lateral offset ``e(t)`` (laser-frame y, z) of ``q0`` from laser ``laser``'s ray.

    ``t_start`` is the time at which the hub angle is zero (the reference
    scan start). Broadcasts over ``q0`` (..., 3), ``laser`` and ``t``.
    """
    q0 = np.asarray(q0, dtype=float)
    laser = np.asarray(laser)
    t = np.asarray(t, dtype=float)
    shape = np.broadcast_shapes(q0.shape[:-1], laser.shape, t.shape)
    q0 = np.broadcast_to(q0, shape + (3,))
    laser = np.broadcast_to(laser, shape)
    t = np.broadcast_to(t, shape)
    x_l, _, _ = _laser_frame(q0, laser, t, rig, traj, t_start)
    return x_l[..., 1:]


def _time_window(scan: LidarScan, traj: Trajectory):
    t0, t1 = scan.span
    half = 0.5 * scan.rig.revolution_period
    lo, hi = t0 - half, t1 + half
    # stay within the trajectory's extrapolation window
    if len(traj) > 1:
        lo = max(lo, traj._lo)
        hi = min(hi, traj._hi)
    return lo, hi


def solve_times(q, lasers, t_init, scan: LidarScan, traj: Trajectory,
                tol=1e-7, max_iter=20):
    """Batched Gauss-Newton over time for fixed lasers.

    Returns ``(t, residual, iterations, degenerate, ahead)``: ``ahead`` is False
    when the closest approach lies behind the laser (not on the ray).
    """
    rig = scan.rig
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    lasers = np.asarray(lasers).reshape(-1)
    t = np.array(t_init, dtype=float).reshape(-1).copy()
    n = len(t)
    lo, hi = _time_window(scan, traj)
    t = np.clip(t, lo, hi)
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x_l, J, x_h = _laser_frame(q[idx], lasers[idx], t[idx], rig, traj, scan.t_start,
                                   jacobian=True)
        e, J = x_l[:, 1:], J[:, 1:]
        jtj = np.einsum("nd,nd->n", J, J)
        on_axis = np.hypot(x_h[:, 0], x_h[:, 1]) < AXIS_EPS
        deg = on_axis | (jtj <= (rig.omega * AXIS_EPS) ** 2)
        degenerate[idx[deg]] = True
        step = np.where(deg, 0.0, -np.einsum("nd,nd->n", J, e) / np.where(deg, 1.0, jtj))
        new_t = np.clip(t[idx] + step, lo, hi)
        moved = np.abs(new_t - t[idx])
        done = deg | (moved < tol) | (iters[idx] >= max_iter)
        upd = ~deg & (iters[idx] < max_iter)
        t[idx[upd]] = new_t[upd]
        iters[idx[upd & (moved >= tol)]] += 1
        active[idx[done]] = False
    x_l, _, _ = _laser_frame(q, lasers, t, rig, traj, scan.t_start)
    residual = np.linalg.norm(x_l[:, 1:], axis=1)
    return t, residual, iters, degenerate, x_l[:, 0] > 0


def solve_time(q0, laser, t_init, scan: LidarScan, traj: Trajectory, tol=1e-7, max_iter=20):
    """Minimise ``|e(t)|`` for one point and laser; returns ``(t, residual)``."""
    t, res, _, deg, _ = solve_times(q0, [laser], [t_init], scan, traj, tol, max_iter)
    if deg[0]:
        raise DegenerateGeometryError("query point lies on the hub rotation axis")
    return float(t[0]), float(res[0])


class FreespaceReference:
    """A deskewed reference scan prepared for nearest-ray queries."""

    def __init__(self, cloud: PointCloud, traj: Trajectory):
        if len(cloud) == 0:
            raise ValueError("reference scan has no valid measurements")
        self.cloud = cloud
        self.scan = cloud.scan
        self.traj = traj
        t0, t1 = self.scan.span
        self.frame = traj.pose_at(0.5 * (t0 + t1))
        self._tree = cKDTree(self._directions(cloud.points))

    def _directions(self, points):
        x = self.frame.apply(points)
        nrm = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.where(nrm > 0, nrm, 1.0)

    def init_guess(self, q):
        """Laser and timestamp of the reference return nearest in direction."""
        q = np.asarray(q, dtype=float).reshape(-1, 3)
        _, nn = self._tree.query(self._directions(q), k=1)
        slot = self.cloud.index[nn]
        C = self.scan.shape[1]
        return slot // C, self.scan.timestamps.reshape(-1)[slot]

    def closest_firings(self, lasers, times):
        """Firing on each laser closest in time; ties go to the earlier firing."""
        lasers = np.asarray(lasers)
        times = np.asarray(times, dtype=float)
        out = np.zeros(lasers.shape, dtype=np.int64)
        ts = self.scan.timestamps
        C = ts.shape[1]
        for ell in np.unique(lasers):
            m = lasers == ell
            row = ts[ell]
            j = np.clip(np.searchsorted(row, times[m]), 1, C - 1)
            earlier = times[m] - row[j - 1] <= row[j] - times[m]
            out[m] = np.where(earlier, j - 1, j)
        return out

    def nearest_rays(self, q, tol=1e-7, max_iter=20):
        """Batched nearest-ray search. Returns a dict of per-point arrays."""
        q = np.asarray(q, dtype=float).reshape(-1, 3)
        n = len(q)
        L = self.scan.rig.n_lasers
        l0, t0 = self.init_guess(q)

        def solve(ls, ts, sel):
            t, r, it, deg, ahead = solve_times(q[sel], ls, ts, self.scan, self.traj, tol, max_iter)
            return t, np.where(ahead | deg, r, np.inf), it, deg

        best_l = l0.copy()
        best_t, best_r, iters, degenerate = solve(l0, t0, np.arange(n))
        t_centre = best_t.copy()
        direction = np.zeros(n, dtype=np.int64)
        for step in (1, -1):
            cand = l0 + step
            sel = np.flatnonzero((cand >= 0) & (cand < L))
            if sel.size == 0:
                continue
            t, r, it, _ = solve(cand[sel], t_centre[sel], sel)
            iters[sel] += it
            better = r < best_r[sel]
            b = sel[better]
            best_l[b], best_t[b], best_r[b] = cand[sel][better], t[better], r[better]
            direction[b] = step
        active = direction != 0
        while np.any(active):
            sel = np.flatnonzero(active)
            cand = best_l[sel] + direction[sel]
            inside = (cand >= 0) & (cand < L)
            active[sel[~inside]] = False
            sel, cand = sel[inside], cand[inside]
            if sel.size == 0:
                break
            t, r, it, _ = solve(cand, best_t[sel], sel)
            iters[sel] += it
            better = r < best_r[sel]
            b = sel[better]
            best_l[b], best_t[b], best_r[b] = cand[better], t[better], r[better]
            active[sel[~better]] = False
        firing = self.closest_firings(best_l, best_t)
        return {
            "laser": best_l,
            "time": best_t,
            "residual": best_r,
            "firing": firing,
            "iterations": iters,
            "degenerate": degenerate,
        }

    def nearest_ray(self, q0, tol=1e-7, max_iter=20) -> RaySolveResult:
        out = self.nearest_rays(q0, tol, max_iter)
        if out["degenerate"][0]:
            raise DegenerateGeometryError("query point lies on the hub rotation axis")
        ell, c = int(out["laser"][0]), int(out["firing"][0])
        s = self.scan
        meas = Measurement(ell, c, float(s.timestamps[ell, c]), float(s.ranges[ell, c]),
                           bool(s.valid[ell, c]))
        return RaySolveResult(ell, float(out["time"][0]), float(out["residual"][0]), meas,
                              int(out["iterations"][0]))

    def endpoints(self, lasers, firings):
        """World endpoints and laser origins of grid slots (NaN where invalid)."""
        C = self.scan.shape[1]
        pt = self.cloud.slot_to_point[np.asarray(lasers) * C + np.asarray(firings)]
        ok = pt >= 0
        p = np.full(pt.shape + (3,), np.nan)
        o = np.full(pt.shape + (3,), np.nan)
        p[ok] = self.cloud.points[pt[ok]]
        o[ok] = self.cloud.origins[pt[ok]]
        return p, o, ok


def init_guess(q0, reference: PointCloud, traj: Trajectory):
    ref = FreespaceReference(reference, traj)
    ell, t = ref.init_guess(q0)
    return int(ell[0]), float(t[0])


def nearest_ray(q0, reference: PointCloud, traj: Trajectory, tol=1e-7, max_iter=20):
    return FreespaceReference(reference, traj).nearest_ray(q0, tol, max_iter)


def signed_plane_offsets(q, n, p, origin):
    """``n·(p - q)`` with ``n`` flipped to face the ray origin."""
    n = np.asarray(n, dtype=float)
    facing = np.einsum("...d,...d->...", n, np.asarray(origin) - q)
    n = np.where((facing < 0)[..., None], -n, n)
    return np.einsum("...d,...d->...", n, np.asarray(p) - q)


def classify_offsets(d, border_tol):
    """0 = Inside, 1 = Border, 2 = Outside (NaN offsets count as Border)."""
    out = np.ones(np.shape(d), dtype=np.int8)
    with np.errstate(invalid="ignore"):
        out[d < -border_tol] = 0
        out[d > border_tol] = 2
    return out


_VERDICTS = (FreespaceVerdict.INSIDE, FreespaceVerdict.BORDER, FreespaceVerdict.OUTSIDE)


def classify_freespace(q0, normal, endpoint, origin, border_tol) -> FreespaceVerdict:
    """Classify ``q0`` against a reference ray ending at ``endpoint``.

    ``origin`` is the reference laser position; a missing normal or endpoint
    (``None``) gives Border.
    """
    if normal is None or endpoint is None or np.any(np.isnan(normal)):
        return FreespaceVerdict.BORDER
    q0 = np.asarray(q0, dtype=float)
    d = signed_plane_offsets(q0, normal, endpoint, origin)
    return _VERDICTS[int(classify_offsets(d, border_tol))]


def _verdicts(ref: FreespaceReference, q, normals, cfg: FreespaceConfig):
    out = ref.nearest_rays(q, cfg.gn_tol, cfg.gn_max_iter)
    p, o, ok = ref.endpoints(out["laser"], out["firing"])
    d = np.full(len(q), np.nan)
    # a ray passing farther than the tolerance from q says nothing about q
    good = ok & ~out["degenerate"] & (out["residual"] <= cfg.border_tol)
    d[good] = signed_plane_offsets(q[good], normals[good], p[good], o[good])
    return classify_offsets(d, cfg.border_tol)


def freespace_check(labels: LabelImage, query: PointCloud, normals: NormalCloud,
                    backward: FreespaceReference, forward: FreespaceReference | None,
                    cfg: FreespaceConfig = FreespaceConfig()):
    """Demote Dynamic points that are not inside reference freespace.

    Returns the new label image and a per-point verdict array for the
    backward pass (0 Inside, 1 Border, 2 Outside, -1 not checked).
    """
    flat = labels.labels.reshape(-1)
    dyn_pt = np.flatnonzero(flat[query.index] == Label.DYNAMIC)
    verdict = np.full(len(query), -1, dtype=np.int8)
    keep = np.zeros(len(query), dtype=bool)
    normals.ensure(dyn_pt)
    has_n = normals.planar[dyn_pt]
    verdict[dyn_pt[~has_n]] = 1
    cand = dyn_pt[has_n]
    if cand.size:
        v = _verdicts(backward, query.points[cand], normals.normals[cand], cfg)
        verdict[cand] = v
        keep[cand[v == 0]] = True
        outside = cand[v == 2]
        if outside.size:
            if forward is None:
                warnings.warn("no forward scan: Outside points demoted without forward pass",
                              RuntimeWarning, stacklevel=2)
            else:
                fv = _verdicts(forward, query.points[outside], normals.normals[outside], cfg)
                keep[outside[fv == 0]] = True
    new = labels.labels.copy().reshape(-1)
    demote = dyn_pt[~keep[dyn_pt]]
    new[query.index[demote]] = Label.STATIC
    return LabelImage(new.reshape(labels.shape)), verdict
