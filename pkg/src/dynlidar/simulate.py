"""Synthetic spinning-lidar scans with point-level motion groundtruth.

Scenes are a ground plane plus yawed boxes; movers are boxes translating at
constant velocity. Every laser fires once per firing step, so a scan is
distorted by both platform and mover motion during the revolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scan import Label, LabelImage, LaserRig, LidarScan, laser_rays_world, read_labels, write_labels
from .se3 import Pose, rot_z, se3_exp
from .trajectory import Trajectory

DYNAMIC_SPEED = 0.2  # m/s, strict lower bound for Dynamic groundtruth
SENSOR_HEIGHT = 1.73


@dataclass(frozen=True)
class Plane:
    normal: tuple
    offset: float  # points x with normal·x = offset


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    yaw: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise ValueError("box half-extents must be positive")
        if not np.all(np.isfinite(self.velocity)):
            raise ValueError("mover velocity must be finite")

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass
class Scene:
    planes: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    movers: list = field(default_factory=list)
    max_range: float = 120.0

    def primitives(self):
        """All primitives in object-id order."""
        return [*self.planes, *self.boxes, *self.movers]


@dataclass(eq=False)
class GroundTruth:
    labels: np.ndarray
    object_id: np.ndarray
    speed: np.ndarray

    @property
    def dynamic(self) -> np.ndarray:
        return self.labels == Label.DYNAMIC

    def image(self) -> LabelImage:
        return LabelImage(self.labels, np.where(self.labels == Label.INVALID, -1, self.object_id))


# --- ray casting -------------------------------------------------------------

def ray_plane_intersect(origin, direction, normal, offset):
    """Positive hit distance(s) along unit ``direction``; NaN where none."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    denom = direction @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (offset - origin @ n) / denom
    return np.where((denom != 0) & (s > 0), s, np.nan)


def ray_box_intersect(origin, direction, center, half_extents, yaw=0.0):
    """Slab test against a yawed box; returns the smallest positive distance or NaN.

    A ray starting inside the box returns its exit distance. ``center`` may
    vary per ray (moving boxes).
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    h = np.asarray(half_extents, dtype=float)
    Rt = rot_z(-yaw)
    o = (origin - np.asarray(center, dtype=float)) @ Rt.T
    d = direction @ Rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
    parallel = d == 0
    inside_slab = np.abs(o) <= h
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = lo.max(axis=-1)
    tmax = hi.min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    return np.where(hit, np.where(tmin > 0, tmin, tmax), np.nan)


def cast_rays(scene: Scene, origins, dirs, times):
    """Nearest hit per ray: ``(range, object_id, speed)`` (NaN / -1 on miss)."""
    shape = origins.shape[:-1]
    best = np.full(shape, np.inf)
    obj = np.full(shape, -1, dtype=np.int32)
    speed = np.zeros(shape)
    k = 0
    for p in scene.planes:
        r = ray_plane_intersect(origins, dirs, p.normal, p.offset)
        closer = r < best
        best[closer], obj[closer] = r[closer], k
        k += 1
    for b in scene.boxes:
        r = ray_box_intersect(origins, dirs, b.center, b.half_extents, b.yaw)
        closer = r < best
        best[closer], obj[closer] = r[closer], k
        k += 1
    for m in scene.movers:
        c = np.asarray(m.center) + np.asarray(times)[..., None] * np.asarray(m.velocity)
        r = ray_box_intersect(origins, dirs, c, m.half_extents, m.yaw)
        closer = r < best
        best[closer], obj[closer], speed[closer] = r[closer], k, m.speed
        k += 1
    miss = ~(best <= scene.max_range)
    best[miss] = np.nan
    obj[miss] = -1
    speed[miss] = 0.0
    return best, obj, speed


# --- rig and trajectories ----------------------------------------------------

def hdl64_like_rig(n_lasers=64, firings=2000, rate_hz=10.0) -> LaserRig:
    """Synthetic 64-laser rig: elevations evenly spaced from -24.8 to +2 deg.

    Lasers sit in two blocks (upper/lower half) a few centimetres off the
    hub axis, alternating sides; all boresights share the hub azimuth so
    each image column is one bearing.
    """
    el = np.deg2rad(np.linspace(-24.8, 2.0, n_lasers))
    idx = np.arange(n_lasers)
    upper = idx >= n_lasers // 2
    side = np.where(idx % 2 == 0, 1.0, -1.0)
    origins = np.stack([
        np.full(n_lasers, 0.06),
        0.02 * side,
        np.where(upper, 0.08, -0.08),
    ], axis=1)
    az = np.zeros(n_lasers)
    omega = 2.0 * np.pi * rate_hz
    return LaserRig.from_angles(el, az, origins, omega, 1.0 / (rate_hz * firings))


def firing_times(rig: LaserRig, n_scans, t0=0.0):
    C = int(round(rig.revolution_period / rig.firing_period))
    return t0 + np.arange(n_scans * C) * rig.firing_period


def platform_trajectory(rig: LaserRig, n_scans, speed=10.0, yaw_rate=0.0,
                        start=(0.0, 0.0, SENSOR_HEIGHT), heading=0.0) -> Trajectory:
    """Constant forward speed and yaw rate, one knot per firing step.

    Knots extend half a revolution before the first and after the last
    scan so freespace time solves near the ends stay in range.
    """
    T = rig.revolution_period
    dt = rig.firing_period
    pad = int(np.ceil(0.5 * T / dt)) + 1
    C = int(round(T / dt))
    times = (np.arange(-pad, n_scans * C + pad + 1)) * dt
    start_v0 = Pose(rot_z(heading), np.asarray(start, dtype=float)).inverse()
    # body twist of T_v0: the world drifts backwards past the platform
    twist = np.array([-speed, 0.0, 0.0, 0.0, 0.0, -yaw_rate])
    dR, dp = se3_exp(times[:, None] * twist)
    return Trajectory(times, Pose(dR, dp).compose(start_v0))


# --- simulation --------------------------------------------------------------

def simulate_scan(scene: Scene, rig: LaserRig, traj: Trajectory, scan_index: int,
                  noise_sigma=0.0, seed=0, return_hits=False):
    L = rig.n_lasers
    C = int(round(rig.revolution_period / rig.firing_period))
    t_start = scan_index * C * rig.firing_period
    col_t = t_start + np.arange(C) * rig.firing_period
    times = np.broadcast_to(col_t, (L, C))
    lasers = np.broadcast_to(np.arange(L)[:, None], (L, C))
    origins, dirs = laser_rays_world(rig, lasers, times, t_start, traj)
    rng_true, obj, speed = cast_rays(scene, origins, dirs, times)
    valid = np.isfinite(rng_true)
    ranges = np.where(valid, rng_true, 0.0)
    if noise_sigma > 0:
        noise = np.random.default_rng([seed, scan_index]).standard_normal((L, C))
        ranges = np.where(valid, np.maximum(ranges + noise_sigma * noise, 1e-3), 0.0)
    scan = LidarScan(rig, times, ranges.astype(np.float32), valid, scan_index, t_start)
    labels = np.where(~valid, Label.INVALID,
                      np.where(speed > DYNAMIC_SPEED, Label.DYNAMIC, Label.STATIC)).astype(np.int8)
    truth = GroundTruth(labels, obj, speed)
    if return_hits:
        return scan, truth, origins + np.where(valid, rng_true, 0.0)[..., None] * dirs
    return scan, truth


def simulate(scene: Scene, rig: LaserRig, traj: Trajectory, noise_sigma=0.0, seed=0,
             n_scans=1, first_scan=0):
    """Simulate ``n_scans`` consecutive revolutions; returns ``(scans, truths)``."""
    scans, truths = [], []
    for n in range(first_scan, first_scan + n_scans):
        s, g = simulate_scan(scene, rig, traj, n, noise_sigma, seed)
        scans.append(s)
        truths.append(g)
    return scans, truths


# --- shipped scenes ------------------------------------------------------------
#
# The platform drives along +x from the origin at 10 m/s. Movers travel along
# the line of sight (ahead or behind): a box face sliding within its own plane
# is invisible to the point-to-plane comparison, and close movers are easily
# matched to ground rings just in front of their faces.

GROUND = Plane((0.0, 0.0, 1.0), 0.0)
CAR = (2.0, 1.0, 0.75)  # 4 x 2 x 1.5 m


def _car(x, y, vx=0.0):
    return Box((x, y, CAR[2]), CAR, 0.0, (vx, 0.0, 0.0))


def one_box_scene() -> Scene:
    """A single car following in the ego lane, falling back at 5 m/s."""
    return Scene([GROUND], [], [_car(-42.0, 0.0, 5.0)])


def _town1_static():
    boxes = []
    for x0 in range(-60, 181, 30):
        boxes.append(Box((x0, 16.0, 5.0), (10.0, 4.0, 5.0)))
        boxes.append(Box((x0 + 15.0, -17.0, 4.0), (8.0, 4.0, 4.0), 0.1))
    boxes += [_car(x, 6.5) for x in (-20.0, 25.0, 70.0, 115.0)]
    boxes += [_car(x, -7.0) for x in (5.0, 50.0, 140.0)]
    return boxes


def town1_static_scene() -> Scene:
    """Open street with buildings and parked cars; nothing moves."""
    return Scene([GROUND], _town1_static(), [])


def town1_scene() -> Scene:
    """Open street: a follower behind and an oncoming car in the far lane."""
    movers = [_car(-42.0, 0.0, 5.0), _car(150.0, -3.5, -6.0)]
    return Scene([GROUND], _town1_static(), movers)


def town2_scene() -> Scene:
    """Fenced street: low fences with gaps partially hide side-lane movers."""
    boxes = []
    for x0 in range(-60, 181, 12):
        boxes.append(Box((x0, 4.0, 0.6), (4.0, 0.05, 0.6)))
        boxes.append(Box((x0 + 6.0, -4.0, 0.6), (4.0, 0.05, 0.6)))
    for x0 in range(-60, 181, 40):
        boxes.append(Box((x0, 14.0, 4.0), (12.0, 3.0, 4.0)))
    movers = [_car(-42.0, 0.0, 5.0), _car(-30.0, 7.0, 4.0), _car(120.0, -7.0, -5.0)]
    return Scene([GROUND], boxes, movers)


def near_far_scene() -> Scene:
    """A truck following within 25 m plus a small, slow mover far ahead.

    The truck's face rises well above the ground rings, so its old position
    is the nearest reference surface. The far mover shifts 0.4 m per four
    scans, under the default error threshold.
    """
    truck = Box((-20.0, 0.0, 1.75), (4.0, 1.25, 1.75), 0.0, (5.0, 0.0, 0.0))
    far = Box((105.0, -2.0, 0.5), (0.4, 0.4, 0.5), 0.0, (1.0, 0.0, 0.0))
    return Scene([GROUND], [], [truck, far])


SCENES = {
    "one_box": one_box_scene,
    "town1": town1_scene,
    "town1_static": town1_static_scene,
    "town2": town2_scene,
    "near_far": near_far_scene,
}


# --- scene files ---------------------------------------------------------------

class SceneFormatError(ValueError):
    pass


def read_scene(path) -> Scene:
    scene = Scene()
    arity = {"plane": 4, "box": 7, "mover": 10, "max_range": 1}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        if kind not in arity:
            raise SceneFormatError(f"{path}:{lineno}: unknown primitive {kind!r}")
        if len(rest) != arity[kind]:
            raise SceneFormatError(f"{path}:{lineno}: {kind} needs {arity[kind]} values")
        try:
            v = [float(x) for x in rest]
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: non-numeric value") from None
        try:
            if kind == "plane":
                scene.planes.append(Plane(tuple(v[:3]), v[3]))
            elif kind == "box":
                scene.boxes.append(Box(tuple(v[:3]), tuple(v[3:6]), v[6]))
            elif kind == "mover":
                scene.movers.append(Box(tuple(v[:3]), tuple(v[3:6]), v[6], tuple(v[7:10])))
            else:
                scene.max_range = v[0]
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
    return scene


def write_scene(scene: Scene, path) -> None:
    fmt = lambda vals: " ".join(repr(float(x)) for x in vals)  # noqa: E731
    lines = [f"max_range {scene.max_range!r}"]
    lines += [f"plane {fmt((*p.normal, p.offset))}" for p in scene.planes]
    lines += [f"box {fmt((*b.center, *b.half_extents, b.yaw))}" for b in scene.boxes]
    lines += [f"mover {fmt((*m.center, *m.half_extents, m.yaw, *m.velocity))}"
              for m in scene.movers]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_groundtruth(truth: GroundTruth, path) -> None:
    write_labels(truth.image(), path, extra=truth.speed)


def read_groundtruth(path) -> GroundTruth:
    image, speed = read_labels(path, with_extra=True)
    return GroundTruth(image.labels, image.cluster_id, speed)
