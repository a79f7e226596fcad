"""Spinning-lidar measurement model, scan container, deskewing and file I/O.

Frame conventions (``T_ab`` maps b-coordinates into frame a):

* ``T_v0(t)``: world -> platform, from the trajectory.
* ``T_hv(t)``: platform -> hub. The hub sits at the platform origin and is
  rotated by the hub angle ``omega * (t - t_start)`` about platform +z.
* ``T_lh``: hub -> laser. Each laser fires along its own +x axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np

from .se3 import Pose, rot_z
from .trajectory import OutOfRangeError, Trajectory


class ScanFormatError(ValueError):
    pass


class Label(IntEnum):
    STATIC = 0
    DYNAMIC = 1
    INVALID = 2


LABEL_CHARS = "SDX"


@dataclass(frozen=True, eq=False)
class LaserRig:
    """Per-laser extrinsics ``T_lh`` stored as quaternion ``(w,x,y,z)`` + translation."""

    quaternions: np.ndarray
    translations: np.ndarray
    omega: float
    firing_period: float

    def __post_init__(self):
        q = np.ascontiguousarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        t = np.ascontiguousarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(q) != len(t) or len(q) == 0:
            raise ValueError("need one quaternion and translation per laser")
        if not self.omega > 0 or not self.firing_period > 0:
            raise ValueError("omega and firing_period must be positive")
        object.__setattr__(self, "quaternions", q)
        object.__setattr__(self, "translations", t)
        if np.any(np.diff(self.elevations) <= 0):
            raise ValueError("laser elevations must be strictly increasing with index")

    @classmethod
    def from_angles(cls, elevations, azimuths, origins, omega, firing_period) -> LaserRig:
        """Build a rig from boresight angles (rad) and laser origins in the hub frame."""
        el = np.asarray(elevations, dtype=float)
        az = np.broadcast_to(np.asarray(azimuths, dtype=float), el.shape)
        origins = np.broadcast_to(np.asarray(origins, dtype=float), el.shape + (3,))
        # laser -> hub rotation: yaw by azimuth, then pitch up by elevation
        ce, se, ca, sa = np.cos(el), np.sin(el), np.cos(az), np.sin(az)
        R_hl = np.zeros(el.shape + (3, 3))
        R_hl[:, :, 0] = np.stack([ce * ca, ce * sa, se], axis=-1)
        R_hl[:, :, 1] = np.stack([-sa, ca, np.zeros_like(el)], axis=-1)
        R_hl[:, :, 2] = np.stack([-se * ca, -se * sa, ce], axis=-1)
        T_lh = Pose(R_hl, origins).inverse()
        return cls(T_lh.quaternion(), T_lh.translation, float(omega), float(firing_period))

    @property
    def n_lasers(self) -> int:
        return len(self.quaternions)

    @property
    def revolution_period(self) -> float:
        return 2.0 * np.pi / self.omega

    @cached_property
    def extrinsics(self) -> Pose:
        """Stacked ``T_lh``."""
        return Pose.from_quaternion(self.quaternions, self.translations)

    @cached_property
    def boresights(self) -> np.ndarray:
        """Unit firing directions in the hub frame, shape (L, 3)."""
        return self.extrinsics.rotation[:, 0, :]

    @cached_property
    def origins(self) -> np.ndarray:
        """Laser origins in the hub frame, shape (L, 3)."""
        return self.extrinsics.inverse().translation

    @cached_property
    def elevations(self) -> np.ndarray:
        return np.arcsin(np.clip(self.boresights[:, 2], -1.0, 1.0))

    def __eq__(self, other):
        if not isinstance(other, LaserRig):
            return NotImplemented
        return (np.array_equal(self.quaternions, other.quaternions)
                and np.array_equal(self.translations, other.translations)
                and self.omega == other.omega and self.firing_period == other.firing_period)

    __hash__ = object.__hash__


def hub_rotation(theta) -> np.ndarray:
    """Rotation part of ``T_hv`` for hub angle(s) ``theta`` (platform -> hub)."""
    return np.swapaxes(rot_z(theta), -1, -2)


@dataclass(eq=False)
class LidarScan:
    """One revolution of measurements on an ``L x C`` (laser x firing) grid."""

    rig: LaserRig
    timestamps: np.ndarray
    ranges: np.ndarray
    valid: np.ndarray
    scan_index: int
    t_start: float

    def __post_init__(self):
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        self.ranges = np.ascontiguousarray(self.ranges, dtype=np.float32)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        self.scan_index = int(self.scan_index)
        self.t_start = float(self.t_start)
        L = self.rig.n_lasers
        if self.timestamps.ndim != 2 or self.timestamps.shape[0] != L:
            raise ScanFormatError(f"timestamp grid must have {L} rows")
        if self.ranges.shape != self.timestamps.shape or self.valid.shape != self.timestamps.shape:
            raise ScanFormatError("grid dimension mismatch between timestamps, ranges and valid")
        if np.any(np.diff(self.timestamps, axis=1) <= 0):
            raise ScanFormatError("column timestamps must be strictly increasing")
        t0, t1 = self.span
        if np.any(self.timestamps < t0) or np.any(self.timestamps >= t1 + 1e-12):
            raise ScanFormatError("timestamps fall outside the scan span")
        if np.any(~(self.ranges[self.valid] > 0)):
            raise ScanFormatError("valid measurement with non-positive range")

    @property
    def shape(self) -> tuple[int, int]:
        return self.timestamps.shape

    @property
    def span(self) -> tuple[float, float]:
        return self.t_start, self.t_start + self.timestamps.shape[1] * self.rig.firing_period

    @property
    def t_end(self) -> float:
        return self.span[1]

    def hub_angles(self) -> np.ndarray:
        return self.rig.omega * (self.timestamps - self.t_start)

    def __eq__(self, other):
        if not isinstance(other, LidarScan):
            return NotImplemented
        return (self.rig == other.rig and self.scan_index == other.scan_index
                and self.t_start == other.t_start
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.ranges, other.ranges)
                and np.array_equal(self.valid, other.valid))

    __hash__ = object.__hash__


@dataclass(eq=False)
class PointCloud:
    """Deskewed world-frame endpoints of the valid measurements of a scan.

    ``index[i]`` is the flat grid slot (``laser * C + firing``) of point i;
    ``origins[i]`` is the world position of the firing laser at that time.
    """

    scan: LidarScan
    points: np.ndarray
    origins: np.ndarray
    index: np.ndarray

    @property
    def lasers(self) -> np.ndarray:
        return self.index // self.scan.shape[1]

    @property
    def firings(self) -> np.ndarray:
        return self.index % self.scan.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.scan.timestamps.reshape(-1)[self.index]

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def slot_to_point(self) -> np.ndarray:
        """Flat grid -> point index map, -1 where there is no point."""
        out = np.full(self.scan.timestamps.size, -1, dtype=np.int64)
        out[self.index] = np.arange(len(self.index))
        return out


def laser_rays_world(rig: LaserRig, lasers, times, t_start, traj: Trajectory):
    """World-frame origins and unit directions of laser(s) firing at time(s)."""
    lasers = np.asarray(lasers)
    times = np.asarray(times, dtype=float)
    shape = np.broadcast_shapes(lasers.shape, times.shape)
    lasers = np.broadcast_to(lasers, shape).reshape(-1)
    # many lasers share a firing time: one pose per distinct time
    uniq, inv = np.unique(np.broadcast_to(times, shape).reshape(-1), return_inverse=True)
    try:
        pose = traj.pose_at(uniq)
    except OutOfRangeError as exc:
        raise OutOfRangeError(exc.timestamp) from None
    # hub -> world rotation is R_v0^T R_hv^T = R_v0^T Rz(theta)
    R_wh = np.swapaxes(pose.rotation, -1, -2) @ rot_z(rig.omega * (uniq - t_start))
    R_flat = R_wh.reshape(-1, 3)
    o_all = (R_flat @ rig.origins.T).reshape(len(uniq), 3, -1)
    d_all = (R_flat @ rig.boresights.T).reshape(len(uniq), 3, -1)
    centre = pose.apply_inverse(np.zeros(3))
    origins = o_all[inv, :, lasers] + centre[inv]
    dirs = d_all[inv, :, lasers]
    return origins.reshape(*shape, 3), dirs.reshape(*shape, 3)


def deskew(scan: LidarScan, traj: Trajectory) -> PointCloud:
    """Motion-compensate every valid measurement into the world frame."""
    L, C = scan.shape
    index = np.flatnonzero(scan.valid.reshape(-1))
    times = scan.timestamps.reshape(-1)[index]
    bad = ~traj.covers(times)
    if np.any(bad):
        raise OutOfRangeError(float(times[bad][0]))
    lasers = index // C
    o, d = laser_rays_world(scan.rig, lasers, times, scan.t_start, traj)
    r = scan.ranges.reshape(-1)[index].astype(np.float64)
    return PointCloud(scan, o + r[:, None] * d, o, index)


@dataclass(eq=False)
class LabelImage:
    """Row = laser, column = firing. ``cluster_id`` is -1 off Dynamic cells."""

    labels: np.ndarray
    cluster_id: np.ndarray = None

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        if self.cluster_id is None:
            self.cluster_id = np.full(self.labels.shape, -1, dtype=np.int32)
        self.cluster_id = np.ascontiguousarray(self.cluster_id, dtype=np.int32)
        if self.cluster_id.shape != self.labels.shape:
            raise ValueError("cluster_id grid must match label grid")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def dynamic(self) -> np.ndarray:
        return self.labels == Label.DYNAMIC

    def copy(self) -> LabelImage:
        return LabelImage(self.labels.copy(), self.cluster_id.copy())

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1).copy()

    def __eq__(self, other):
        if not isinstance(other, LabelImage):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(
            self.cluster_id, other.cluster_id)

    __hash__ = object.__hash__


def to_image(scan: LidarScan, labels, cluster_id=None) -> LabelImage:
    """Arrange one label per measurement slot (flat, laser-major) into an image."""
    labels = np.asarray(labels)
    L, C = scan.shape
    if labels.size != L * C:
        raise ValueError(f"expected {L * C} labels, got {labels.size}")
    img = labels.reshape(L, C).astype(np.int8).copy()
    if np.any(img[scan.valid] == Label.INVALID):
        raise ValueError("valid measurement labelled Invalid")
    img[~scan.valid] = Label.INVALID
    cid = None
    if cluster_id is not None:
        cid = np.asarray(cluster_id).reshape(L, C).astype(np.int32).copy()
        cid[img != Label.DYNAMIC] = -1
    return LabelImage(img, cid)


# --- binary scan files -------------------------------------------------------

MAGIC = b"DLSC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIqddd")
_RECORD = np.dtype([("t", "<f8"), ("r", "<f4"), ("v", "u1")])


def _check_record_grid(ts, rs, vs, where):
    bad = np.flatnonzero(vs & ~(rs > 0))
    if bad.size:
        raise ScanFormatError(f"{where}: record {bad[0]}: valid measurement with range <= 0")
    C = ts.shape[1]
    bad = np.flatnonzero((np.diff(ts, axis=1) <= 0).reshape(-1))
    if bad.size:
        row, col = divmod(int(bad[0]), C - 1)
        raise ScanFormatError(f"{where}: record {row * C + col + 1}: non-monotone timestamp")


def write_scan(scan: LidarScan, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        _write_scan_csv(scan, path)
        return
    L, C = scan.shape
    rig = scan.rig
    header = _HEADER.pack(MAGIC, VERSION, L, C, scan.scan_index, rig.omega,
                          rig.firing_period, scan.t_start)
    ext = np.concatenate([rig.translations, rig.quaternions], axis=1).astype("<f8")
    rec = np.empty(L * C, dtype=_RECORD)
    rec["t"] = scan.timestamps.reshape(-1)
    rec["r"] = scan.ranges.reshape(-1)
    rec["v"] = scan.valid.reshape(-1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ext.tobytes())
        fh.write(rec.tobytes())


def read_scan(path) -> LidarScan:
    path = Path(path)
    if path.suffix == ".csv":
        return _read_scan_csv(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ScanFormatError(f"{path}: truncated header")
    magic, version, L, C, index, omega, period, t_start = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ScanFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ScanFormatError(f"{path}: unsupported version {version}")
    ext_bytes = L * 7 * 8
    expected = _HEADER.size + ext_bytes + L * C * _RECORD.itemsize
    if len(data) != expected:
        got = (len(data) - _HEADER.size - ext_bytes) // _RECORD.itemsize
        raise ScanFormatError(
            f"{path}: size {len(data)} != {expected} (grid {L}x{C}, {max(got, 0)} whole records)")
    ext = np.frombuffer(data, "<f8", L * 7, _HEADER.size).reshape(L, 7)
    rec = np.frombuffer(data, _RECORD, L * C, _HEADER.size + ext_bytes)
    ts = rec["t"].reshape(L, C).astype(np.float64)
    rs = rec["r"].reshape(L, C).astype(np.float32)
    vs = rec["v"].reshape(L, C).astype(bool)
    _check_record_grid(ts, rs, vs, path)
    rig = LaserRig(ext[:, 3:].copy(), ext[:, :3].copy(), omega, period)
    try:
        return LidarScan(rig, ts, rs, vs, index, t_start)
    except ScanFormatError as exc:
        raise ScanFormatError(f"{path}: {exc}") from None


def _write_scan_csv(scan: LidarScan, path: Path) -> None:
    L, C = scan.shape
    rig = scan.rig
    out = [f"dlscan-csv {VERSION}",
           f"grid {L} {C} {scan.scan_index} {rig.omega!r} {rig.firing_period!r} {scan.t_start!r}"]
    for ell in range(L):
        vals = (*rig.translations[ell], *rig.quaternions[ell])
        out.append("laser " + " ".join(repr(float(v)) for v in vals))
    out.append("laser,firing,timestamp,range,valid")
    ts, rs, vs = scan.timestamps, scan.ranges, scan.valid
    for ell in range(L):
        for c in range(C):
            out.append(f"{ell},{c},{float(ts[ell, c])!r},{float(rs[ell, c])!r},{int(vs[ell, c])}")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def _read_scan_csv(path: Path) -> LidarScan:
    lines = path.read_text(encoding="utf-8").splitlines()

    def fail(lineno, msg):
        raise ScanFormatError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0].split() != ["dlscan-csv", str(VERSION)]:
        fail(1, "missing dlscan-csv header")
    try:
        _, L, C, index, omega, period, t_start = lines[1].split()
        L, C, index = int(L), int(C), int(index)
        omega, period, t_start = float(omega), float(period), float(t_start)
    except (ValueError, IndexError):
        fail(2, "malformed grid line")
    if len(lines) < 3 + L + L * C:
        fail(len(lines), f"truncated: expected {3 + L + L * C} lines")
    ext = np.zeros((L, 7))
    for i in range(L):
        parts = lines[2 + i].split()
        if len(parts) != 8 or parts[0] != "laser":
            fail(3 + i, "malformed laser line")
        ext[i] = [float(p) for p in parts[1:]]
    ts = np.zeros(L * C)
    rs = np.zeros(L * C, dtype=np.float32)
    vs = np.zeros(L * C, dtype=bool)
    base = 3 + L
    for k in range(L * C):
        lineno = base + k + 1
        parts = lines[base + k].split(",")
        if len(parts) != 5:
            fail(lineno, "expected 5 fields")
        try:
            ell, c = int(parts[0]), int(parts[1])
            t, r, v = float(parts[2]), float(parts[3]), int(parts[4])
        except ValueError:
            fail(lineno, "non-numeric field")
        if (ell, c) != divmod(k, C):
            fail(lineno, f"grid slot ({ell},{c}) out of order")
        if v and not r > 0:
            fail(lineno, "valid measurement with range <= 0")
        if k % C and t <= ts[k - 1]:
            fail(lineno, "non-monotone timestamp")
        ts[k], rs[k], vs[k] = t, r, bool(v)
    if len(lines) > base + L * C:
        fail(base + L * C + 1, "trailing data after grid")
    rig = LaserRig(ext[:, 3:], ext[:, :3], omega, period)
    return LidarScan(rig, ts.reshape(L, C), rs.reshape(L, C), vs.reshape(L, C), index, t_start)


# --- label files -------------------------------------------------------------

def _slot_prefixes(L, C):
    return [f"{ell} {c} " for ell in range(L) for c in range(C)]


def write_labels(image: LabelImage, path, extra=None) -> None:
    """Write ``laser firing label cluster_id`` lines; ``extra`` appends one column."""
    L, C = image.shape
    chars = np.array(list(LABEL_CHARS))[image.labels.reshape(-1)]
    cid = image.cluster_id.reshape(-1)
    prefixes = _slot_prefixes(L, C)
    if extra is None:
        lines = [f"{p}{ch} {k}" for p, ch, k in zip(prefixes, chars, cid.tolist())]
    else:
        ex = np.asarray(extra).reshape(-1).tolist()
        lines = [f"{p}{ch} {k} {e!r}" for p, ch, k, e in zip(prefixes, chars, cid.tolist(), ex)]
    Path(path).write_text(f"# grid {L} {C}\n" + "\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path, with_extra=False):
    """Inverse of :func:`write_labels`; returns the image (and extra column)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# grid"):
        raise ScanFormatError(f"{path}:1: missing '# grid L C' header")
    try:
        L, C = (int(x) for x in lines[0].split()[2:4])
    except ValueError:
        raise ScanFormatError(f"{path}:1: malformed grid header") from None
    body = lines[1:]
    if len(body) != L * C:
        raise ScanFormatError(
            f"{path}:{len(lines)}: expected {L * C} label lines, found {len(body)}")
    labels = np.empty(L * C, dtype=np.int8)
    cid = np.empty(L * C, dtype=np.int32)
    extra = np.empty(L * C) if with_extra else None
    nfields = 5 if with_extra else 4
    lookup = {ch: i for i, ch in enumerate(LABEL_CHARS)}
    for k, line in enumerate(body):
        parts = line.split()
        if len(parts) != nfields:
            raise ScanFormatError(f"{path}:{k + 2}: expected {nfields} fields")
        try:
            ell, c, ch, cl = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
            if with_extra:
                extra[k] = float(parts[4])
        except ValueError:
            raise ScanFormatError(f"{path}:{k + 2}: non-numeric field") from None
        if (ell, c) != divmod(k, C):
            raise ScanFormatError(f"{path}:{k + 2}: grid slot ({ell},{c}) out of order")
        if ch not in lookup:
            raise ScanFormatError(f"{path}:{k + 2}: unknown label {ch!r}")
        labels[k] = lookup[ch]
        cid[k] = cl
    image = LabelImage(labels.reshape(L, C), cid.reshape(L, C))
    if with_extra:
        return image, extra.reshape(L, C)
    return image
