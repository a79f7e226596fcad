import numpy as np
import pytest

from dynlidar.scan import (
    Label, LabelImage, LaserRig, LidarScan, ScanFormatError, deskew, read_labels, read_scan,
    to_image, write_labels, write_scan,
)
from dynlidar.se3 import Pose
from dynlidar.simulate import GROUND, Scene, simulate_scan
from dynlidar.trajectory import OutOfRangeError, Trajectory

from conftest import stationary

OMEGA = 2 * np.pi * 10
PERIOD = 1.0 / 3600  # 360 firings


def one_laser_rig():
    return LaserRig([[1.0, 0, 0, 0]], [[0.0, 0, 0]], OMEGA, PERIOD)


def single_slot_scan(rig, angle, rng_value=5.0, C=360):
    t = np.arange(C) * PERIOD
    ranges = np.zeros((1, C), dtype=np.float32)
    valid = np.zeros((1, C), dtype=bool)
    c = int(round(angle / OMEGA / PERIOD))
    ranges[0, c], valid[0, c] = rng_value, True
    return LidarScan(rig, t[None], ranges, valid, 0, 0.0)


def test_deskew_hub_angle_zero_and_ninety():
    rig = one_laser_rig()
    traj = stationary()
    p = deskew(single_slot_scan(rig, 0.0), traj).points
    assert np.allclose(p, [[5, 0, 0]])
    p = deskew(single_slot_scan(rig, np.pi / 2), traj).points
    assert np.allclose(p, [[0, 5, 0]], atol=1e-9)


def test_deskew_translated_sensor():
    rig = one_laser_rig()
    T = np.eye(4)
    T[0, 3] = -1.0  # platform sits at world x = 1
    base = deskew(single_slot_scan(rig, 0.0), stationary()).points
    moved = deskew(single_slot_scan(rig, 0.0), stationary(pose=Pose.from_matrix(T))).points
    oracle = np.linalg.solve(T, [5.0, 0, 0, 1])[:3]
    assert np.allclose(moved[0], oracle)
    assert np.isclose(moved[0, 0] - base[0, 0], 1.0)


def test_deskew_stationary_matches_spherical(small_rig):
    rng = np.random.default_rng(1)
    L, C = small_rig.n_lasers, 360
    t = np.broadcast_to(np.arange(C) * small_rig.firing_period, (L, C))
    ranges = rng.uniform(1, 50, (L, C)).astype(np.float32)
    valid = rng.random((L, C)) > 0.2
    scan = LidarScan(small_rig, t, ranges, valid, 0, 0.0)
    cloud = deskew(scan, stationary())
    # direct conversion: laser origin + range * boresight, rotated by the hub angle
    theta = small_rig.omega * cloud.times
    ell = cloud.lasers
    el = small_rig.elevations[ell]
    r = ranges.reshape(-1)[cloud.index].astype(float)
    o = small_rig.origins[ell]
    local = o + r[:, None] * np.stack([np.cos(el), np.zeros_like(el), np.sin(el)], axis=1)
    c, s = np.cos(theta), np.sin(theta)
    direct = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1],
                       local[:, 2]], axis=1)
    assert np.abs(cloud.points - direct).max() < 1e-9


def test_deskew_out_of_range(small_rig):
    traj = Trajectory([0.0, 0.01], Pose(np.stack([np.eye(3)] * 2), np.zeros((2, 3))))
    scan = simulate_scan(Scene([GROUND]), small_rig, stationary(), 0)[0]
    with pytest.raises(OutOfRangeError) as exc:
        deskew(scan, traj)
    assert exc.value.timestamp > 0.02


def test_slot_count(full_rig):
    scan, _ = simulate_scan(Scene([GROUND]), full_rig, stationary(), 0)
    assert scan.timestamps.size == 128000
    # one revolution per scan
    t0, t1 = scan.span
    assert abs(full_rig.omega * (t1 - t0) - 2 * np.pi) < full_rig.omega * full_rig.firing_period


def test_rig_validation():
    with pytest.raises(ValueError):
        LaserRig.from_angles([0.1, 0.0], 0.0, np.zeros(3), OMEGA, PERIOD)
    with pytest.raises(ValueError):
        LaserRig([[1.0, 0, 0, 0]], [[0.0, 0, 0]], -1.0, PERIOD)


def test_scan_validation(small_rig):
    L = small_rig.n_lasers
    t = np.broadcast_to(np.arange(4) * small_rig.firing_period, (L, 4)).copy()
    r = np.ones((L, 4), dtype=np.float32)
    v = np.ones((L, 4), dtype=bool)
    LidarScan(small_rig, t, r, v, 0, 0.0)
    bad = r.copy()
    bad[2, 1] = 0.0
    with pytest.raises(ScanFormatError):
        LidarScan(small_rig, t, bad, v, 0, 0.0)
    t2 = t.copy()
    t2[0, 2] = t2[0, 1]
    with pytest.raises(ScanFormatError):
        LidarScan(small_rig, t2, r, v, 0, 0.0)
    with pytest.raises(ScanFormatError):
        LidarScan(small_rig, t[:2], r[:2], v[:2], 0, 0.0)


def test_to_image():
    rig = one_laser_rig()
    scan = single_slot_scan(rig, 0.0)
    with pytest.raises(ValueError):
        to_image(scan, np.zeros(3))
    img = to_image(scan, np.zeros(360))
    assert img.labels[0, 0] == Label.STATIC
    assert np.all(img.labels[0, 1:] == Label.INVALID)


def test_to_image_single_dynamic_and_roundtrip(small_rig):
    L, C = small_rig.n_lasers, 20
    t = np.broadcast_to(np.arange(C) * small_rig.firing_period, (L, C))
    scan = LidarScan(small_rig, t, np.ones((L, C), np.float32), np.ones((L, C), bool), 0, 0.0)
    flat = np.zeros(L * C, dtype=np.int8)
    flat[3 * C + 7] = Label.DYNAMIC
    img = to_image(scan, flat)
    assert list(zip(*np.nonzero(img.dynamic))) == [(3, 7)]
    assert np.array_equal(to_image(scan, img.flat()).labels, img.labels)


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_scan_roundtrip(tmp_path, small_rig, suffix):
    scan, _ = simulate_scan(Scene([GROUND]), small_rig, stationary(), 3, noise_sigma=0.05)
    path = tmp_path / ("s" + suffix)
    write_scan(scan, path)
    back = read_scan(path)
    assert back == scan
    assert back.ranges.dtype == np.float32


def test_truncated_binary(tmp_path, small_rig):
    scan, _ = simulate_scan(Scene([GROUND]), small_rig, stationary(), 0)
    path = tmp_path / "s.bin"
    write_scan(scan, path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ScanFormatError, match="whole records"):
        read_scan(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ScanFormatError, match="magic"):
        read_scan(path)


def test_csv_errors_have_line_numbers(tmp_path, small_rig):
    scan, _ = simulate_scan(Scene([GROUND]), small_rig, stationary(), 0)
    path = tmp_path / "s.csv"
    write_scan(scan, path)
    lines = path.read_text().splitlines()
    base = 3 + small_rig.n_lasers
    ok = [i for i in range(base, len(lines)) if lines[i].endswith(",1")][0]
    bad = lines.copy()
    parts = bad[ok].split(",")
    bad[ok] = ",".join(parts[:3] + ["0.0", "1"])
    path.write_text("\n".join(bad) + "\n")
    with pytest.raises(ScanFormatError, match=f":{ok + 1}: valid measurement"):
        read_scan(path)
    path.write_text("\n".join(lines[:-10]) + "\n")
    with pytest.raises(ScanFormatError, match="truncated"):
        read_scan(path)
    bad = lines.copy()
    a, b = bad[base + 5].split(","), bad[base + 4].split(",")
    a[2] = b[2]
    bad[base + 5] = ",".join(a)
    path.write_text("\n".join(bad) + "\n")
    with pytest.raises(ScanFormatError, match=f":{base + 6}: non-monotone"):
        read_scan(path)


def test_label_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 3, (4, 6)).astype(np.int8)
    cid = np.where(labels == Label.DYNAMIC, rng.integers(0, 3, (4, 6)), -1)
    img = LabelImage(labels, cid)
    path = tmp_path / "l.txt"
    write_labels(img, path)
    assert read_labels(path) == img
    extra = rng.random((4, 6))
    write_labels(img, path, extra=extra)
    back, ex = read_labels(path, with_extra=True)
    assert back == img and np.array_equal(ex, extra)
    write_labels(img, path)
    lines = path.read_text().splitlines()
    lines[5] = " ".join(lines[5].split()[:2] + ["Q", "-1"])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ScanFormatError, match=":6:"):
        read_labels(path)
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ScanFormatError):
        read_labels(path)
