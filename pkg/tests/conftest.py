import numpy as np
import pytest

from dynlidar.se3 import Pose
from dynlidar.simulate import Box, GROUND, Scene, hdl64_like_rig, platform_trajectory, simulate
from dynlidar.trajectory import Trajectory


@pytest.fixture(scope="session")
def small_rig():
    # 16 lasers, 360 firings per revolution
    return hdl64_like_rig(n_lasers=16, firings=360, rate_hz=10.0)


@pytest.fixture(scope="session")
def full_rig():
    return hdl64_like_rig()


def stationary(t0=-1.0, t1=10.0, pose=None):
    pose = pose or Pose.identity()
    return Trajectory(np.array([t0, t1]), Pose(np.stack([pose.rotation] * 2),
                                               np.stack([pose.translation] * 2)))


@pytest.fixture(scope="session")
def box_log(small_rig):
    """Six scans of the small rig passing a car that falls back at 5 m/s."""
    traj = platform_trajectory(small_rig, 8, speed=10.0)
    scene = Scene([GROUND], [Box((30.0, 12.0, 3.0), (6.0, 2.0, 3.0))],
                  [Box((-22.0, 0.0, 0.75), (2.0, 1.0, 0.75), 0.0, (5.0, 0.0, 0.0))])
    scans, truths = simulate(scene, small_rig, traj, n_scans=8)
    return scene, traj, scans, truths


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
