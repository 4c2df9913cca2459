from dataclasses import replace
from pathlib import Path

import pytest

from lmcal.geometry import ExtrinsicParams, MotorTrajectory
from lmcal.synth import SensorSpec, make_room_scene, simulate_scan

DATA = Path(__file__).parent / "data"

ROOM_TRUTH = ExtrinsicParams.from_degrees(2.0, -1.5, 0.05, -0.03)
SMALL_SENSOR = SensorSpec(azimuth_samples=180, sweeps=20)


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def motor_traj() -> MotorTrajectory:
    return MotorTrajectory.constant_speed(duration=10.0, revolutions=1.0)


@pytest.fixture(scope="session")
def room_scene():
    return make_room_scene(8.0, 6.0, 3.0)


@pytest.fixture(scope="session")
def room_cloud(room_scene, motor_traj):
    """Noise-free room scan with the reference mounting error, reduced ray count."""
    return simulate_scan(room_scene, SMALL_SENSOR, motor_traj, ROOM_TRUTH, seed=0)


@pytest.fixture(scope="session")
def room_cloud_small_noisy(room_scene, motor_traj):
    """Reduced ray count with 5 mm range noise."""
    return simulate_scan(room_scene, replace(SMALL_SENSOR, range_sigma=0.005), motor_traj, ROOM_TRUTH, seed=11)


@pytest.fixture(scope="session")
def room_cloud_full(room_scene, motor_traj):
    return simulate_scan(room_scene, SensorSpec(), motor_traj, ROOM_TRUTH, seed=0)


@pytest.fixture(scope="session")
def room_cloud_noisy(room_scene, motor_traj):
    sensor = SensorSpec(range_sigma=0.005)
    return simulate_scan(room_scene, sensor, motor_traj, ROOM_TRUTH, seed=7)


@pytest.fixture(scope="session")
def room_truth() -> ExtrinsicParams:
    return ROOM_TRUTH
