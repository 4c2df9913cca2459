import math
from pathlib import Path

import numpy as np
import pytest

from lmcal.config import RunConfig
from lmcal.errors import DegenerateGeometryError, ValidationError
from lmcal.geometry import ExtrinsicParams, MotorTrajectory
from lmcal.pipeline import CalibrationPipeline, calibrate, limo_solve, vanilla_solve
from lmcal.synth import SensorSpec, make_sparse_scene, simulate_scan


def _errors(ext: ExtrinsicParams, truth: ExtrinsicParams):
    rot = max(abs(math.degrees(ext.roll - truth.roll)), abs(math.degrees(ext.pitch - truth.pitch)))
    trans = max(abs(ext.tx - truth.tx), abs(ext.ty - truth.ty))
    return rot, trans


def test_calibrate_room_from_identity(room_cloud, room_truth) -> None:
    result = calibrate(room_cloud)
    rot, trans = _errors(result.ext, room_truth)
    assert rot < 0.1
    assert trans < 0.005
    assert result.mode == "limo"
    assert result.n_primitives > 0
    assert result.n_correspondences >= 50
    assert set(result.timings) == {"extraction", "association", "solve"}
    assert result.param_trace[-1]["roll"] == result.ext.roll


@pytest.mark.slow
def test_calibrate_full_room_scan(room_cloud_full, room_truth) -> None:
    result = limo_solve(room_cloud_full, ExtrinsicParams())
    assert result.converged
    rot, trans = _errors(result.ext, room_truth)
    assert rot < 0.02
    assert trans < 0.001


@pytest.mark.slow
def test_calibrate_noisy_room_scan(room_cloud_noisy, room_truth) -> None:
    result = calibrate(room_cloud_noisy)
    rot, trans = _errors(result.ext, room_truth)
    assert rot < 0.1
    assert trans < 0.005


def test_vanilla_and_limo_share_the_noiseless_minimizer(room_cloud, room_truth) -> None:
    limo = limo_solve(room_cloud, ExtrinsicParams())
    vanilla = vanilla_solve(room_cloud, ExtrinsicParams())
    assert vanilla.mode == "vanilla"
    rot, trans = _errors(vanilla.ext, limo.ext)
    assert rot < 0.05
    assert trans < 0.002
    rot, trans = _errors(vanilla.ext, room_truth)
    assert rot < 0.02
    assert trans < 0.001


def test_limo_evaluates_fewer_residuals_than_vanilla(room_cloud) -> None:
    limo = calibrate(room_cloud, mode="limo")
    vanilla = calibrate(room_cloud, mode="vanilla")
    assert limo.n_primitives < vanilla.n_primitives
    assert limo.n_correspondences < vanilla.n_correspondences
    assert limo.residual_evaluations < vanilla.residual_evaluations


def test_dump_dir_holds_per_iteration_csvs(tmp_path: Path, room_cloud, room_truth) -> None:
    calibrate(room_cloud, RunConfig(max_outer_iterations=1), room_truth, dump_dir=tmp_path / "dump")
    assert (tmp_path / "dump" / "primitives_01.csv").exists()
    assert (tmp_path / "dump" / "correspondences_01.csv").exists()
    assert not (tmp_path / "dump" / "primitives_02.csv").exists()


def test_worker_count_does_not_change_the_result(room_cloud) -> None:
    serial = calibrate(room_cloud, RunConfig(max_outer_iterations=2, workers=1))
    threaded = calibrate(room_cloud, RunConfig(max_outer_iterations=2, workers=4))
    assert serial.param_trace == threaded.param_trace
    assert serial.final_cost == threaded.final_cost


def test_unknown_mode_is_rejected(room_cloud) -> None:
    with pytest.raises(ValidationError):
        CalibrationPipeline(room_cloud, RunConfig(), mode="fast")


def test_build_counts_iterations(room_cloud, room_truth) -> None:
    pipeline = CalibrationPipeline(room_cloud, RunConfig())
    pipeline.build(room_truth)
    pipeline.build(room_truth)
    assert pipeline.iteration == 2
    assert pipeline.last_candidate_count >= pipeline.last_primitive_count > 0
    assert pipeline.timings["extraction"] > 0.0


def test_single_ground_plane_is_degenerate() -> None:
    # looking down at the ground only: tx and ty are unobservable
    sensor = SensorSpec(
        elevation_lines=32, elevation_center_deg=-30.0, elevation_fov_deg=40.0, azimuth_samples=120, sweeps=24
    )
    traj = MotorTrajectory.constant_speed(duration=10.0, revolutions=1.0)
    cloud = simulate_scan(make_sparse_scene(1, 0), sensor, traj, ExtrinsicParams(), seed=0)
    with pytest.raises(DegenerateGeometryError) as info:
        calibrate(cloud)
    direction = info.value.null_direction
    assert direction["tx"] ** 2 + direction["ty"] ** 2 == pytest.approx(1.0, abs=1e-6)
    assert info.value.exit_code == 3
    assert np.isfinite(list(direction.values())).all()
