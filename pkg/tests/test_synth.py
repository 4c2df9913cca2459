import math
from pathlib import Path

import numpy as np
import pytest

from lmcal.errors import EmptyInputError, ParseError, ValidationError
from lmcal.geometry import ExtrinsicParams, MotorTrajectory, transform_points
from lmcal.synth import (
    PlanePatch,
    SceneModel,
    SensorSpec,
    dump_scene,
    load_scene,
    make_room_scene,
    make_sparse_scene,
    parse_scene,
    regions_for_scene,
    simulate_scan,
)

TINY = SensorSpec(elevation_lines=8, azimuth_samples=60, sweeps=8)


def test_sensor_pattern() -> None:
    sensor = SensorSpec()
    assert sensor.rays_per_sweep == 16 * 360
    dirs = sensor.sweep_directions(0)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
    elevations = np.degrees(np.arcsin(dirs[:, 2]))
    assert elevations.min() == pytest.approx(-29.5)
    assert elevations.max() == pytest.approx(29.5)
    assert not np.allclose(sensor.sweep_directions(1), dirs)
    with pytest.raises(ValidationError):
        SensorSpec(range_sigma=-1.0)


def test_room_scan_lands_on_walls(room_scene, motor_traj) -> None:
    truth = ExtrinsicParams.from_degrees(2.0, -1.5, 0.05, -0.03)
    cloud = simulate_scan(room_scene, TINY, motor_traj, truth, seed=0)
    # a closed room returns every ray
    assert len(cloud) == TINY.rays_per_sweep * TINY.sweeps
    points_B = transform_points(cloud.points, truth, cloud.theta)
    for index, patch in enumerate(room_scene.patches):
        on_patch = cloud.labels == index
        assert on_patch.any()
        np.testing.assert_allclose(patch.signed_distance(points_B[on_patch]), 0.0, atol=1e-9)


def test_simulation_is_deterministic(room_scene, motor_traj) -> None:
    sensor = SensorSpec(elevation_lines=8, azimuth_samples=60, sweeps=8, range_sigma=0.01)
    truth = ExtrinsicParams()
    a = simulate_scan(room_scene, sensor, motor_traj, truth, seed=11)
    b = simulate_scan(room_scene, sensor, motor_traj, truth, seed=11)
    c = simulate_scan(room_scene, sensor, motor_traj, truth, seed=12)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.t, b.t)
    assert not np.array_equal(a.points, c.points)


def test_timestamps_follow_the_motor(room_scene, motor_traj) -> None:
    cloud = simulate_scan(room_scene, TINY, motor_traj, ExtrinsicParams(), seed=0)
    assert np.all(np.diff(cloud.t) >= 0)
    np.testing.assert_allclose(cloud.theta, motor_traj.angle_at(cloud.t))
    assert cloud.angular_span > math.radians(300)


def test_partial_revolution_is_rejected(room_scene) -> None:
    half = MotorTrajectory.constant_speed(duration=5.0, revolutions=0.5)
    with pytest.raises(ValidationError, match="revolution"):
        simulate_scan(room_scene, TINY, half, ExtrinsicParams())


def test_empty_scene_and_misses(motor_traj) -> None:
    with pytest.raises(EmptyInputError):
        simulate_scan(SceneModel(), TINY, motor_traj, ExtrinsicParams())
    far = SceneModel(patches=[PlanePatch(point=(100, 0, 0), normal=(1, 0, 0), half_extents=(1, 1))])
    with pytest.raises(EmptyInputError):
        simulate_scan(far, TINY, motor_traj, ExtrinsicParams())


def test_room_scene_layout() -> None:
    scene = make_room_scene(8.0, 6.0, 3.0)
    names = [p.name for p in scene.patches]
    assert names == ["floor", "ceiling", "wall_east", "wall_west", "wall_north", "wall_south"]
    assert scene.patches[0].point[2] == pytest.approx(-1.5)
    with pytest.raises(ValidationError):
        make_room_scene(0.0, 6.0, 3.0)


def test_sparse_scene_is_seeded() -> None:
    a = make_sparse_scene(5, 3, seed=4)
    b = make_sparse_scene(5, 3, seed=4)
    assert len(a.patches) == 5 and len(a.spheres) == 3
    np.testing.assert_array_equal(a.patches[2].normal, b.patches[2].normal)
    np.testing.assert_array_equal(a.patches[0].normal, [0.0, 0.0, 1.0])
    with pytest.raises(ValidationError):
        make_sparse_scene(0, 0)


def test_load_scene_file(data_dir: Path) -> None:
    scene = load_scene(data_dir / "room.scene")
    assert scene.name == "test_room"
    assert len(scene.patches) == 6 and len(scene.spheres) == 1
    assert scene.patches[0].point[2] == pytest.approx(-1.5)
    assert scene.spheres[0].radius == pytest.approx(0.4)


def test_scene_dump_and_reload(tmp_path: Path) -> None:
    scene = make_sparse_scene(4, 2, seed=9)
    back = load_scene(dump_scene(scene, tmp_path / "sparse.scene"))
    assert back.name == scene.name
    for a, b in zip(scene.patches, back.patches):
        np.testing.assert_array_equal(a.point, b.point)
        np.testing.assert_allclose(a.normal, b.normal, atol=1e-15)
    assert [s.radius for s in back.spheres] == [s.radius for s in scene.spheres]


def test_scene_parse_errors(tmp_path: Path) -> None:
    with pytest.raises(ParseError, match="missing 'normal'"):
        parse_scene("plane p\n    point = 0 0 0\n    extents = 1 1\n")
    with pytest.raises(ParseError, match="Unknown plane field"):
        parse_scene("plane p\n    point = 0 0 0\n    normal = 0 0 1\n    extents = 1 1\n    colour = red\n")
    with pytest.raises(ParseError, match="expected 3 components"):
        parse_scene("sphere\n    center = 0 0\n    radius = 1\n")
    with pytest.raises(ParseError):
        parse_scene("plane p\n    point = 0 0 0\n    normal = 0 0 0\n    extents = 1 1\n")
    with pytest.raises(ParseError, match="Unexpected top-level key"):
        parse_scene("speed = 3\n")
    with pytest.raises(EmptyInputError):
        parse_scene("# Scene: nothing\n")


def test_regions_for_scene_cover_patch_interiors(room_scene) -> None:
    regions = regions_for_scene(room_scene)
    assert [r.name for r in regions] == [p.name for p in room_scene.patches]
    floor = regions[0]
    assert floor.label == 0
    np.testing.assert_allclose(floor.lower, [-3.7, -2.7, -1.75])
    np.testing.assert_allclose(floor.upper, [3.7, 2.7, -1.25])


def test_range_noise_becomes_point_to_plane_scatter(motor_traj) -> None:
    # rays within 22 degrees of nadir meet the ground close to normal incidence
    sensor = SensorSpec(
        elevation_center_deg=-80.0, elevation_fov_deg=20.0, azimuth_samples=360, sweeps=20, range_sigma=0.01
    )
    truth = ExtrinsicParams.from_degrees(2.0, -1.5, 0.05, -0.03)
    cloud = simulate_scan(make_sparse_scene(1, 0), sensor, motor_traj, truth, seed=3)
    assert len(cloud) >= 100_000
    heights = transform_points(cloud.points, truth, cloud.theta)[:, 2] + 1.5
    assert abs(heights.mean()) < 1e-3
    assert heights.std() == pytest.approx(0.01, rel=0.1)


def test_mount_error_raises_plane_scatter(room_cloud, room_scene, room_truth) -> None:
    def rms(ext: ExtrinsicParams) -> float:
        points = transform_points(room_cloud.points, ext, room_cloud.theta)
        total = 0.0
        for index, patch in enumerate(room_scene.patches):
            d = (points[room_cloud.labels == index] - patch.point) @ patch.normal
            total += float(d @ d)
        return math.sqrt(total / len(room_cloud))

    def rolled(degrees: float) -> ExtrinsicParams:
        return ExtrinsicParams(
            roll=room_truth.roll + math.radians(degrees), pitch=room_truth.pitch, tx=room_truth.tx, ty=room_truth.ty
        )

    assert np.all(room_cloud.labels >= 0)
    at_truth = rms(room_truth)
    assert at_truth < 1e-9
    assert rms(rolled(0.5)) > at_truth
    assert rms(rolled(1.0)) > rms(rolled(0.5))
    assert rms(rolled(-1.0)) > rms(rolled(0.5))
