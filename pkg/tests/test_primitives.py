import math
from pathlib import Path

import numpy as np
import pytest

from lmcal.cloud_io import MotorStampedCloud
from lmcal.config import RunConfig
from lmcal.errors import DegenerateFitError, EmptyResultError, ValidationError
from lmcal.geometry import ExtrinsicParams
from lmcal.pipeline import CalibrationPipeline
from lmcal.primitives import (
    BaseFrameCloud,
    PlanePrimitive,
    adaptive_k,
    condition_ratio,
    distance_weights,
    dump_primitives_csv,
    extract_candidates,
    filter_primitives,
    fit_plane_robust,
    fit_plane_weighted,
    homogenize_normals,
    normal_to_polar,
    planarity,
    polar_bin,
    voxel_downsample,
)


def _primitive(normal, alpha: float = 0.9, sigma=(1.0, 0.5, 0.001)) -> PlanePrimitive:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return PlanePrimitive(
        anchor=np.zeros(3), anchor_index=0, normal=n, alpha=alpha, weight=alpha,
        sigma=sigma, t_mean=0.0, theta_mean=0.0,
    )


def test_adaptive_k() -> None:
    assert adaptive_k(500_000, 0.01, 50) == 50
    assert adaptive_k(1_000, 0.01, 50) == 10
    assert adaptive_k(100, 0.01, 50) == 3
    with pytest.raises(ValidationError):
        adaptive_k(0, 0.01, 50)


def test_distance_weights_endpoints() -> None:
    w = distance_weights(np.array([0.0, 1.0, 4.0]))
    np.testing.assert_allclose(w, [1.0, 0.5, 0.0])
    np.testing.assert_allclose(distance_weights(np.zeros(4)), 1.0)


def test_planarity_values() -> None:
    assert planarity(1.0, 1.0, 0.0) == pytest.approx(1.0)
    assert planarity(1.0, 1.0, 1.0) == pytest.approx(0.0)
    assert planarity(3.0, 2.0, 1.0) == pytest.approx(1.0 / 3.0)
    assert planarity(0.0, 0.0, 0.0) == 0.0


def test_condition_ratio_floor() -> None:
    assert condition_ratio((1.0, 0.5, 0.0), 0.01) == pytest.approx(100.0)
    assert condition_ratio((1.0, 0.5, 0.1), 0.01) == pytest.approx(10.0)
    assert math.isinf(condition_ratio((1.0, 0.5, 0.0)))


def test_fit_plane_recovers_normal_facing_origin() -> None:
    rng = np.random.default_rng(2)
    uv = rng.uniform(-1, 1, size=(200, 2))
    points = np.column_stack([uv[:, 0], uv[:, 1], np.full(200, 3.0)])
    fit = fit_plane_weighted(points, np.array([0.0, 0.0, 3.0]))
    np.testing.assert_allclose(fit.normal, [0.0, 0.0, -1.0], atol=1e-9)
    assert fit.sigma[2] == pytest.approx(0.0, abs=1e-15)
    assert fit.alpha > 0.8

    unweighted = fit_plane_weighted(points, np.zeros(3), weighted=False)
    np.testing.assert_allclose(unweighted.centroid, points.mean(axis=0))


def test_fit_plane_degenerate_neighbourhoods() -> None:
    with pytest.raises(DegenerateFitError):
        fit_plane_weighted(np.ones((2, 3)), np.zeros(3))
    line = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateFitError, match="collinear"):
        fit_plane_weighted(line, np.array([0.5, 0.0, 0.0]), weighted=False)


def _corner_neighbourhood(n_floor: int, n_wall: int, noise: float = 0.0, seed: int = 3):
    """Floor z = 0 meeting a wall x = 0.3; the anchor sits on the floor at the origin."""
    rng = np.random.default_rng(seed)
    floor = np.column_stack([rng.uniform(-0.5, 0.3, n_floor), rng.uniform(-0.5, 0.5, n_floor), np.zeros(n_floor)])
    wall = np.column_stack([np.full(n_wall, 0.3), rng.uniform(-0.5, 0.5, n_wall), rng.uniform(0.0, 0.5, n_wall)])
    points = np.vstack([np.zeros((1, 3)), floor, wall])
    if noise > 0:
        points[1:] += rng.normal(0.0, noise, size=(points.shape[0] - 1, 3))
    return points


def test_robust_fit_ignores_the_second_surface() -> None:
    points = _corner_neighbourhood(35, 14)
    for weighted in (True, False):
        fit, inliers = fit_plane_robust(points, points[0], weighted=weighted, origin=np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(fit.normal, [0.0, 0.0, 1.0], atol=1e-9)
        assert inliers[:36].all()
        assert not inliers[36:].any()
        assert fit.sigma[2] == pytest.approx(0.0, abs=1e-15)

    # the plain weighted fit over the same points is pulled towards the wall
    mixed = fit_plane_weighted(points, points[0], origin=np.array([0.0, 0.0, 1.0]))
    assert math.degrees(math.acos(min(1.0, mixed.normal[2]))) > 1.0


def test_robust_fit_on_noisy_contaminated_neighbourhood() -> None:
    points = _corner_neighbourhood(40, 10, noise=0.003)
    fit, inliers = fit_plane_robust(points, points[0], origin=np.array([0.0, 0.0, 1.0]))
    assert math.degrees(math.acos(min(1.0, fit.normal[2]))) < 1.0
    assert inliers.mean() >= 0.7
    assert inliers[41:].sum() <= 2


def test_robust_fit_rejects_bad_input() -> None:
    with pytest.raises(DegenerateFitError):
        fit_plane_robust(np.zeros((2, 3)), np.zeros(3))
    line = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateFitError, match="collinear"):
        fit_plane_robust(line, line[0])
    with pytest.raises(ValidationError):
        fit_plane_robust(_corner_neighbourhood(10, 0), np.zeros(3), inlier_distance=0.0)


def test_polar_binning() -> None:
    theta, phi = normal_to_polar(np.array([0.0, 0.0, 1.0]))
    assert theta == pytest.approx(0.0)
    assert polar_bin(theta, phi, 10.0)[0] == 0
    s45 = math.sqrt(0.5)
    tilted = np.array([s45 * math.cos(math.radians(105)), s45 * math.sin(math.radians(105)), s45])
    theta, phi = normal_to_polar(tilted)
    assert math.degrees(theta) == pytest.approx(45.0)
    assert math.degrees(phi) == pytest.approx(105.0)
    assert polar_bin(theta, phi, 10.0) == (4, 28)
    assert polar_bin(*normal_to_polar(np.array([-1.0, 0.0, -0.2])), 10.0) == (10, 35)
    assert polar_bin(math.pi, -math.pi, 10.0) == (17, 0)
    with pytest.raises(ValidationError):
        polar_bin(0.0, 0.0, 7.0)


def test_homogenise_caps_every_bin_at_the_mean() -> None:
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 80))
        prims = [_primitive(rng.normal(size=3) * [1, 1, 0.2] + [0, 0, 0.3 * (i % 2)]) for i in range(n)]
        kept = homogenize_normals(prims, 10.0, seed=trial)
        bins = {}
        for p in prims:
            key = polar_bin(*normal_to_polar(p.normal), 10.0)
            bins[key] = bins.get(key, 0) + 1
        cap = math.ceil(n / len(bins))
        counts = {}
        for p in kept:
            key = polar_bin(*normal_to_polar(p.normal), 10.0)
            counts[key] = counts.get(key, 0) + 1
        assert set(counts) == set(bins)
        assert max(counts.values()) <= cap


def test_homogenise_breaks_a_dominant_direction() -> None:
    floor = [_primitive([0.0, 0.0, 1.0]) for _ in range(100)]
    walls = [_primitive([math.cos(a), math.sin(a), 0.0]) for a in np.radians(np.arange(5, 360, 10))]
    kept = homogenize_normals(floor + walls, 10.0, seed=1)
    kept_floor = sum(1 for p in kept if p.normal[2] > 0.9)
    assert kept_floor == 4
    assert len(kept) - kept_floor == 36
    before = len(floor) / (len(floor) + len(walls))
    assert before >= 2 * kept_floor / len(kept)


def test_homogenise_is_seeded() -> None:
    prims = [_primitive([0.0, 0.0, 1.0]) for _ in range(30)] + [_primitive([1.0, 0.0, 0.0])]
    a = homogenize_normals(prims, 10.0, seed=5)
    b = homogenize_normals(prims, 10.0, seed=5)
    assert [id(p) for p in a] == [id(p) for p in b]
    assert homogenize_normals([], 10.0) == []


def test_filter_primitives() -> None:
    good = _primitive([0, 0, 1], alpha=0.9, sigma=(1.0, 0.5, 0.0))
    flat_line = _primitive([0, 0, 1], alpha=0.2)
    thin = _primitive([0, 0, 1], alpha=0.9, sigma=(10.0, 0.5, 0.0))
    kept = filter_primitives([good, flat_line, thin], 0.5, 100.0, sigma_floor=0.01)
    assert len(kept) == 1 and kept[0] is good
    assert kept[0].weight == pytest.approx(0.9)
    unweighted = filter_primitives([good], 0.5, 100.0, sigma_floor=0.01, reweight=False)
    assert unweighted[0].weight == 1.0


def test_voxel_downsample() -> None:
    points = np.vstack([np.full((12, 3), 0.5), np.full((5, 3), 2.5)])
    kernels = voxel_downsample(points, 1.0, min_support=10)
    assert len(kernels) == 1
    assert kernels[0].index == (0, 0, 0)
    assert kernels[0].count == 12
    with pytest.raises(EmptyResultError):
        voxel_downsample(points, 1.0, min_support=20)
    with pytest.raises(ValidationError):
        voxel_downsample(points, 0.0)


def _two_walls_cloud() -> MotorStampedCloud:
    """Points on x = 3 and y = 3 recorded over a full turn, already in the base frame."""
    rng = np.random.default_rng(8)
    n = 4000
    wall = rng.integers(0, 2, size=n)
    u = rng.uniform(-2.0, 2.0, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    on_x = np.column_stack([np.full(n, 3.0), u, z])
    on_y = np.column_stack([u, np.full(n, 3.0), z])
    points = np.where(wall[:, None] == 0, on_x, on_y)
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    # stored in {L}: undo the motor rotation so the identity mount maps them back
    c, s = np.cos(theta), np.sin(theta)
    local = np.column_stack(
        [c * points[:, 0] + s * points[:, 1], -s * points[:, 0] + c * points[:, 1], points[:, 2]]
    )
    return MotorStampedCloud(points=local, t=theta / (2 * math.pi), theta=theta, labels=wall)


def test_extract_candidates_on_two_walls() -> None:
    cloud = _two_walls_cloud()
    base = BaseFrameCloud.build(cloud, ExtrinsicParams())
    kernels = voxel_downsample(base, 1.0)
    candidates = extract_candidates(base, kernels, 30, neighbor_angle_window_deg=0.0)
    assert candidates
    kept = filter_primitives(candidates, 0.5, 100.0, sigma_floor=0.01)
    assert kept
    for prim in kept:
        on_x = abs(abs(prim.normal[0]) - 1.0) < 1e-6
        on_y = abs(abs(prim.normal[1]) - 1.0) < 1e-6
        assert on_x or on_y
        # normals face the sensor at the origin
        assert prim.normal @ prim.anchor < 0

    parallel = extract_candidates(base, kernels, 30, neighbor_angle_window_deg=0.0, workers=3)
    assert [p.anchor_index for p in parallel] == [p.anchor_index for p in candidates]


@pytest.mark.parametrize("mode", ["limo", "vanilla"])
def test_normals_at_the_true_mount_match_their_surfaces(room_cloud, room_scene, room_truth, mode) -> None:
    pipeline = CalibrationPipeline(room_cloud, RunConfig(mode=mode))
    _, primitives = pipeline.extract(room_truth)
    assert len(primitives) >= 50
    for prim in primitives:
        label = room_cloud.labels[prim.anchor_index]
        assert label >= 0
        true_normal = room_scene.patches[label].normal
        assert abs(prim.normal @ true_normal) == pytest.approx(1.0, abs=1e-12)


def test_dump_primitives_csv(tmp_path: Path) -> None:
    path = dump_primitives_csv([_primitive([0, 0, 1])], tmp_path / "prims.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("ax,ay,az,nx,ny,nz,alpha,weight")
    assert len(lines) == 2
