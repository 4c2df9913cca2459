"""Synthetic motorised-LiDAR scans with known ground-truth extrinsics.

Rays are cast from the LiDAR origin in a fixed pattern of elevation lines
crossed with azimuth samples. Each sweep shifts its azimuths by a golden
ratio fraction of the azimuth step so consecutive sweeps interleave. Ray
times are spread uniformly inside each sweep, so the motor turns while the
sweep is recorded. For a ray with LiDAR-frame direction ``d`` at time ``t``::

    origin_B = R_MB(t) · r_LM
    dir_B    = R_MB(t) · R_LM · d

and a hit at range ``s`` is emitted as ``p_L = s · d``; transforming ``p_L``
with the same extrinsics lands exactly on the hit surface. Gaussian noise is
added to ``s`` (along the ray).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .cloud_io import MotorStampedCloud
from .errors import EmptyInputError, ParseError, ValidationError
from .evaluation import Region
from .geometry import ExtrinsicParams, MotorTrajectory, rot_z_stack
from .parser import parse_file, parse_float, parse_text, parse_vector

__all__ = [
    "ClutterSphere",
    "PlanePatch",
    "SceneModel",
    "SensorSpec",
    "dump_scene",
    "load_scene",
    "make_room_scene",
    "make_sparse_scene",
    "parse_scene",
    "regions_for_scene",
    "simulate_scan",
]

logger = logging.getLogger(__name__)

GOLDEN_FRACTION = (math.sqrt(5.0) - 1.0) / 2.0
_RAY_CHUNK = 65536
_SCENE_BLOCKS = ("plane", "sphere")


def _unit(v: Sequence[float], what: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(3)
    norm = float(np.linalg.norm(arr))
    if not np.all(np.isfinite(arr)) or norm == 0.0:
        raise ValidationError(f"{what} must be a finite non-zero vector")
    return arr / norm


def _default_axis(normal: np.ndarray) -> np.ndarray:
    helper = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    axis = np.cross(helper, normal)
    return axis / np.linalg.norm(axis)


@dataclass(frozen=True, eq=False)
class PlanePatch:
    """Rectangle centred on ``point`` spanned by ``axis`` and ``normal × axis``."""

    point: np.ndarray
    normal: np.ndarray
    half_extents: Tuple[float, float]
    axis: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self) -> None:
        point = np.asarray(self.point, dtype=float).reshape(3)
        if not np.all(np.isfinite(point)):
            raise ValidationError("patch point must be finite")
        normal = _unit(self.normal, "patch normal")
        hu, hv = (float(e) for e in self.half_extents)
        if not (hu > 0 and hv > 0):
            raise ValidationError(f"patch extents must be positive, got {(hu, hv)}")
        if self.axis is None:
            axis = _default_axis(normal)
        else:
            axis = np.asarray(self.axis, dtype=float).reshape(3)
            axis = axis - normal * float(axis @ normal)
            axis = _unit(axis, "patch axis (must not be parallel to the normal)")
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "half_extents", (hu, hv))

    @property
    def second_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.axis)

    @property
    def area(self) -> float:
        return 4.0 * self.half_extents[0] * self.half_extents[1]

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.point) @ self.normal

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit, ``inf`` where the ray misses."""
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            s = ((self.point - origins) @ self.normal) / denom
            s = np.where(np.abs(denom) > 1e-12, s, np.inf)
            local = origins + s[:, None] * dirs - self.point
        local = np.nan_to_num(local, nan=np.inf, posinf=np.inf, neginf=np.inf)
        inside = (np.abs(local @ self.axis) <= self.half_extents[0]) & (
            np.abs(local @ self.second_axis) <= self.half_extents[1]
        )
        return np.where(inside & (s > 0), s, np.inf)


@dataclass(frozen=True, eq=False)
class ClutterSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=float).reshape(3)
        if not np.all(np.isfinite(center)):
            raise ValidationError("sphere center must be finite")
        if not self.radius > 0:
            raise ValidationError(f"sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.clip(disc, 0.0, None))
        near, far = -b - root, -b + root
        s = np.where(near > 0, near, far)
        return np.where((disc >= 0) & (s > 0), s, np.inf)


@dataclass
class SceneModel:
    patches: List[PlanePatch] = field(default_factory=list)
    spheres: List[ClutterSphere] = field(default_factory=list)
    name: str = "scene"

    def __len__(self) -> int:
        return len(self.patches) + len(self.spheres)


@dataclass(frozen=True)
class SensorSpec:
    """Simplified non-repetitive scan pattern of a 360x59 degree LiDAR."""

    azimuth_fov_deg: float = 360.0
    elevation_fov_deg: float = 59.0
    elevation_center_deg: float = 0.0
    elevation_lines: int = 16
    azimuth_samples: int = 360
    sweeps: int = 40
    range_sigma: float = 0.0
    range_min: float = 0.1
    range_max: float = 40.0

    def __post_init__(self) -> None:
        if not (0 < self.azimuth_fov_deg <= 360.0):
            raise ValidationError("azimuth_fov_deg must lie in (0, 360]")
        if not (0 < self.elevation_fov_deg < 180.0):
            raise ValidationError("elevation_fov_deg must lie in (0, 180)")
        if self.elevation_lines < 1 or self.azimuth_samples < 1 or self.sweeps < 1:
            raise ValidationError("elevation_lines, azimuth_samples and sweeps must be >= 1")
        if self.range_sigma < 0:
            raise ValidationError("range_sigma must be >= 0")
        if not (0 <= self.range_min < self.range_max):
            raise ValidationError("range limits must satisfy 0 <= min < max")

    @property
    def rays_per_sweep(self) -> int:
        return self.elevation_lines * self.azimuth_samples

    def elevations(self) -> np.ndarray:
        half = self.elevation_fov_deg / 2.0
        if self.elevation_lines == 1:
            return np.radians([self.elevation_center_deg])
        return np.radians(
            np.linspace(
                self.elevation_center_deg - half,
                self.elevation_center_deg + half,
                self.elevation_lines,
            )
        )

    def sweep_directions(self, sweep: int) -> np.ndarray:
        """(rays_per_sweep, 3) unit directions in {L}, azimuth-major."""
        step = self.azimuth_fov_deg / self.azimuth_samples
        offset = ((sweep * GOLDEN_FRACTION) % 1.0) * step
        az = np.radians(
            -self.azimuth_fov_deg / 2.0 + offset + step * np.arange(self.azimuth_samples)
        )
        el = self.elevations()
        az_grid, el_grid = np.meshgrid(az, el, indexing="ij")
        az_flat, el_flat = az_grid.ravel(), el_grid.ravel()
        return np.column_stack(
            [
                np.cos(el_flat) * np.cos(az_flat),
                np.cos(el_flat) * np.sin(az_flat),
                np.sin(el_flat),
            ]
        )


def _cast(scene: SceneModel, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest hit range and label (patch index, -1 for spheres, -2 for misses)."""
    best = np.full(origins.shape[0], np.inf)
    label = np.full(origins.shape[0], -2, dtype=np.int64)
    for index, patch in enumerate(scene.patches):
        s = patch.intersect(origins, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        label = np.where(closer, index, label)
    for sphere in scene.spheres:
        s = sphere.intersect(origins, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        label = np.where(closer, -1, label)
    return best, label


def simulate_scan(
    scene: SceneModel,
    sensor: SensorSpec,
    traj: MotorTrajectory,
    ext_true: ExtrinsicParams,
    seed: int = 0,
) -> MotorStampedCloud:
    """Ray-cast ``scene`` while the motor follows ``traj``; deterministic per seed."""
    if traj.angular_span < 2.0 * math.pi - 1e-9:
        raise ValidationError(
            f"trajectory covers {math.degrees(traj.angular_span):.1f} deg; "
            "a full motor revolution is required"
        )
    if len(scene) == 0:
        raise EmptyInputError("scene has no geometry")

    rng = np.random.default_rng(seed)
    R_LM, r_LM = ext_true.rotation, ext_true.translation
    n_rays = sensor.rays_per_sweep
    sweep_duration = (traj.end - traj.start) / sensor.sweeps

    points, times, thetas, labels = [], [], [], []
    for sweep in range(sensor.sweeps):
        dirs_L = sensor.sweep_directions(sweep)
        t_all = traj.start + sweep_duration * (sweep + np.arange(n_rays) / n_rays)
        for lo in range(0, n_rays, _RAY_CHUNK):
            hi = min(lo + _RAY_CHUNK, n_rays)
            d_L, t = dirs_L[lo:hi], t_all[lo:hi]
            theta = np.asarray(traj.angle_at(t))
            R_MB = rot_z_stack(theta)
            origins = R_MB @ r_LM
            dirs_B = np.einsum("nij,nj->ni", R_MB, d_L @ R_LM.T)
            s, label = _cast(scene, origins, dirs_B)
            hit = np.isfinite(s) & (s >= sensor.range_min) & (s <= sensor.range_max)
            if not hit.any():
                continue
            s = s[hit]
            if sensor.range_sigma > 0:
                s = s + rng.normal(0.0, sensor.range_sigma, size=s.shape[0])
            keep = (s >= sensor.range_min) & (s <= sensor.range_max)
            points.append(s[keep, None] * d_L[hit][keep])
            times.append(t[hit][keep])
            thetas.append(theta[hit][keep])
            labels.append(label[hit][keep])

    if not points:
        raise EmptyInputError(f"no ray of the sensor pattern hits scene '{scene.name}'")
    cloud = MotorStampedCloud(
        points=np.concatenate(points),
        t=np.concatenate(times),
        theta=np.concatenate(thetas),
        source_id=f"synth:{scene.name}:seed{seed}",
        labels=np.concatenate(labels),
        trajectory=traj,
    )
    logger.info(
        "Simulated %d points from %d rays (%d sweeps) on '%s'",
        len(cloud),
        n_rays * sensor.sweeps,
        sensor.sweeps,
        scene.name,
    )
    return cloud


# ---------------------------------------------------------------------------
# Scene presets


def make_room_scene(width: float, depth: float, height: float) -> SceneModel:
    """Closed box centred on the origin; normals point out of the room."""
    if not (width > 0 and depth > 0 and height > 0):
        raise ValidationError(f"room dimensions must be positive, got {(width, depth, height)}")
    w, d, h = width / 2.0, depth / 2.0, height / 2.0
    ex, ey, ez = np.eye(3)
    patches = [
        PlanePatch(point=(0, 0, -h), normal=-ez, half_extents=(w, d), axis=ex, name="floor"),
        PlanePatch(point=(0, 0, h), normal=ez, half_extents=(w, d), axis=ex, name="ceiling"),
        PlanePatch(point=(w, 0, 0), normal=ex, half_extents=(d, h), axis=ey, name="wall_east"),
        PlanePatch(point=(-w, 0, 0), normal=-ex, half_extents=(d, h), axis=ey, name="wall_west"),
        PlanePatch(point=(0, d, 0), normal=ey, half_extents=(w, h), axis=ex, name="wall_north"),
        PlanePatch(point=(0, -d, 0), normal=-ey, half_extents=(w, h), axis=ex, name="wall_south"),
    ]
    return SceneModel(patches=patches, name=f"room_{width:g}x{depth:g}x{height:g}")


def make_sparse_scene(
    n_planes: int,
    n_clutter: int,
    seed: int = 0,
    *,
    ground_height: float = 1.5,
) -> SceneModel:
    """Ground plane, ``n_planes - 1`` scattered wall-like patches and clutter spheres."""
    if n_planes < 1:
        raise ValidationError("a sparse scene needs at least one plane")
    if n_clutter < 0:
        raise ValidationError("n_clutter must be >= 0")
    rng = np.random.default_rng(seed)
    patches = [
        PlanePatch(
            point=(0.0, 0.0, -ground_height),
            normal=(0.0, 0.0, 1.0),
            half_extents=(15.0, 15.0),
            axis=(1.0, 0.0, 0.0),
            name="ground",
        )
    ]
    for index in range(1, n_planes):
        azimuth = rng.uniform(-math.pi, math.pi)
        distance = rng.uniform(4.0, 12.0)
        tilt = rng.uniform(-0.3, 0.3)
        yaw = rng.uniform(-0.5, 0.5)
        centre = np.array(
            [distance * math.cos(azimuth), distance * math.sin(azimuth), rng.uniform(-0.5, 1.0)]
        )
        facing = azimuth + math.pi + yaw
        normal = np.array(
            [math.cos(tilt) * math.cos(facing), math.cos(tilt) * math.sin(facing), math.sin(tilt)]
        )
        patches.append(
            PlanePatch(
                point=centre,
                normal=normal,
                half_extents=(rng.uniform(1.0, 4.0), rng.uniform(1.0, 2.5)),
                axis=(-math.sin(facing), math.cos(facing), 0.0),
                name=f"patch_{index}",
            )
        )
    spheres = []
    for _ in range(n_clutter):
        azimuth = rng.uniform(-math.pi, math.pi)
        distance = rng.uniform(2.5, 10.0)
        spheres.append(
            ClutterSphere(
                center=(
                    distance * math.cos(azimuth),
                    distance * math.sin(azimuth),
                    rng.uniform(-ground_height + 0.3, 1.0),
                ),
                radius=rng.uniform(0.2, 0.8),
            )
        )
    return SceneModel(patches=patches, spheres=spheres, name=f"sparse_{n_planes}_{n_clutter}_s{seed}")


def regions_for_scene(
    scene: SceneModel, *, margin: float = 0.3, thickness: float = 0.25
) -> List[Region]:
    """One evaluation box per patch, shrunk ``margin`` away from the patch edges."""
    regions = []
    for index, patch in enumerate(scene.patches):
        hu = patch.half_extents[0] - margin
        hv = patch.half_extents[1] - margin
        if hu <= 0 or hv <= 0:
            continue
        corners = np.array(
            [
                patch.point + su * hu * patch.axis + sv * hv * patch.second_axis + sn * thickness * patch.normal
                for su in (-1, 1)
                for sv in (-1, 1)
                for sn in (-1, 1)
            ]
        )
        regions.append(
            Region(
                name=patch.name or f"patch_{index}",
                lower=corners.min(axis=0),
                upper=corners.max(axis=0),
                label=index,
            )
        )
    return regions


# ---------------------------------------------------------------------------
# Scene files


def _scene_from_result(result, name: str) -> SceneModel:
    if result.settings:
        entry = result.settings[0]
        raise ParseError(entry.line_num, f"Unexpected top-level key '{entry.key}' in scene", entry.line)
    scene = SceneModel(name=result.metadata.get("Scene", name))
    for block in result.blocks:
        if block.kind == "plane":
            allowed = {"point", "normal", "axis", "extents"}
            unknown = set(block.keys()) - allowed
            if unknown:
                raise ParseError(block.line_num, f"Unknown plane field(s): {sorted(unknown)}")
            axis_entry = block.get("axis")
            extents = parse_vector(block.require("extents"), 2)
            try:
                patch = PlanePatch(
                    point=parse_vector(block.require("point")),
                    normal=parse_vector(block.require("normal")),
                    half_extents=(float(extents[0]), float(extents[1])),
                    axis=None if axis_entry is None else parse_vector(axis_entry),
                    name=block.name or f"patch_{len(scene.patches)}",
                )
            except ValidationError as exc:
                raise ParseError(block.line_num, str(exc)) from exc
            scene.patches.append(patch)
        else:
            unknown = set(block.keys()) - {"center", "radius"}
            if unknown:
                raise ParseError(block.line_num, f"Unknown sphere field(s): {sorted(unknown)}")
            try:
                sphere = ClutterSphere(
                    center=parse_vector(block.require("center")),
                    radius=parse_float(block.require("radius")),
                )
            except ValidationError as exc:
                raise ParseError(block.line_num, str(exc)) from exc
            scene.spheres.append(sphere)
    if not scene.patches and not scene.spheres:
        raise EmptyInputError(f"scene '{scene.name}' defines no geometry")
    return scene


def load_scene(path: Union[str, Path]) -> SceneModel:
    path = Path(path)
    return _scene_from_result(parse_file(path, _SCENE_BLOCKS), path.stem)


def parse_scene(text: str, base_dir: Union[str, Path] = ".") -> SceneModel:
    return _scene_from_result(
        parse_text(text, base_dir=Path(base_dir), block_kinds=_SCENE_BLOCKS), "scene"
    )


def _fmt(v: np.ndarray) -> str:
    return ", ".join(f"{x:.17g}" for x in v)


def dump_scene(scene: SceneModel, path: Union[str, Path]) -> Path:
    lines = [f"# Scene: {scene.name}", ""]
    for patch in scene.patches:
        lines.append(f"plane {patch.name}" if patch.name else "plane")
        lines.append(f"    point = {_fmt(patch.point)}")
        lines.append(f"    normal = {_fmt(patch.normal)}")
        lines.append(f"    axis = {_fmt(patch.axis)}")
        lines.append(f"    extents = {_fmt(np.array(patch.half_extents))}")
    for sphere in scene.spheres:
        lines.append("sphere")
        lines.append(f"    center = {_fmt(sphere.center)}")
        lines.append(f"    radius = {sphere.radius:.17g}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
