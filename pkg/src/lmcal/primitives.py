"""Weighted planar primitives: voxel kernels, local plane fits, homogenisation.

The cloud is first expressed in the base frame under the current extrinsic
estimate. Occupied voxels give kernels. Each kernel is anchored at the cloud
point nearest its centroid and gets an adaptive-k neighbourhood around that
anchor, gated to points recorded near the anchor's motor angle. A robust
distance-weighted plane fit gives its normal and planarity score. Planar
candidates are then filtered and their normals homogenised over polar bins
so no single orientation dominates the objective.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import MotorStampedCloud
from .errors import DegenerateFitError, EmptyResultError, ValidationError
from .geometry import ExtrinsicParams, transform_points, wrap_angle

__all__ = [
    "BaseFrameCloud",
    "PlaneFit",
    "PlanePrimitive",
    "VoxelKernel",
    "adaptive_k",
    "condition_ratio",
    "distance_weights",
    "dump_primitives_csv",
    "extract_candidates",
    "filter_primitives",
    "fit_plane_robust",
    "fit_plane_weighted",
    "homogenize_normals",
    "normal_to_polar",
    "planarity",
    "polar_bin",
    "voxel_downsample",
]

logger = logging.getLogger(__name__)

MIN_VOXEL_SUPPORT = 10
MIN_NEIGHBORS = 3
_MAX_QUERY = 8192
_CONSENSUS_POINTS = 32
_MAD_TO_SIGMA = 1.4826
_TRIM_FLOOR = 1e-9
_MAX_REFITS = 10


@dataclass
class BaseFrameCloud:
    """A stamped cloud transformed into {B} under one extrinsic estimate."""

    cloud: MotorStampedCloud
    ext: ExtrinsicParams
    theta: np.ndarray
    points: np.ndarray

    @classmethod
    def build(
        cls,
        cloud: MotorStampedCloud,
        ext: ExtrinsicParams,
        theta: Optional[np.ndarray] = None,
    ) -> "BaseFrameCloud":
        theta = cloud.theta if theta is None else np.asarray(theta, dtype=float)
        return cls(cloud=cloud, ext=ext, theta=theta, points=transform_points(cloud.points, ext, theta))

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)


@dataclass(frozen=True)
class VoxelKernel:
    center: np.ndarray
    index: Tuple[int, int, int]
    count: int


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    sigma: Tuple[float, float, float]
    alpha: float
    centroid: np.ndarray


@dataclass
class PlanePrimitive:
    """A kernel's anchor point with its fitted plane."""

    anchor: np.ndarray
    anchor_index: int
    normal: np.ndarray
    alpha: float
    weight: float
    sigma: Tuple[float, float, float]
    t_mean: float
    theta_mean: float
    center: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(3))
    support: int = 0

    @property
    def offset(self) -> float:
        """Plane offset d in n·x = d, through the anchor."""
        return float(self.normal @ self.anchor)


# ---------------------------------------------------------------------------
# Formulas


def adaptive_k(total_points: int, gamma: float, k_max: int, k_min: int = MIN_NEIGHBORS) -> int:
    """k = min(k_max, floor(gamma * |P|)), never below ``k_min``."""
    if total_points < 1:
        raise ValidationError(f"total_points must be >= 1, got {total_points}")
    if gamma <= 0 or k_max < 1:
        raise ValidationError("gamma must be positive and k_max >= 1")
    k = min(int(k_max), int(math.floor(gamma * total_points + 1e-9)))
    return max(int(k_min), k)


def distance_weights(sq_distances: np.ndarray) -> np.ndarray:
    """w_i = 1 - sqrt(d_i / d_max) with d_i squared distances to the kernel centre."""
    d = np.asarray(sq_distances, dtype=float)
    d_max = float(d.max()) if d.size else 0.0
    if d_max <= 0.0:
        return np.ones_like(d)
    return 1.0 - np.sqrt(d / d_max)


def planarity(s0: float, s1: float, s2: float) -> float:
    """alpha = 2 (s1 - s2) / (s0 + s1 + s2)."""
    total = s0 + s1 + s2
    if total <= 0.0:
        return 0.0
    return 2.0 * (s1 - s2) / total


def condition_ratio(sigma: Sequence[float], sigma_floor: float = 0.0) -> float:
    s0, _, s2 = sigma
    denom = max(s2, sigma_floor)
    if denom <= 0.0:
        return math.inf
    return s0 / denom


def fit_plane_weighted(
    neighbors: np.ndarray,
    kernel_center: np.ndarray,
    *,
    weighted: bool = True,
    origin: Optional[np.ndarray] = None,
    anchor: Optional[np.ndarray] = None,
) -> PlaneFit:
    """SVD of the distance-weighted covariance; normal faces ``origin``."""
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if pts.shape[0] < MIN_NEIGHBORS:
        raise DegenerateFitError(f"plane fit needs >= {MIN_NEIGHBORS} points, got {pts.shape[0]}")
    center = np.asarray(kernel_center, dtype=float)
    if weighted:
        w = distance_weights(np.sum((pts - center) ** 2, axis=1))
    else:
        w = np.ones(pts.shape[0])
    w_sum = float(w.sum())
    if w_sum <= 0.0:
        raise DegenerateFitError("all neighbour weights vanish")
    centroid = (w @ pts) / w_sum
    diff = pts - centroid
    cov = (diff * w[:, None]).T @ diff / w_sum
    u, s, _ = np.linalg.svd(cov)
    s0, s1, s2 = (float(v) for v in s)
    if s0 <= 0.0:
        raise DegenerateFitError("neighbourhood points are coincident")
    if s1 <= 1e-12 * s0:
        raise DegenerateFitError("neighbourhood points are collinear")
    normal = u[:, 2] / np.linalg.norm(u[:, 2])
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    ref = centroid if anchor is None else np.asarray(anchor, dtype=float)
    if normal @ (origin - ref) < 0.0:
        normal = -normal
    return PlaneFit(normal=normal, sigma=(s0, s1, s2), alpha=planarity(s0, s1, s2), centroid=centroid)


def normal_to_polar(n: np.ndarray) -> Tuple[float, float]:
    """(theta, phi) = (arccos n_z, atan2(n_y, n_x))."""
    x, y, z = (float(v) for v in n)
    return math.acos(max(-1.0, min(1.0, z))), math.atan2(y, x)


def _bin_counts(bin_width_deg: float) -> Tuple[int, int]:
    if bin_width_deg <= 0:
        raise ValidationError("bin_width must be positive")
    ratio = 180.0 / bin_width_deg
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValidationError(f"bin_width {bin_width_deg} does not divide 180 evenly")
    return int(round(ratio)), 2 * int(round(ratio))


def polar_bin(theta: float, phi: float, bin_width_deg: float) -> Tuple[int, int]:
    n_theta, n_phi = _bin_counts(bin_width_deg)
    width = math.radians(bin_width_deg)
    i = min(int(math.floor(theta / width)), n_theta - 1)
    j = min(int(math.floor((phi + math.pi) / width)), n_phi - 1)
    return max(i, 0), max(j, 0)


# ---------------------------------------------------------------------------
# Pipeline stages


def voxel_downsample(
    points: Union[np.ndarray, BaseFrameCloud],
    voxel_size: float,
    min_support: int = MIN_VOXEL_SUPPORT,
) -> List[VoxelKernel]:
    """One kernel (member centroid) per voxel holding at least ``min_support`` points."""
    if voxel_size <= 0:
        raise ValidationError(f"voxel_size must be positive, got {voxel_size}")
    pts = points.points if isinstance(points, BaseFrameCloud) else np.asarray(points, dtype=float)
    if pts.shape[0] == 0:
        raise EmptyResultError("cannot voxelise an empty cloud")
    keys = np.floor(pts / voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, pts)
    kernels = [
        VoxelKernel(center=sums[i] / counts[i], index=tuple(int(v) for v in uniq[i]), count=int(counts[i]))
        for i in np.flatnonzero(counts >= min_support)
    ]
    if not kernels:
        raise EmptyResultError(
            f"no voxel of size {voxel_size} m holds >= {min_support} points "
            f"({uniq.shape[0]} occupied voxels)"
        )
    logger.debug("%d of %d occupied voxels kept as kernels", len(kernels), uniq.shape[0])
    return kernels


def _anchor_indices(base: BaseFrameCloud, centers: np.ndarray, workers: int) -> np.ndarray:
    """Cloud point nearest each kernel centroid."""
    _, idx = base.tree.query(centers, k=1, workers=workers)
    return np.asarray(idx, dtype=np.int64).reshape(-1)


def _neighbourhoods(
    base: BaseFrameCloud,
    anchors: np.ndarray,
    k: int,
    angle_window: float,
    workers: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (K, k) padded with -1 and valid counts; column 0 is the anchor.

    Neighbourhoods are centred on the anchor point and, when ``angle_window``
    is positive, restricted to points recorded within the window of the
    anchor's motor angle.
    """
    n = len(base)
    if angle_window > 0.0:
        oversample = int(math.ceil(2.0 * math.pi / angle_window))
        query_k = min(n, max(k, k * oversample), _MAX_QUERY)
    else:
        query_k = min(n, k)
    _, idx = base.tree.query(base.points[anchors], k=query_k, workers=workers)
    idx = np.asarray(idx).reshape(len(anchors), -1)

    ok = idx != anchors[:, None]
    if angle_window > 0.0:
        anchor_theta = base.theta[anchors]
        ok &= np.abs(wrap_angle(base.theta[idx] - anchor_theta[:, None])) <= angle_window
    ok &= np.cumsum(ok, axis=1) <= k - 1

    count = ok.sum(axis=1) + 1
    out_idx = np.full((len(anchors), k), -1, dtype=np.int64)
    out_idx[:, 0] = anchors
    for row in range(len(anchors)):
        sel = idx[row, ok[row]]
        out_idx[row, 1 : 1 + sel.size] = sel
    return out_idx, count


def _consensus_normal(rel: np.ndarray, inlier_distance: float) -> np.ndarray:
    """Normal of the plane through the anchor with the lowest truncated cost.

    ``rel`` holds neighbour offsets from the anchor, nearest first. Hypotheses
    are spanned by pairs of the nearest offsets; each is scored with
    sum(min(d^2, inlier_distance^2)) over all neighbours.
    """
    near = rel[:_CONSENSUS_POINTS]
    i, j = np.triu_indices(near.shape[0], k=1)
    cross = np.cross(near[i], near[j])
    norm = np.linalg.norm(cross, axis=1)
    span = np.linalg.norm(near[i], axis=1) * np.linalg.norm(near[j], axis=1)
    ok = norm > 1e-6 * span
    if not ok.any():
        raise DegenerateFitError("neighbourhood points are collinear")
    normals = cross[ok] / norm[ok, None]
    cost = np.minimum(np.square(rel @ normals.T), inlier_distance**2).sum(axis=0)
    return normals[int(np.argmin(cost))]


def fit_plane_robust(
    neighbors: np.ndarray,
    anchor: np.ndarray,
    *,
    weighted: bool = True,
    inlier_distance: float = 0.05,
    origin: Optional[np.ndarray] = None,
) -> Tuple[PlaneFit, np.ndarray]:
    """Plane through a neighbourhood that may straddle several surfaces.

    A consensus plane through ``anchor`` seeds the inlier set, which is then
    refined by refitting on points within three robust standard deviations
    (capped at ``inlier_distance``) until it stops changing. Weights are
    centred on ``anchor``. Returns the fit and the inlier mask.
    """
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if pts.shape[0] < MIN_NEIGHBORS:
        raise DegenerateFitError(f"plane fit needs >= {MIN_NEIGHBORS} points, got {pts.shape[0]}")
    if inlier_distance <= 0:
        raise ValidationError(f"inlier_distance must be positive, got {inlier_distance}")
    anchor = np.asarray(anchor, dtype=float)
    normal = _consensus_normal(pts - anchor, inlier_distance)
    point = anchor
    inliers: Optional[np.ndarray] = None
    fit: Optional[PlaneFit] = None
    for _ in range(_MAX_REFITS):
        d = np.abs((pts - point) @ normal)
        threshold = min(max(_MAD_TO_SIGMA * 3.0 * float(np.median(d)), _TRIM_FLOOR), inlier_distance)
        mask = d <= threshold
        if int(mask.sum()) < MIN_NEIGHBORS:
            raise DegenerateFitError("too few points on the consensus plane")
        if inliers is not None and np.array_equal(mask, inliers):
            break
        inliers = mask
        fit = fit_plane_weighted(pts[mask], anchor, weighted=weighted, origin=origin, anchor=anchor)
        normal, point = fit.normal, fit.centroid
    return fit, inliers  # type: ignore[return-value]


def _fit_kernel(
    base: BaseFrameCloud,
    kernel: VoxelKernel,
    members: np.ndarray,
    *,
    weighted: bool,
    inlier_distance: float,
    inlier_fraction_min: float,
) -> Optional[PlanePrimitive]:
    anchor_index = int(members[0])
    anchor = base.points[anchor_index]
    try:
        fit, inliers = fit_plane_robust(
            base.points[members], anchor, weighted=weighted, inlier_distance=inlier_distance
        )
    except DegenerateFitError as exc:
        logger.debug("kernel %s skipped: %s", kernel.index, exc)
        return None
    if not inliers[0]:
        logger.debug("kernel %s skipped: anchor is off its plane", kernel.index)
        return None
    fraction = float(inliers.mean())
    if fraction < inlier_fraction_min:
        logger.debug("kernel %s skipped: %.2f of its neighbourhood on one plane", kernel.index, fraction)
        return None
    support = members[inliers]
    anchor_theta = float(base.theta[anchor_index])
    theta_mean = anchor_theta + float(np.mean(wrap_angle(base.theta[support] - anchor_theta)))
    return PlanePrimitive(
        anchor=anchor.copy(),
        anchor_index=anchor_index,
        normal=fit.normal,
        alpha=fit.alpha,
        weight=fit.alpha if weighted else 1.0,
        sigma=fit.sigma,
        t_mean=float(np.mean(base.cloud.t[support])),
        theta_mean=theta_mean,
        center=np.asarray(kernel.center, dtype=float),
        support=int(support.size),
    )


def extract_candidates(
    base: BaseFrameCloud,
    kernels: Sequence[VoxelKernel],
    k: int,
    *,
    neighbor_angle_window_deg: float = 5.0,
    weighted: bool = True,
    inlier_distance: float = 0.05,
    inlier_fraction_min: float = 0.8,
    workers: int = 1,
) -> List[PlanePrimitive]:
    """Fit a plane around every kernel's anchor; kernels in kernel order, failures skipped."""
    if not kernels:
        return []
    if not 0.0 < inlier_fraction_min <= 1.0:
        raise ValidationError(f"inlier_fraction_min must be in (0, 1], got {inlier_fraction_min}")
    workers = max(1, workers)
    centers = np.array([kern.center for kern in kernels])
    anchors = _anchor_indices(base, centers, workers)
    idx, count = _neighbourhoods(base, anchors, k, math.radians(neighbor_angle_window_deg), workers)

    def fit_range(lo: int, hi: int) -> List[Optional[PlanePrimitive]]:
        out: List[Optional[PlanePrimitive]] = []
        for row in range(lo, hi):
            if count[row] < MIN_NEIGHBORS:
                out.append(None)
                continue
            out.append(
                _fit_kernel(
                    base,
                    kernels[row],
                    idx[row, : count[row]],
                    weighted=weighted,
                    inlier_distance=inlier_distance,
                    inlier_fraction_min=inlier_fraction_min,
                )
            )
        return out

    if workers > 1 and len(kernels) > workers:
        bounds = np.linspace(0, len(kernels), workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: fit_range(b[0], b[1]), zip(bounds[:-1], bounds[1:])))
        fitted = [p for part in parts for p in part]
    else:
        fitted = fit_range(0, len(kernels))

    candidates = [p for p in fitted if p is not None]
    logger.info("%d plane candidates from %d kernels (k=%d)", len(candidates), len(kernels), k)
    return candidates


def filter_primitives(
    candidates: Iterable[PlanePrimitive],
    planarity_min: float,
    cond_max: float,
    *,
    sigma_floor: float = 0.0,
    reweight: bool = True,
) -> List[PlanePrimitive]:
    """Keep alpha >= planarity_min and s0/max(s2, floor) <= cond_max; weight = alpha or 1."""
    kept = []
    for prim in candidates:
        if prim.alpha < planarity_min:
            continue
        if condition_ratio(prim.sigma, sigma_floor) > cond_max:
            continue
        prim.weight = prim.alpha if reweight else 1.0
        kept.append(prim)
    return kept


def homogenize_normals(
    primitives: Sequence[PlanePrimitive],
    bin_width_deg: float = 10.0,
    seed: int = 0,
) -> List[PlanePrimitive]:
    """Subsample polar bins holding more than the mean non-empty bin count."""
    _bin_counts(bin_width_deg)
    if not primitives:
        return []
    bins: dict = {}
    for i, prim in enumerate(primitives):
        theta, phi = normal_to_polar(prim.normal)
        bins.setdefault(polar_bin(theta, phi, bin_width_deg), []).append(i)

    average = len(primitives) / len(bins)
    cap = int(math.ceil(average - 1e-12))
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(primitives), dtype=bool)
    for key in sorted(bins):
        members = np.asarray(bins[key])
        if members.size > average:
            members = rng.choice(members, size=min(cap, members.size), replace=False)
        keep[members] = True

    result = [prim for prim, kept in zip(primitives, keep) if kept]
    logger.info(
        "Homogenised %d -> %d primitives over %d bins (mean %.1f)",
        len(primitives),
        len(result),
        len(bins),
        average,
    )
    return result


def dump_primitives_csv(
    primitives: Sequence[PlanePrimitive], path: Union[str, Path], bin_width_deg: float = 10.0
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["ax", "ay", "az", "nx", "ny", "nz", "alpha", "weight", "theta_bin", "phi_bin"])
        for prim in primitives:
            theta_bin, phi_bin = polar_bin(*normal_to_polar(prim.normal), bin_width_deg)
            writer.writerow(
                [*(f"{v:.9g}" for v in prim.anchor), *(f"{v:.9g}" for v in prim.normal),
                 f"{prim.alpha:.9g}", f"{prim.weight:.9g}", theta_bin, phi_bin]
            )
    return path
