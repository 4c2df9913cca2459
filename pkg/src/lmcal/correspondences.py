"""Cross-angle point pairs on planar primitives.

A primitive is anchored at the cloud point nearest its kernel centre (time
``t_n``). Its partner is the nearest point, in the base frame under the
current estimate, that was recorded at a motor angle at least ``min_angle_sep``
away and lies within ``r_corr`` of the primitive's plane. The partner may lie
any distance from the anchor along the plane. The pair carries the
point-to-plane residual

    r = nᵀ [x_B(p_m, t_m) - x_B(p_n, t_n)]

which vanishes when both observations land on the same plane.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import InsufficientOverlapError, ValidationError
from .geometry import ExtrinsicParams, MotorTrajectory, transform_point, transform_points, rot_z, wrap_angle
from .primitives import BaseFrameCloud, PlanePrimitive

__all__ = [
    "Correspondence",
    "CorrespondenceSet",
    "build_correspondences",
    "dump_correspondences_csv",
    "residual",
    "residuals",
]

logger = logging.getLogger(__name__)

_PARTNER_QUERY = 16
_MAX_PARTNER_QUERY = 4096


@dataclass(frozen=True)
class Correspondence:
    normal: np.ndarray
    point_n: np.ndarray
    t_n: float
    theta_n: float
    point_m: np.ndarray
    t_m: float
    theta_m: float
    weight: float = 1.0


@dataclass
class CorrespondenceSet:
    """Correspondences stored column-wise for vectorised residuals and Jacobians."""

    normals: np.ndarray
    p_n: np.ndarray
    t_n: np.ndarray
    theta_n: np.ndarray
    p_m: np.ndarray
    t_m: np.ndarray
    theta_m: np.ndarray
    weights: np.ndarray
    trajectory: Optional[MotorTrajectory] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.p_n = np.asarray(self.p_n, dtype=float).reshape(-1, 3)
        self.p_m = np.asarray(self.p_m, dtype=float).reshape(-1, 3)
        for name in ("t_n", "theta_n", "t_m", "theta_m", "weights"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = self.normals.shape[0]
        sizes = {a.shape[0] for a in (self.p_n, self.p_m, self.t_n, self.t_m, self.theta_n, self.theta_m, self.weights)}
        if sizes != {n}:
            raise ValidationError("correspondence columns differ in length")

    def __len__(self) -> int:
        return int(self.normals.shape[0])

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(
            normal=self.normals[i],
            point_n=self.p_n[i],
            t_n=float(self.t_n[i]),
            theta_n=float(self.theta_n[i]),
            point_m=self.p_m[i],
            t_m=float(self.t_m[i]),
            theta_m=float(self.theta_m[i]),
            weight=float(self.weights[i]),
        )

    @classmethod
    def from_list(
        cls, items: Sequence[Correspondence], trajectory: Optional[MotorTrajectory] = None
    ) -> "CorrespondenceSet":
        if not items:
            empty3, empty = np.empty((0, 3)), np.empty(0)
            return cls(empty3, empty3, empty, empty, empty3, empty, empty, empty, trajectory)
        return cls(
            normals=np.array([c.normal for c in items]),
            p_n=np.array([c.point_n for c in items]),
            t_n=np.array([c.t_n for c in items]),
            theta_n=np.array([c.theta_n for c in items]),
            p_m=np.array([c.point_m for c in items]),
            t_m=np.array([c.t_m for c in items]),
            theta_m=np.array([c.theta_m for c in items]),
            weights=np.array([c.weight for c in items]),
            trajectory=trajectory,
        )

    def angles(self, time_offset: Optional[float] = None):
        """Motor angles at both ends; re-interpolated when a time offset is given."""
        if time_offset is None or self.trajectory is None:
            return self.theta_n, self.theta_m
        traj = self.trajectory
        return traj.clipped_angle_at(self.t_n + time_offset), traj.clipped_angle_at(self.t_m + time_offset)


def residual(
    c: Correspondence,
    ext: ExtrinsicParams,
    traj: Optional[MotorTrajectory] = None,
    *,
    time_offset: float = 0.0,
) -> float:
    """nᵀ[x_B(p_m, t_m) - x_B(p_n, t_n)]; stored angles are used when ``traj`` is None."""
    if traj is None:
        theta_n, theta_m = c.theta_n, c.theta_m
    else:
        theta_n = float(traj.angle_at(c.t_n + time_offset))
        theta_m = float(traj.angle_at(c.t_m + time_offset))
    x_m = transform_point(c.point_m, ext, rot_z(theta_m))
    x_n = transform_point(c.point_n, ext, rot_z(theta_n))
    return float(np.asarray(c.normal) @ (x_m - x_n))


def residuals(
    cset: CorrespondenceSet,
    ext: ExtrinsicParams,
    theta_n: Optional[np.ndarray] = None,
    theta_m: Optional[np.ndarray] = None,
) -> np.ndarray:
    theta_n = cset.theta_n if theta_n is None else theta_n
    theta_m = cset.theta_m if theta_m is None else theta_m
    x_m = transform_points(cset.p_m, ext, theta_m)
    x_n = transform_points(cset.p_n, ext, theta_n)
    return np.einsum("ij,ij->i", cset.normals, x_m - x_n)


def _partners(
    base: BaseFrameCloud,
    primitives: Sequence[PlanePrimitive],
    min_angle_sep: float,
    r_corr: float,
    pairs: int,
    workers: int,
) -> List[np.ndarray]:
    """Nearest valid partners of each anchor, found by a growing k-nearest search.

    A point is valid when it was recorded at least ``min_angle_sep`` from the
    anchor's motor angle and lies within ``r_corr`` of the primitive's plane.
    The search stops at ``_MAX_PARTNER_QUERY`` neighbours.
    """
    n = len(base)
    anchors = np.array([prim.anchor_index for prim in primitives], dtype=np.int64)
    normals = np.array([prim.normal for prim in primitives])
    found: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * len(primitives)
    pending = np.arange(len(primitives))
    limit = min(n, _MAX_PARTNER_QUERY)
    k = min(limit, max(_PARTNER_QUERY, 4 * pairs))
    while pending.size:
        a = anchors[pending]
        _, idx = base.tree.query(base.points[a], k=k, workers=workers)
        idx = np.asarray(idx, dtype=np.int64).reshape(pending.size, -1)
        far = np.abs(wrap_angle(base.theta[idx] - base.theta[a][:, None])) >= min_angle_sep
        offsets = base.points[idx] - base.points[a][:, None, :]
        on_plane = np.abs(np.einsum("ikj,ij->ik", offsets, normals[pending])) <= r_corr
        valid = far & on_plane & (idx != a[:, None])
        done = (valid.sum(axis=1) >= pairs) | (k >= limit)
        for row in np.flatnonzero(done):
            found[pending[row]] = idx[row, valid[row]][:pairs]
        pending = pending[~done]
        k = min(limit, 4 * k)
    return found


def build_correspondences(
    base: BaseFrameCloud,
    primitives: Sequence[PlanePrimitive],
    min_angle_sep: float,
    r_corr: float,
    *,
    pairs_per_primitive: int = 1,
    workers: int = 1,
) -> CorrespondenceSet:
    """Pair each primitive's anchor with its nearest cross-angle point(s) on the plane."""
    if min_angle_sep < 0 or r_corr <= 0:
        raise ValidationError("min_angle_sep must be >= 0 and r_corr > 0")
    if pairs_per_primitive < 1:
        raise ValidationError("pairs_per_primitive must be >= 1")
    cloud = base.cloud
    if not primitives:
        raise InsufficientOverlapError("no planar primitives to associate")

    partners = _partners(base, primitives, min_angle_sep, r_corr, pairs_per_primitive, max(1, workers))

    n_idx: List[int] = []
    m_idx: List[int] = []
    normals: List[np.ndarray] = []
    weights: List[float] = []
    for prim, found in zip(primitives, partners):
        for j in found:
            n_idx.append(prim.anchor_index)
            m_idx.append(int(j))
            normals.append(prim.normal)
            weights.append(prim.weight)

    if not n_idx:
        raise InsufficientOverlapError(
            f"no primitive was observed at motor angles >= {np.degrees(min_angle_sep):.1f} deg apart "
            f"within {r_corr} m of its plane; the motor sweep did not revisit any surface"
        )
    n_arr, m_arr = np.asarray(n_idx), np.asarray(m_idx)
    cset = CorrespondenceSet(
        normals=np.asarray(normals),
        p_n=cloud.points[n_arr],
        t_n=cloud.t[n_arr],
        theta_n=base.theta[n_arr],
        p_m=cloud.points[m_arr],
        t_m=cloud.t[m_arr],
        theta_m=base.theta[m_arr],
        weights=np.asarray(weights),
        trajectory=cloud.trajectory,
    )
    logger.info("%d correspondences from %d primitives", len(cset), len(primitives))
    return cset


def dump_correspondences_csv(
    cset: CorrespondenceSet, ext: ExtrinsicParams, path: Union[str, Path]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    res = residuals(cset, ext) if len(cset) else np.empty(0)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["nx", "ny", "nz", "pnx", "pny", "pnz", "t_n", "theta_n",
             "pmx", "pmy", "pmz", "t_m", "theta_m", "weight", "residual"]
        )
        for i in range(len(cset)):
            writer.writerow(
                [f"{v:.9g}" for v in (*cset.normals[i], *cset.p_n[i], cset.t_n[i], cset.theta_n[i],
                                      *cset.p_m[i], cset.t_m[i], cset.theta_m[i], cset.weights[i], res[i])]
            )
    return path
