"""Extraction -> association -> solve, in LiMo or vanilla mode.

:class:`CalibrationPipeline` is the correspondence provider handed to
:func:`lmcal.solver.solve`: every outer iteration it transforms the cloud
under the current estimate, re-extracts planar primitives and rebuilds the
cross-angle pairs.

``limo`` mode weights neighbourhoods by distance, weights primitives by
planarity and homogenises normal directions. ``vanilla`` mode fits
unweighted planes, keeps every primitive that passes the filter and gives
each residual weight 1.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .cloud_io import MotorStampedCloud
from .config import MODES, RunConfig
from .correspondences import CorrespondenceSet, build_correspondences, dump_correspondences_csv
from .errors import ValidationError
from .geometry import ExtrinsicParams
from .primitives import (
    BaseFrameCloud,
    PlanePrimitive,
    adaptive_k,
    dump_primitives_csv,
    extract_candidates,
    filter_primitives,
    homogenize_normals,
    voxel_downsample,
)
from .solver import SolveResult, solve

__all__ = ["CalibrationPipeline", "calibrate", "limo_solve", "vanilla_solve"]

logger = logging.getLogger(__name__)


class CalibrationPipeline:
    """Correspondence provider over one stamped cloud."""

    def __init__(
        self,
        cloud: MotorStampedCloud,
        config: RunConfig,
        *,
        mode: Optional[str] = None,
        dump_dir: Optional[Union[str, Path]] = None,
    ):
        self.cloud = cloud
        self.config = config
        self.mode = mode or config.mode
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got '{self.mode}'")
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        self.timings: Dict[str, float] = {"extraction": 0.0, "association": 0.0}
        self.iteration = 0
        self.last_candidate_count = 0
        self.last_primitive_count = 0

    @property
    def limo(self) -> bool:
        return self.mode == "limo"

    def base_cloud(self, ext: ExtrinsicParams, time_offset: float = 0.0) -> BaseFrameCloud:
        theta = None
        if time_offset != 0.0 and self.cloud.trajectory is not None:
            theta = self.cloud.trajectory.clipped_angle_at(self.cloud.t + time_offset)
        return BaseFrameCloud.build(self.cloud, ext, theta)

    def extract(self, ext: ExtrinsicParams, time_offset: float = 0.0) -> Tuple[BaseFrameCloud, List[PlanePrimitive]]:
        """Primitives of the cloud transformed under ``ext``."""
        cfg = self.config
        base = self.base_cloud(ext, time_offset)
        kernels = voxel_downsample(base, cfg.voxel_size, cfg.min_voxel_support)
        k = adaptive_k(len(self.cloud), cfg.gamma, cfg.k_max, cfg.k_min)
        candidates = extract_candidates(
            base,
            kernels,
            k,
            neighbor_angle_window_deg=cfg.neighbor_angle_window_deg,
            weighted=self.limo,
            inlier_distance=cfg.plane_inlier_distance,
            inlier_fraction_min=cfg.inlier_fraction_min,
            workers=cfg.workers,
        )
        primitives = filter_primitives(
            candidates,
            cfg.planarity_min,
            cfg.cond_max,
            sigma_floor=cfg.cond_sigma_floor,
            reweight=self.limo,
        )
        logger.info("%d of %d candidates pass the planarity filter", len(primitives), len(candidates))
        self.last_candidate_count = len(candidates)
        if self.limo:
            primitives = homogenize_normals(primitives, cfg.bin_width_deg, cfg.seed)
        self.last_primitive_count = len(primitives)
        return base, primitives

    def build(self, ext: ExtrinsicParams, time_offset: float = 0.0) -> CorrespondenceSet:
        cfg = self.config
        self.iteration += 1

        start = time.perf_counter()
        base, primitives = self.extract(ext, time_offset)
        self.timings["extraction"] += time.perf_counter() - start

        start = time.perf_counter()
        cset = build_correspondences(
            base,
            primitives,
            cfg.min_angle_sep,
            cfg.r_corr,
            pairs_per_primitive=cfg.pairs_per_primitive,
            workers=cfg.workers,
        )
        self.timings["association"] += time.perf_counter() - start

        if self.dump_dir is not None:
            dump_primitives_csv(
                primitives, self.dump_dir / f"primitives_{self.iteration:02d}.csv", cfg.bin_width_deg
            )
            dump_correspondences_csv(cset, ext, self.dump_dir / f"correspondences_{self.iteration:02d}.csv")
        return cset


def calibrate(
    cloud: MotorStampedCloud,
    config: Optional[RunConfig] = None,
    ext_init: Optional[ExtrinsicParams] = None,
    *,
    mode: Optional[str] = None,
    dump_dir: Optional[Union[str, Path]] = None,
) -> SolveResult:
    """Calibrate the 4-DOF extrinsics of ``cloud``; defaults start from identity."""
    config = config or RunConfig()
    ext_init = ext_init or config.initial_extrinsics()
    pipeline = CalibrationPipeline(cloud, config, mode=mode, dump_dir=dump_dir)
    logger.info(
        "Calibrating %d points (%s mode, voxel %.2f m, planarity %.2f)",
        len(cloud), pipeline.mode, config.voxel_size, config.planarity_min,
    )
    return solve(pipeline, ext_init, config.to_solver_config(), mode=pipeline.mode)


def limo_solve(
    cloud: MotorStampedCloud, ext_init: ExtrinsicParams, config: Optional[RunConfig] = None
) -> SolveResult:
    return calibrate(cloud, config, ext_init, mode="limo")


def vanilla_solve(
    cloud: MotorStampedCloud, ext_init: ExtrinsicParams, config: Optional[RunConfig] = None
) -> SolveResult:
    """Baseline: no homogenisation, no distance weighting, unit residual weights."""
    return calibrate(cloud, config, ext_init, mode="vanilla")
