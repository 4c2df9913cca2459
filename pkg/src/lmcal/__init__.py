"""
lmcal - LiDAR-motor extrinsic calibration toolkit.

Recovers the 4-DOF mounting transform (roll, pitch, tx, ty) of a LiDAR
spinning on a motorised z-axis from raw motor-stamped scans, without
calibration targets. Planar primitives are extracted from the scan,
weighted by planarity, balanced over normal directions and used as
point-to-plane constraints in a robust Levenberg-Marquardt solve. A
synthetic scan simulator with known ground truth ships alongside.

Example Usage:
    >>> from lmcal import ExtrinsicParams, MotorTrajectory, SensorSpec, calibrate, make_room_scene, simulate_scan
    >>> traj = MotorTrajectory.constant_speed(duration=10.0, revolutions=1.0)
    >>> truth = ExtrinsicParams.from_degrees(2.0, -1.5, 0.05, -0.03)
    >>> cloud = simulate_scan(make_room_scene(8, 6, 3), SensorSpec(), traj, truth, seed=0)
    >>> result = calibrate(cloud)

Command Line:
    $ lmcal synth --preset room --out data/room
    $ lmcal calibrate data/room.csv data/room_traj.csv --report out/report.json
    $ lmcal --help
"""

from __future__ import annotations

__version__ = "0.3.0"
__license__ = "MIT"

import os

from .cloud_io import MotorStampedCloud, RawScan, read_cloud, read_trajectory, stamp_cloud, write_cloud
from .config import RunConfig, load_run_config
from .correspondences import Correspondence, CorrespondenceSet, build_correspondences, residual
from .errors import (
    CalibrationError,
    DegenerateGeometryError,
    GeometryError,
    InputError,
    InsufficientOverlapError,
    ParseError,
    ValidationError,
)
from .evaluation import parameter_sweep, plane_fitting_error, stability_analysis
from .geometry import ExtrinsicParams, MotorTrajectory, motor_rotation, skew, transform_point
from .pipeline import CalibrationPipeline, calibrate, limo_solve, vanilla_solve
from .solver import SolveResult, SolverConfig, jacobian_rotation, jacobian_translation, solve
from .synth import SensorSpec, make_room_scene, make_sparse_scene, simulate_scan

__all__ = [
    # Geometry
    "ExtrinsicParams",
    "MotorTrajectory",
    "motor_rotation",
    "skew",
    "transform_point",
    # Data
    "MotorStampedCloud",
    "RawScan",
    "read_cloud",
    "read_trajectory",
    "stamp_cloud",
    "write_cloud",
    # Simulation
    "SensorSpec",
    "make_room_scene",
    "make_sparse_scene",
    "simulate_scan",
    # Calibration
    "CalibrationPipeline",
    "Correspondence",
    "CorrespondenceSet",
    "RunConfig",
    "SolveResult",
    "SolverConfig",
    "build_correspondences",
    "calibrate",
    "jacobian_rotation",
    "jacobian_translation",
    "limo_solve",
    "load_run_config",
    "residual",
    "solve",
    "vanilla_solve",
    # Evaluation
    "parameter_sweep",
    "plane_fitting_error",
    "stability_analysis",
    # Errors
    "CalibrationError",
    "DegenerateGeometryError",
    "GeometryError",
    "InputError",
    "InsufficientOverlapError",
    "ParseError",
    "ValidationError",
    # Package helpers
    "setup_logging",
]


def setup_logging(level: str = "WARNING") -> None:
    """
    Configure logging for lmcal modules.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)

    Note:
        The CLI calls this from its ``-v`` flags. Library users call it
        themselves; nothing in the package configures logging on import
        unless ``LMCAL_DEBUG=1``.
    """
    import logging

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )


def _initialize_package() -> None:
    os.environ.setdefault("LMCAL_FORCE_COLOR", "0")
    os.environ.setdefault("LMCAL_DEBUG", "0")
    if os.environ.get("LMCAL_DEBUG") == "1":
        setup_logging("DEBUG")


_initialize_package()
