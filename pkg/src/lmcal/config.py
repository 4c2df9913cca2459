"""Run configuration.

A run config is a flat ``key = value`` file read with :mod:`lmcal.parser`::

    # Name: warehouse-run
    @include defaults.cfg
    voxel_size = 2.0
    planarity_min = 0.7
    mode = limo

Precedence is dataclass defaults < file < command-line overrides. Unknown
keys are parse errors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .errors import ParseError, ValidationError
from .geometry import ExtrinsicParams
from .parser import Entry, parse_bool, parse_file, parse_float, parse_int
from .solver import JACOBIAN_FORMS, SolverConfig

__all__ = ["MODES", "RunConfig", "load_run_config"]

logger = logging.getLogger(__name__)

MODES = ("limo", "vanilla")


@dataclass(frozen=True)
class RunConfig:
    # primitives
    voxel_size: float = 1.0
    min_voxel_support: int = 10
    gamma: float = 0.01
    k_max: int = 50
    k_min: int = 3
    neighbor_angle_window_deg: float = 5.0
    plane_inlier_distance: float = 0.05
    inlier_fraction_min: float = 0.8
    planarity_min: float = 0.5
    cond_max: float = 100.0
    cond_sigma_floor: float = 1e-2
    bin_width_deg: float = 10.0
    # correspondences
    min_angle_sep_deg: float = 30.0
    r_corr: float = 0.3
    pairs_per_primitive: int = 1
    # solver
    huber_delta: float = 0.05
    relative_cost_tolerance: float = 1e-6
    outer_rotation_tolerance: float = 1e-6
    outer_translation_tolerance: float = 1e-5
    lm_initial_lambda: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.5
    rank_tolerance: float = 1e-10
    max_inner_iterations: int = 50
    max_outer_iterations: int = 5
    jacobian_form: str = "full"
    time_offset: float = 0.0
    estimate_time_offset: bool = False
    yaw_fixed: float = 0.0
    tz_fixed: float = 0.0
    # run
    seed: int = 0
    workers: int = 1
    mode: str = "limo"

    def __post_init__(self) -> None:
        positive = ("voxel_size", "gamma", "cond_max", "bin_width_deg", "r_corr", "plane_inlier_distance")
        for name in positive:
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValidationError(f"{name} must be a positive finite number, got {value}")
        if not 0.0 <= self.planarity_min <= 1.0:
            raise ValidationError(f"planarity_min must lie in [0, 1], got {self.planarity_min}")
        if self.cond_sigma_floor < 0:
            raise ValidationError("cond_sigma_floor must be >= 0")
        if not 0.0 <= self.neighbor_angle_window_deg <= 180.0:
            raise ValidationError("neighbor_angle_window_deg must lie in [0, 180]")
        if not 0.0 < self.inlier_fraction_min <= 1.0:
            raise ValidationError(f"inlier_fraction_min must lie in (0, 1], got {self.inlier_fraction_min}")
        if not 0.0 <= self.min_angle_sep_deg <= 180.0:
            raise ValidationError("min_angle_sep_deg must lie in [0, 180]")
        if (180.0 / self.bin_width_deg) % 1.0 > 1e-9:
            raise ValidationError(f"bin_width_deg must divide 180, got {self.bin_width_deg}")
        if self.k_min < 3 or self.k_max < self.k_min:
            raise ValidationError(f"need 3 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.min_voxel_support < 3:
            raise ValidationError("min_voxel_support must be >= 3")
        if self.pairs_per_primitive < 1:
            raise ValidationError("pairs_per_primitive must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.jacobian_form not in JACOBIAN_FORMS:
            raise ValidationError(f"jacobian_form must be one of {JACOBIAN_FORMS}")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        # remaining solver fields are checked by SolverConfig
        self.to_solver_config()

    @property
    def min_angle_sep(self) -> float:
        return math.radians(self.min_angle_sep_deg)

    def to_solver_config(self) -> SolverConfig:
        return SolverConfig(
            huber_delta=self.huber_delta,
            max_inner_iterations=self.max_inner_iterations,
            max_outer_iterations=self.max_outer_iterations,
            relative_cost_tolerance=self.relative_cost_tolerance,
            outer_rotation_tolerance=self.outer_rotation_tolerance,
            outer_translation_tolerance=self.outer_translation_tolerance,
            lm_initial_lambda=self.lm_initial_lambda,
            lm_lambda_up=self.lm_lambda_up,
            lm_lambda_down=self.lm_lambda_down,
            rank_tolerance=self.rank_tolerance,
            jacobian_form=self.jacobian_form,
            time_offset=self.time_offset,
            estimate_time_offset=self.estimate_time_offset,
            workers=self.workers,
        )

    def initial_extrinsics(self) -> ExtrinsicParams:
        return ExtrinsicParams(yaw_fixed=self.yaw_fixed, tz_fixed=self.tz_fixed)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with the non-None overrides applied (CLI flags)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return replace(self, **changes) if changes else self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, float) and math.isinf(value):
                data[key] = "inf" if value > 0 else "-inf"
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = {}
        for key, value in data.items():
            if known[key].type in ("float", float):
                value = float(value)
            values[key] = value
        return cls(**values)


def _convert(entry: Entry, kind: Any) -> Any:
    if kind in ("bool", bool):
        return parse_bool(entry)
    if kind in ("int", int):
        return parse_int(entry)
    if kind in ("float", float):
        return parse_float(entry, allow_inf=entry.key == "huber_delta")
    return entry.value.strip()


def load_run_config(path: Union[str, Path], base: Optional[RunConfig] = None) -> RunConfig:
    """Read a run config file on top of ``base`` (defaults when omitted)."""
    result = parse_file(Path(path))
    if result.blocks:
        block = result.blocks[0]
        raise ParseError(block.line_num, f"unexpected block '{block.kind}' in run config")

    known = {f.name: f.type for f in fields(RunConfig)}
    values: Dict[str, Any] = {}
    for key, entry in result.settings_dict().items():
        if key not in known:
            raise entry.error("unknown config key")
        values[key] = _convert(entry, known[key])

    config = base or RunConfig()
    try:
        config = replace(config, **values)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if result.metadata:
        logger.info("Loaded run config %s (%s)", path, ", ".join(f"{k}={v}" for k, v in result.metadata.items()))
    else:
        logger.info("Loaded run config %s", path)
    return config
