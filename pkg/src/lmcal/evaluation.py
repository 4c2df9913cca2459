"""Plane-fitting error, stability batches and parameter sweeps.

The accuracy metric is the mean squared orthogonal distance of a region's
points to their best-fit plane, measured on the cloud transformed into {B}
under the extrinsics being evaluated. It is reported together with its
square root (metres).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CalibrationError, DegenerateFitError, ParseError, ValidationError
from .geometry import PARAMETER_NAMES, ExtrinsicParams, transform_points
from .parser import parse_file, parse_int, parse_vector
from .pipeline import calibrate
from .primitives import planarity

try:
    from tqdm import tqdm
except ImportError:  # perf extra not installed
    tqdm = None

__all__ = [
    "ComparisonRow",
    "PlaneFitReport",
    "Region",
    "RegionError",
    "StabilityReport",
    "SweepCell",
    "SweepGrid",
    "auto_regions",
    "compare_reports",
    "dump_regions",
    "evaluate_cloud",
    "label_regions",
    "load_regions",
    "parameter_sweep",
    "plane_fitting_error",
    "stability_analysis",
    "write_comparison_csv",
    "write_report_csv",
    "write_stability_csv",
    "write_sweep_csv",
]

logger = logging.getLogger(__name__)

MIN_REGION_POINTS = 3
_COLLINEAR_RATIO = 1e-12


# ---------------------------------------------------------------------------
# Regions


@dataclass(frozen=True, eq=False)
class Region:
    """Axis-aligned evaluation box in {B}; ``label`` selects simulated points directly."""

    name: str
    lower: np.ndarray
    upper: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float).reshape(3)
        upper = np.asarray(self.upper, dtype=float).reshape(3)
        if np.any(lower > upper):
            raise ValidationError(f"region '{self.name}': min exceeds max")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lower) & (points <= self.upper), axis=1)

    def select(self, points_B: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        if self.label is not None and labels is not None:
            return labels == self.label
        return self.contains(points_B)


def load_regions(path: Union[str, Path]) -> List[Region]:
    """``region NAME`` blocks with ``min``/``max`` corners and an optional ``label``."""
    result = parse_file(Path(path), block_kinds=("region",))
    if result.settings:
        entry = result.settings[0]
        raise entry.error("region files only hold 'region' blocks")
    regions = []
    for block in result.blocks:
        unknown = set(block.keys()) - {"min", "max", "label"}
        if unknown:
            raise ParseError(block.line_num, f"unknown region keys: {', '.join(sorted(unknown))}")
        lower = parse_vector(block.require("min"))
        upper = parse_vector(block.require("max"))
        if np.any(lower > upper):
            raise ParseError(block.line_num, f"region '{block.name}': min exceeds max")
        label_entry = block.get("label")
        regions.append(
            Region(
                name=block.name or f"region_{len(regions)}",
                lower=lower,
                upper=upper,
                label=parse_int(label_entry) if label_entry else None,
            )
        )
    logger.info("Loaded %d regions from %s", len(regions), path)
    return regions


def dump_regions(regions: Sequence[Region], path: Union[str, Path], source: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# Source: {source}"] if source else []
    for region in regions:
        lines.append(f"region {region.name}")
        lines.append("    min = " + ", ".join(f"{v:.9g}" for v in region.lower))
        lines.append("    max = " + ", ".join(f"{v:.9g}" for v in region.upper))
        if region.label is not None:
            lines.append(f"    label = {region.label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def label_regions(labels: np.ndarray) -> List[Region]:
    """One unbounded region per non-negative label (simulated patches)."""
    unbounded = np.full(3, np.inf)
    return [
        Region(name=f"label_{int(v)}", lower=-unbounded, upper=unbounded, label=int(v))
        for v in np.unique(labels)
        if v >= 0
    ]


# ---------------------------------------------------------------------------
# Plane-fitting error


def plane_fitting_error(points: np.ndarray) -> float:
    """Mean squared orthogonal distance to the least-squares plane (m²)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateFitError(f"need at least 3 points to fit a plane, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    sigma = np.linalg.svd(centered, compute_uv=False)
    if sigma[0] == 0.0 or sigma[1] <= _COLLINEAR_RATIO * sigma[0]:
        raise DegenerateFitError("points are collinear or coincident")
    return float(sigma[2] ** 2 / pts.shape[0])


@dataclass
class RegionError:
    name: str
    count: int
    mse: float = math.nan
    status: str = "ok"

    @property
    def rms(self) -> float:
        return math.sqrt(self.mse) if self.mse >= 0 else math.nan


@dataclass
class PlaneFitReport:
    """Per-region errors and their mean over the regions that could be fitted."""

    regions: List[RegionError]
    automatic: bool = False
    label: str = ""

    @property
    def aggregate_mse(self) -> float:
        values = [r.mse for r in self.regions if r.status == "ok"]
        return float(np.mean(values)) if values else math.nan

    @property
    def aggregate_rms(self) -> float:
        return math.sqrt(self.aggregate_mse)

    @property
    def flagged(self) -> List[RegionError]:
        return [r for r in self.regions if r.status != "ok"]

    def by_name(self) -> Dict[str, RegionError]:
        return {r.name: r for r in self.regions}


def auto_regions(
    points_B: np.ndarray,
    voxel_size: float,
    planarity_min: float,
    min_support: int = 10,
) -> List[Region]:
    """Occupied voxels whose unweighted planarity passes ``planarity_min``."""
    keys = np.floor(points_B / voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    regions = []
    for i in np.flatnonzero(counts >= min_support):
        members = points_B[order[starts[i] : starts[i + 1]]]
        sigma = np.linalg.svd(members - members.mean(axis=0), compute_uv=False) ** 2
        if sigma.sum() == 0.0 or planarity(*sigma) < planarity_min:
            continue
        lower = uniq[i] * voxel_size
        regions.append(
            Region(name="voxel_" + "_".join(str(int(v)) for v in uniq[i]), lower=lower, upper=lower + voxel_size)
        )
    return regions


def evaluate_cloud(
    cloud,
    ext: ExtrinsicParams,
    regions: Optional[Sequence[Region]] = None,
    *,
    voxel_size: float = 1.0,
    planarity_min: float = 0.5,
    label: str = "",
) -> PlaneFitReport:
    """Plane-fitting error of ``cloud`` under ``ext``.

    Without regions, automatic voxel regions are derived from the cloud under
    ``ext`` and only the aggregate is meaningful.
    """
    points_B = transform_points(cloud.points, ext, cloud.theta)
    automatic = not regions
    if automatic:
        regions = auto_regions(points_B, voxel_size, planarity_min)
        logger.info("Using %d automatic evaluation regions", len(regions))

    rows = []
    for region in regions:
        mask = region.select(points_B, getattr(cloud, "labels", None))
        count = int(np.count_nonzero(mask))
        if count < MIN_REGION_POINTS:
            logger.warning("Region %s holds %d points; flagged", region.name, count)
            rows.append(RegionError(region.name, count, status="too_few_points"))
            continue
        try:
            rows.append(RegionError(region.name, count, plane_fitting_error(points_B[mask])))
        except DegenerateFitError:
            rows.append(RegionError(region.name, count, status="degenerate"))
    return PlaneFitReport(regions=rows, automatic=automatic, label=label)


@dataclass(frozen=True)
class ComparisonRow:
    region: str
    first: float
    second: float

    @property
    def difference(self) -> float:
        return self.second - self.first

    @property
    def ratio(self) -> float:
        if self.first > 0:
            return self.second / self.first
        return 1.0 if self.second == 0 else math.inf


def compare_reports(first: PlaneFitReport, second: PlaneFitReport) -> List[ComparisonRow]:
    """Rows for regions present in both reports, then the aggregate."""
    rows = []
    if not (first.automatic or second.automatic):
        other = second.by_name()
        for region in first.regions:
            match = other.get(region.name)
            if match is None or region.status != "ok" or match.status != "ok":
                continue
            rows.append(ComparisonRow(region.name, region.mse, match.mse))
    rows.append(ComparisonRow("aggregate", first.aggregate_mse, second.aggregate_mse))
    return rows


def write_report_csv(report: PlaneFitReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["region", "points", "mse_m2", "rms_m", "status"])
        if not report.automatic:
            for r in report.regions:
                writer.writerow([r.name, r.count, f"{r.mse:.9g}", f"{r.rms:.9g}", r.status])
        total = sum(r.count for r in report.regions)
        writer.writerow(
            ["aggregate", total, f"{report.aggregate_mse:.9g}", f"{report.aggregate_rms:.9g}",
             "ok" if math.isfinite(report.aggregate_mse) else "empty"]
        )
    return path


def write_comparison_csv(
    rows: Sequence[ComparisonRow], path: Union[str, Path], labels: Tuple[str, str] = ("first", "second")
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["region", f"{labels[0]}_mse_m2", f"{labels[1]}_mse_m2", "difference", "ratio"])
        for row in rows:
            writer.writerow(
                [row.region, f"{row.first:.9g}", f"{row.second:.9g}", f"{row.difference:.9g}", f"{row.ratio:.9g}"]
            )
    return path


# ---------------------------------------------------------------------------
# Stability


def _progress(items: Iterable, total: int, desc: str, enabled: bool) -> Iterable:
    if enabled and tqdm is not None:
        return tqdm(items, total=total, desc=desc, leave=False)
    return items


@dataclass
class BatchOutcome:
    mode: str
    batch: int
    source_id: str
    params: Optional[Dict[str, float]] = None
    converged: bool = False
    error: str = ""


@dataclass
class StabilityReport:
    outcomes: List[BatchOutcome] = field(default_factory=list)

    def modes(self) -> List[str]:
        return sorted({o.mode for o in self.outcomes})

    def failures(self, mode: Optional[str] = None) -> List[BatchOutcome]:
        return [o for o in self.outcomes if (mode is None or o.mode == mode) and (o.error or not o.converged)]

    def summary(self, mode: str) -> Dict[str, Dict[str, float]]:
        """Mean and population std per parameter over batches that produced an estimate."""
        solved = [o.params for o in self.outcomes if o.mode == mode and o.params is not None]
        out: Dict[str, Dict[str, float]] = {}
        for name in PARAMETER_NAMES:
            values = np.array([p[name] for p in solved], dtype=float)
            out[name] = {
                "mean": float(values.mean()) if values.size else math.nan,
                "std": float(values.std()) if values.size else math.nan,
            }
        return out


def stability_analysis(
    batches: Sequence,
    config,
    *,
    modes: Sequence[str] = ("limo",),
    ext_init: Optional[ExtrinsicParams] = None,
    progress: bool = False,
) -> StabilityReport:
    """Calibrate every batch in every mode; failures are recorded, not dropped."""
    if len(batches) < 2:
        raise ValidationError(f"stability analysis needs at least 2 batches, got {len(batches)}")
    report = StabilityReport()
    jobs = [(mode, i, batch) for mode in modes for i, batch in enumerate(batches)]
    for mode, i, batch in _progress(jobs, len(jobs), "stability", progress):
        outcome = BatchOutcome(mode=mode, batch=i, source_id=batch.source_id)
        try:
            result = calibrate(batch, config, ext_init, mode=mode)
        except CalibrationError as exc:
            logger.warning("Batch %d (%s) failed: %s", i, mode, exc)
            outcome.error = f"{exc.error_class}: {exc}"
        else:
            outcome.params = {name: float(getattr(result.ext, name)) for name in PARAMETER_NAMES}
            outcome.converged = result.converged
            if not result.converged:
                logger.warning("Batch %d (%s) did not converge", i, mode)
        report.outcomes.append(outcome)
    return report


def write_stability_csv(report: StabilityReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["mode", "batch", "source", "converged", *PARAMETER_NAMES, "error"])
        for o in report.outcomes:
            values = [f"{o.params[n]:.12g}" for n in PARAMETER_NAMES] if o.params else [""] * 4
            writer.writerow([o.mode, o.batch, o.source_id, int(o.converged), *values, o.error])
        for mode in report.modes():
            summary = report.summary(mode)
            for stat in ("mean", "std"):
                writer.writerow(
                    [mode, stat, "", "", *(f"{summary[n][stat]:.12g}" for n in PARAMETER_NAMES), ""]
                )
    return path


# ---------------------------------------------------------------------------
# Parameter sweep


@dataclass
class SweepCell:
    voxel_size: float
    planarity_min: float
    status: str = "pending"
    error_mse: float = math.nan
    runtime: float = math.nan
    converged: bool = False
    ext: Optional[ExtrinsicParams] = None
    timings: Dict[str, float] = field(default_factory=dict)
    message: str = ""


@dataclass
class SweepGrid:
    voxel_sizes: List[float]
    planarity_thresholds: List[float]
    cells: Dict[Tuple[int, int], SweepCell] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.voxel_sizes or not self.planarity_thresholds:
            raise ValidationError("sweep grid needs at least one voxel size and one planarity threshold")

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.voxel_sizes), len(self.planarity_thresholds)

    @property
    def complete(self) -> bool:
        rows, cols = self.shape
        return all(
            (i, j) in self.cells and self.cells[i, j].status in ("ok", "failed")
            for i in range(rows)
            for j in range(cols)
        )

    def __iter__(self):
        rows, cols = self.shape
        for i in range(rows):
            for j in range(cols):
                yield self.cells[i, j]


def _sweep_cell(cloud, config, v: float, p: float, ext_init, regions) -> SweepCell:
    cell = SweepCell(voxel_size=v, planarity_min=p)
    start = time.perf_counter()
    try:
        result = calibrate(cloud, config.with_overrides(voxel_size=v, planarity_min=p), ext_init)
    except CalibrationError as exc:
        cell.runtime = time.perf_counter() - start
        cell.status = "failed"
        cell.message = exc.error_class
        logger.warning("Sweep cell voxel=%g planarity=%g failed: %s", v, p, exc)
        return cell
    cell.runtime = time.perf_counter() - start
    cell.converged = result.converged
    cell.ext = result.ext
    cell.timings = dict(result.timings)
    if regions:
        cell.error_mse = evaluate_cloud(cloud, result.ext, regions).aggregate_mse
    else:
        cell.error_mse = float(result.residual_stats.get("rms", math.nan)) ** 2
    cell.status = "ok"
    return cell


def parameter_sweep(
    cloud,
    grid: SweepGrid,
    config,
    *,
    ext_init: Optional[ExtrinsicParams] = None,
    regions: Optional[Sequence[Region]] = None,
    workers: int = 1,
    progress: bool = False,
) -> SweepGrid:
    """Calibrate at every (voxel size, planarity threshold) and fill ``grid``.

    The cell error is the aggregate plane-fitting error over ``regions`` (or
    the cloud's simulated labels); without either it falls back to the mean
    squared final residual.
    """
    if regions is None and getattr(cloud, "labels", None) is not None:
        regions = label_regions(cloud.labels)
    jobs = [
        (i, j, v, p)
        for i, v in enumerate(grid.voxel_sizes)
        for j, p in enumerate(grid.planarity_thresholds)
    ]

    def run(job):
        i, j, v, p = job
        return (i, j), _sweep_cell(cloud, config, v, p, ext_init, regions)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(_progress(pool.map(run, jobs), len(jobs), "sweep", progress))
    else:
        results = [run(job) for job in _progress(jobs, len(jobs), "sweep", progress)]
    for key, cell in results:
        grid.cells[key] = cell
    logger.info("Sweep finished: %d cells, %d failed", len(results), sum(c.status == "failed" for _, c in results))
    return grid


def write_sweep_csv(grid: SweepGrid, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["voxel_size", "planarity_min", "status", "error_mse_m2", "error_rms_m", "runtime_s",
             "converged", *PARAMETER_NAMES, "message"]
        )
        for cell in grid:
            params = [f"{getattr(cell.ext, n):.12g}" for n in PARAMETER_NAMES] if cell.ext else [""] * 4
            rms = math.sqrt(cell.error_mse) if cell.error_mse >= 0 else math.nan
            writer.writerow(
                [f"{cell.voxel_size:g}", f"{cell.planarity_min:g}", cell.status, f"{cell.error_mse:.9g}",
                 f"{rms:.9g}", f"{cell.runtime:.6f}", int(cell.converged), *params, cell.message]
            )
    return path
