"""Command line interface for lmcal."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .. import __version__, setup_logging
from ..cloud_io import read_cloud, read_trajectory, stamp_cloud, write_cloud, write_trajectory
from ..config import MODES, RunConfig, load_run_config
from ..errors import (
    EXIT_INPUT_ERROR,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_UNEXPECTED,
    CalibrationError,
    ParseError,
)
from ..evaluation import (
    SweepGrid,
    auto_regions,
    compare_reports,
    dump_regions,
    evaluate_cloud,
    load_regions,
    parameter_sweep,
    stability_analysis,
    write_comparison_csv,
    write_report_csv,
    write_stability_csv,
    write_sweep_csv,
)
from ..geometry import ExtrinsicParams, MotorTrajectory, transform_points
from ..pipeline import calibrate
from ..report import load_extrinsics, write_cost_trace, write_param_trace, write_report, write_truth_sidecar
from ..synth import SensorSpec, load_scene, make_room_scene, make_sparse_scene, regions_for_scene, simulate_scan

RESET = "\033[0m"
RED = "\033[31m"
GREEN = "\033[32m"
YELLOW = "\033[33m"
CYAN = "\033[36m"


def colorize(message: str, color: str) -> str:
    if not (sys.stdout.isatty() or os.environ.get("LMCAL_FORCE_COLOR") == "1"):
        return message
    return f"{color}{message}{RESET}"


# ---------------------------------------------------------------------------
# Parser


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config file (key = value)")
    common.add_argument("--seed", type=int, help="Random seed (homogenisation, simulation noise)")
    common.add_argument("--mode", choices=MODES, help="limo (default) or the vanilla baseline")
    common.add_argument("--workers", type=int, help="Worker threads")
    common.add_argument("--voxel-size", type=float, help="Voxel size in metres")
    common.add_argument("--planarity-min", type=float, help="Planarity threshold")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Log INFO (-v) or DEBUG (-vv)")
    return common


def _stamped_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("cloud", help="Cloud file (.csv or .lmc)")
    parser.add_argument("trajectory", help="Encoder log (t,angle_rad CSV)")
    parser.add_argument("--format", dest="cloud_format", choices=("csv", "lmc"), help="Override the cloud format")
    parser.add_argument("--time-offset", type=float, help="Offset added to point timestamps (s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmcal",
        description="lmcal: target-free LiDAR-motor extrinsic calibration (roll, pitch, tx, ty).",
        epilog=(
            "Examples:\n"
            "  lmcal synth --preset room --out data/room\n"
            "  lmcal calibrate data/room.csv data/room_traj.csv --report out/room.json\n"
            "  lmcal evaluate data/room.csv data/room_traj.csv out/room.json --regions data/room_regions.txt\n"
            "  lmcal sweep data/room.csv data/room_traj.csv --voxel-sizes 0.5 1 2 --planarity 0.5 0.7"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"lmcal {__version__}")
    common = _common_options()
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    synth = sub.add_parser("synth", parents=[common], help="Simulate a motorised scan with known extrinsics")
    synth.add_argument("--preset", choices=("room", "sparse"), default="room")
    synth.add_argument("--scene", help="Scene file (overrides --preset)")
    synth.add_argument("--size", type=float, nargs=3, default=(8.0, 6.0, 3.0), metavar=("W", "D", "H"),
                       help="Room width, depth and height in metres")
    synth.add_argument("--planes", type=int, default=6, help="Planes of the sparse preset")
    synth.add_argument("--clutter", type=int, default=0, help="Clutter spheres of the sparse preset")
    synth.add_argument("--lines", type=int, default=16, help="Elevation lines")
    synth.add_argument("--azimuth-samples", type=int, default=360)
    synth.add_argument("--sweeps", type=int, default=40, help="Sweeps per motor run")
    synth.add_argument("--noise", type=float, default=0.0, help="Range noise sigma in metres")
    synth.add_argument("--duration", type=float, default=10.0, help="Motor run duration (s)")
    synth.add_argument("--revolutions", type=float, default=1.0)
    synth.add_argument("--rate", type=float, default=100.0, help="Encoder rate (Hz)")
    synth.add_argument("--roll", type=float, default=2.0, help="True roll (deg)")
    synth.add_argument("--pitch", type=float, default=-1.5, help="True pitch (deg)")
    synth.add_argument("--tx", type=float, default=0.05, help="True tx (m)")
    synth.add_argument("--ty", type=float, default=-0.03, help="True ty (m)")
    synth.add_argument("--yaw", type=float, default=0.0, help="Fixed yaw (deg)")
    synth.add_argument("--tz", type=float, default=0.0, help="Fixed tz (m)")
    synth.add_argument("--format", dest="cloud_format", choices=("csv", "lmc"), default="csv")
    synth.add_argument("--with-regions", action="store_true", help="Also write an evaluation region file")
    synth.add_argument("--out", required=True, help="Output prefix, e.g. data/room")

    cal = sub.add_parser("calibrate", parents=[common], help="Calibrate a motor-stamped scan")
    _stamped_inputs(cal)
    cal.add_argument("--report", default="calibration.json", help="Report path (JSON)")
    cal.add_argument("--init", help="Start from the extrinsics of a report or sidecar")
    cal.add_argument("--estimate-time-offset", action="store_true", default=None)
    cal.add_argument("--jacobian-form", choices=("full", "simplified"))
    cal.add_argument("--dump-dir", help="Write per-iteration primitive/correspondence CSVs here")

    ev = sub.add_parser("evaluate", parents=[common], help="Plane-fitting error under one or two extrinsics")
    _stamped_inputs(ev)
    ev.add_argument("extrinsics", help="Calibration report or ground-truth sidecar")
    ev.add_argument("--compare", help="Second report; writes a comparison table")
    ev.add_argument("--regions", help="Region file (default: automatic voxel regions)")
    ev.add_argument("--out", default="plane_fit.csv", help="Report CSV")

    sw = sub.add_parser("sweep", parents=[common], help="Sweep voxel size x planarity threshold")
    _stamped_inputs(sw)
    sw.add_argument("--voxel-sizes", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    sw.add_argument("--planarity", type=float, nargs="+", default=[0.5, 0.7])
    sw.add_argument("--regions", help="Region file used for the cell error")
    sw.add_argument("--init", help="Start from the extrinsics of a report or sidecar")
    sw.add_argument("--out", default="sweep.csv")

    st = sub.add_parser("stability", parents=[common], help="Per-parameter dispersion over time batches")
    _stamped_inputs(st)
    st.add_argument("--batches", type=int, default=5)
    st.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    st.add_argument("--init", help="Start from the extrinsics of a report or sidecar")
    st.add_argument("--out", default="stability.csv")
    return parser


# ---------------------------------------------------------------------------
# Helpers


def _with_source(path: Any, fn: Callable, *args: Any, **kwargs: Any) -> Any:
    """Run a loader, tagging parse errors with the file they came from."""
    try:
        return fn(*args, **kwargs)
    except ParseError as err:
        if getattr(err, "source", None) is None:
            err.source = Path(path)
        raise


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = _with_source(args.config, load_run_config, args.config)
    return config.with_overrides(
        seed=args.seed,
        mode=args.mode,
        workers=args.workers,
        voxel_size=args.voxel_size,
        planarity_min=args.planarity_min,
        time_offset=getattr(args, "time_offset", None),
        estimate_time_offset=getattr(args, "estimate_time_offset", None),
        jacobian_form=getattr(args, "jacobian_form", None),
    )


def _load_stamped(args: argparse.Namespace, config: RunConfig):
    scan = _with_source(args.cloud, read_cloud, args.cloud, args.cloud_format)
    traj = _with_source(args.trajectory, read_trajectory, args.trajectory)
    cloud = stamp_cloud(scan, traj, time_offset=config.time_offset, source_id=str(args.cloud))
    if cloud.dropped:
        print(colorize(f"[WARN] {cloud.dropped} points outside the encoder span were dropped", YELLOW))
    return cloud


def _initial(args: argparse.Namespace, config: RunConfig) -> ExtrinsicParams:
    if getattr(args, "init", None):
        return load_extrinsics(args.init)
    return config.initial_extrinsics()


def _fmt_ext(ext: ExtrinsicParams) -> str:
    return (
        f"roll={math.degrees(ext.roll):+.4f}deg pitch={math.degrees(ext.pitch):+.4f}deg "
        f"tx={ext.tx:+.5f}m ty={ext.ty:+.5f}m"
    )


def _print_error_context(path: Optional[Path], line_num: int, message: str, snippet: str) -> None:
    pointer = colorize("--> ", RED)
    print(colorize(f"[PARSE ERROR] {message}", RED))
    lines: List[str] = []
    if path is not None and path.exists():
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError:
            lines = []
    if 1 <= line_num <= len(lines):
        print(f"{pointer}{path}:{line_num}: {lines[line_num - 1]}")
    elif snippet:
        print(f"{pointer}{snippet}")


def _emit_error(err: CalibrationError) -> None:
    print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    if args.scene:
        scene = _with_source(args.scene, load_scene, args.scene)
    elif args.preset == "room":
        scene = make_room_scene(*args.size)
    else:
        scene = make_sparse_scene(args.planes, args.clutter, config.seed)
    sensor = SensorSpec(
        elevation_lines=args.lines,
        azimuth_samples=args.azimuth_samples,
        sweeps=args.sweeps,
        range_sigma=args.noise,
    )
    traj = MotorTrajectory.constant_speed(args.duration, args.revolutions, args.rate)
    truth = ExtrinsicParams.from_degrees(args.roll, args.pitch, args.tx, args.ty, args.yaw, args.tz)

    print(colorize(f"[SYNTH] Scene '{scene.name}' with {len(scene)} surfaces, seed {config.seed}", CYAN))
    cloud = simulate_scan(scene, sensor, traj, truth, seed=config.seed)

    prefix = Path(args.out)
    cloud_path = prefix.with_name(f"{prefix.name}.{args.cloud_format}")
    traj_path = prefix.with_name(f"{prefix.name}_traj.csv")
    truth_path = prefix.with_name(f"{prefix.name}_truth.json")
    files = {"cloud": cloud_path.name, "trajectory": traj_path.name}
    write_cloud(cloud, cloud_path, args.cloud_format)
    write_trajectory(traj, traj_path)
    if args.with_regions:
        regions_path = prefix.with_name(f"{prefix.name}_regions.txt")
        dump_regions(regions_for_scene(scene), regions_path, source=scene.name)
        files["regions"] = regions_path.name
    sensor_info: Dict[str, Any] = {
        "elevation_lines": sensor.elevation_lines,
        "azimuth_samples": sensor.azimuth_samples,
        "sweeps": sensor.sweeps,
        "range_sigma": sensor.range_sigma,
        "duration": args.duration,
        "revolutions": args.revolutions,
    }
    write_truth_sidecar(truth, truth_path, seed=config.seed, scene=scene.name, sensor=sensor_info, files=files)

    print(f"  points: {len(cloud)}")
    print(f"  truth:  {_fmt_ext(truth)}")
    for path in (cloud_path, traj_path, truth_path):
        print(f"  wrote {path}")
    if args.with_regions:
        print(f"  wrote {regions_path}")
    print(colorize("[SUCCESS] Synthetic dataset written", GREEN))
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    cloud = _load_stamped(args, config)
    ext_init = _initial(args, config)

    print(colorize(f"[CALIB] {len(cloud)} points, {config.mode} mode", CYAN))
    result = calibrate(cloud, config, ext_init, dump_dir=args.dump_dir)

    report_path = Path(args.report)
    write_report(
        result,
        report_path,
        config=config.to_dict(),
        inputs={"cloud": str(args.cloud), "trajectory": str(args.trajectory), "init": ext_init.to_dict()},
    )
    cost_path = write_cost_trace(result, report_path.with_name(f"{report_path.stem}_cost.csv"))
    param_path = write_param_trace(result, report_path.with_name(f"{report_path.stem}_params.csv"))

    stats = result.residual_stats
    print(f"  result: {_fmt_ext(result.ext)}")
    print(
        f"  outer iterations: {result.outer_iterations}, correspondences: {result.n_correspondences}, "
        f"rms residual: {stats.get('rms', float('nan')):.3e} m"
    )
    print(f"  wrote {report_path}, {cost_path.name}, {param_path.name}")
    if not result.converged:
        print(colorize("[WARN] Calibration did not converge within the iteration cap", YELLOW))
        return EXIT_NOT_CONVERGED
    print(colorize("[SUCCESS] Calibration converged", GREEN))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    cloud = _load_stamped(args, config)
    regions = _with_source(args.regions, load_regions, args.regions) if args.regions else []
    first_ext = load_extrinsics(args.extrinsics)
    automatic = not regions
    if automatic:
        # derived once under the first extrinsics so a comparison measures the same voxels
        points_B = transform_points(cloud.points, first_ext, cloud.theta)
        regions = auto_regions(points_B, config.voxel_size, config.planarity_min, config.min_voxel_support)
        print(colorize(f"[EVAL] No region file; {len(regions)} automatic voxel regions (aggregate only)", CYAN))
    else:
        print(colorize(f"[EVAL] {len(regions)} regions", CYAN))

    first = evaluate_cloud(cloud, first_ext, regions, label=Path(args.extrinsics).stem)
    first.automatic = automatic
    for row in first.flagged:
        print(colorize(f"[WARN] Region {row.name}: {row.status} ({row.count} points)", YELLOW))
    out_path = write_report_csv(first, args.out)
    print(f"  aggregate: mse {first.aggregate_mse:.6e} m^2, rms {first.aggregate_rms:.6e} m")
    print(f"  wrote {out_path}")

    if args.compare:
        second = evaluate_cloud(cloud, load_extrinsics(args.compare), regions, label=Path(args.compare).stem)
        second.automatic = automatic
        rows = compare_reports(first, second)
        out = Path(args.out)
        compare_path = write_comparison_csv(
            rows, out.with_name(f"{out.stem}_compare.csv"), (first.label, second.label)
        )
        for row in rows:
            print(f"  {row.region:<20} {row.first:.6e} -> {row.second:.6e} (x{row.ratio:.3f})")
        print(f"  wrote {compare_path}")
    print(colorize("[SUCCESS] Evaluation written", GREEN))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    cloud = _load_stamped(args, config)
    regions = _with_source(args.regions, load_regions, args.regions) if args.regions else None
    grid = SweepGrid(voxel_sizes=list(args.voxel_sizes), planarity_thresholds=list(args.planarity))
    rows, cols = grid.shape
    print(colorize(f"[SWEEP] {rows}x{cols} grid, {config.mode} mode", CYAN))

    # cells own their pipelines; the worker flag parallelises cells, not their internals
    cell_config = config.with_overrides(workers=1)
    parameter_sweep(
        cloud, grid, cell_config, ext_init=_initial(args, config), regions=regions,
        workers=config.workers, progress=sys.stderr.isatty(),
    )
    out_path = write_sweep_csv(grid, args.out)
    failed = [c for c in grid if c.status == "failed"]
    for cell in failed:
        print(colorize(f"[WARN] voxel {cell.voxel_size:g} / planarity {cell.planarity_min:g}: {cell.message}", YELLOW))
    print(f"  wrote {out_path}")
    print(colorize(f"[SUCCESS] Sweep finished ({len(failed)} failed cells)", GREEN))
    return EXIT_OK


def cmd_stability(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    cloud = _load_stamped(args, config)
    batches = cloud.split(args.batches)
    print(colorize(f"[STABILITY] {len(batches)} batches, modes: {', '.join(args.modes)}", CYAN))
    report = stability_analysis(
        batches, config, modes=args.modes, ext_init=_initial(args, config), progress=sys.stderr.isatty()
    )
    out_path = write_stability_csv(report, args.out)
    for mode in report.modes():
        summary = report.summary(mode)
        spread = ", ".join(f"{name} std {stats['std']:.3e}" for name, stats in summary.items())
        print(f"  {mode}: {spread}")
    for outcome in report.failures():
        reason = outcome.error or "not converged"
        print(colorize(f"[WARN] batch {outcome.batch} ({outcome.mode}): {reason}", YELLOW))
    print(f"  wrote {out_path}")
    print(colorize("[SUCCESS] Stability analysis written", GREEN))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "stability": cmd_stability,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        print(colorize("\n[ERROR] No command specified", RED))
        return EXIT_INPUT_ERROR

    if args.verbose:
        setup_logging("DEBUG" if args.verbose > 1 else "INFO")

    try:
        return COMMANDS[args.command](args)
    except ParseError as err:
        _print_error_context(getattr(err, "source", None), err.line_num, err.message, err.line_content)
        _emit_error(err)
        return err.exit_code
    except CalibrationError as err:
        print(colorize(f"[ERROR] {err}", RED))
        _emit_error(err)
        return err.exit_code
    except Exception as exc:  # pragma: no cover
        print(colorize(f"[ERROR] {exc}", RED))
        print(json.dumps({"error": type(exc).__name__, "exit_code": EXIT_UNEXPECTED, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            import traceback

            traceback.print_exc()
        return EXIT_UNEXPECTED


__all__ = ["build_parser", "main"]
