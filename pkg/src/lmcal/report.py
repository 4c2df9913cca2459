"""Calibration reports, trace CSVs and ground-truth sidecars.

Reports are JSON documents with sorted keys. ``orjson`` is used when the
``perf`` extra is installed; the standard ``json`` module otherwise. Both
write the same structure.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import InputError, ValidationError
from .geometry import PARAMETER_NAMES, ExtrinsicParams
from .solver import SolveResult

try:
    import orjson
except ImportError:  # perf extra not installed
    orjson = None

__all__ = [
    "dumps",
    "load_extrinsics",
    "read_json",
    "write_cost_trace",
    "write_json",
    "write_param_trace",
    "write_report",
    "write_truth_sidecar",
]

logger = logging.getLogger(__name__)

REPORT_TOOL = "lmcal"


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(data: Dict[str, Any]) -> str:
    clean = _clean(data)
    if orjson is not None:
        return orjson.dumps(clean, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode("utf-8")
    return json.dumps(clean, indent=2, sort_keys=True)


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(data) + "\n", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        data = orjson.loads(text) if orjson is not None else json.loads(text)
    except ValueError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return data


def write_report(
    result: SolveResult,
    path: Union[str, Path],
    *,
    config: Dict[str, Any],
    inputs: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Structured report with the resolved run config echoed under ``config``."""
    from . import __version__

    data: Dict[str, Any] = {
        "tool": REPORT_TOOL,
        "version": __version__,
        "kind": "calibration",
        "inputs": inputs or {},
        "config": config,
        "result": result.to_dict(),
    }
    if extra:
        data.update(extra)
    write_json(data, path)
    logger.info("Wrote report %s", path)
    return path


def write_cost_trace(result: SolveResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["outer", "inner", "cost", "lambda"])
        for rec in result.cost_trace:
            writer.writerow([rec.outer, rec.inner, repr(float(rec.cost)), repr(float(rec.lam))])
    return path


def write_param_trace(result: SolveResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["outer", *PARAMETER_NAMES, "time_offset", "cost", "correspondences"]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in result.param_trace:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c] for c in columns])
    return path


def write_truth_sidecar(
    ext_true: ExtrinsicParams,
    path: Union[str, Path],
    *,
    seed: int,
    scene: str,
    sensor: Dict[str, Any],
    files: Dict[str, str],
) -> Path:
    from . import __version__

    return write_json(
        {
            "tool": REPORT_TOOL,
            "version": __version__,
            "kind": "ground_truth",
            "extrinsics": ext_true.to_dict(),
            "seed": seed,
            "scene": scene,
            "sensor": sensor,
            "files": files,
        },
        path,
    )


def load_extrinsics(path: Union[str, Path]) -> ExtrinsicParams:
    """Extrinsics from a calibration report or a ground-truth sidecar."""
    data = read_json(path)
    if isinstance(data.get("result"), dict) and "extrinsics" in data["result"]:
        record = data["result"]["extrinsics"]
    elif "extrinsics" in data:
        record = data["extrinsics"]
    else:
        raise ValidationError(f"{path} holds neither a calibration result nor ground truth")
    if not isinstance(record, dict):
        raise ValidationError(f"{path}: extrinsics must be an object")
    return ExtrinsicParams.from_dict(record)
