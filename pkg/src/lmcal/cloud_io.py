"""Reading and writing motor-stamped point clouds and encoder logs.

Two cloud formats are supported, selected by extension or explicitly:

``.csv``
    ``x,y,z,t`` one record per line, optional header line, values written
    with ``%.17g`` so a read-back is exact.
``.lmc``
    ``b"LMC1"`` magic, little-endian ``u64`` record count, then ``count``
    records of four little-endian ``f64`` (x, y, z, t).

Encoder logs are ``t,angle_rad`` CSV files. They are sorted by time and
unwrapped on ingestion so interpolation never crosses a 2*pi seam.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import (
    EmptyInputError,
    InputError,
    OutOfRangeError,
    ParseError,
    ValidationError,
)
from .geometry import MotorTrajectory, unwrap_angles

__all__ = [
    "BINARY_MAGIC",
    "RANGE_MAX",
    "RANGE_MIN",
    "MotorStampedCloud",
    "RawScan",
    "RawScanRecord",
    "detect_format",
    "read_cloud",
    "read_trajectory",
    "stamp_cloud",
    "write_cloud",
    "write_trajectory",
]

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"LMC1"
_HEADER = struct.Struct("<4sQ")
_RECORD_DTYPE = np.dtype("<f8")

RANGE_MIN = 0.1
RANGE_MAX = 40.0

PathLike = Union[str, Path]


@dataclass(frozen=True)
class RawScanRecord:
    x: float
    y: float
    z: float
    t: float


@dataclass
class RawScan:
    """LiDAR-frame points with sensor timestamps, in file order."""

    points: np.ndarray
    t: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        if self.points.shape[0] != self.t.shape[0]:
            raise ValidationError("points and timestamps differ in length")

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __getitem__(self, index: int) -> RawScanRecord:
        x, y, z = self.points[index]
        return RawScanRecord(float(x), float(y), float(z), float(self.t[index]))

    def __iter__(self) -> Iterator[RawScanRecord]:
        for index in range(len(self)):
            yield self[index]

    @classmethod
    def from_records(cls, records: Sequence[RawScanRecord]) -> "RawScan":
        if not records:
            return cls(points=np.empty((0, 3)), t=np.empty(0))
        arr = np.array([[r.x, r.y, r.z, r.t] for r in records], dtype=float)
        return cls(points=arr[:, :3], t=arr[:, 3])


@dataclass
class MotorStampedCloud:
    """Points in {L} with their timestamps and interpolated motor angles.

    ``theta`` was looked up at ``t + time_offset``. ``labels`` holds the
    source patch of simulated points (-1 for clutter) and is ``None`` for
    clouds read from disk.
    """

    points: np.ndarray
    t: np.ndarray
    theta: np.ndarray
    source_id: str = ""
    dropped: int = 0
    time_offset: float = 0.0
    labels: Optional[np.ndarray] = None
    trajectory: Optional[MotorTrajectory] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        n = self.points.shape[0]
        if n == 0:
            raise EmptyInputError("motor-stamped cloud has no points")
        if self.t.shape[0] != n or self.theta.shape[0] != n:
            raise ValidationError("points, t and theta must have equal length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValidationError("labels must match the point count")

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def angular_span(self) -> float:
        return float(self.theta.max() - self.theta.min())

    def subset(self, index: Union[np.ndarray, Sequence[int]]) -> "MotorStampedCloud":
        index = np.asarray(index)
        return MotorStampedCloud(
            points=self.points[index],
            t=self.t[index],
            theta=self.theta[index],
            source_id=self.source_id,
            dropped=0,
            time_offset=self.time_offset,
            labels=None if self.labels is None else self.labels[index],
            trajectory=self.trajectory,
        )

    def split(self, n: int) -> List["MotorStampedCloud"]:
        """Cut into ``n`` contiguous time segments of (nearly) equal size."""
        if n < 1:
            raise ValidationError(f"cannot split into {n} batches")
        if n > len(self):
            raise ValidationError(f"cannot split {len(self)} points into {n} batches")
        order = np.argsort(self.t, kind="stable")
        batches = []
        for chunk in np.array_split(order, n):
            batch = self.subset(np.sort(chunk))
            batch.source_id = f"{self.source_id}#{len(batches)}"
            batches.append(batch)
        return batches

    def to_raw(self) -> RawScan:
        return RawScan(points=self.points, t=self.t, labels=self.labels)


# ---------------------------------------------------------------------------
# Format helpers


def detect_format(path: PathLike, fmt: Optional[str] = None) -> str:
    if fmt:
        fmt = fmt.lower().lstrip(".")
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in ("csv", "lmc"):
        raise ValidationError(f"unknown cloud format '{fmt}' for {path} (use .csv or .lmc)")
    return fmt


def _is_header(line: str) -> bool:
    first = line.split(",")[0].strip()
    try:
        float(first)
    except ValueError:
        return True
    return False


def _parse_csv_rows(path: Path, columns: int, what: str) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc

    rows: List[List[float]] = []
    record = 0
    for line_num, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if not rows and record == 0 and _is_header(line):
            record = -1
            continue
        record = max(record, 0) + 1
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != columns:
            raise ParseError(
                line_num, f"{what} record {record}: expected {columns} fields, got {len(parts)}", raw
            )
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ParseError(line_num, f"{what} record {record}: non-numeric field", raw) from None
        if not all(np.isfinite(values)):
            raise ParseError(line_num, f"{what} record {record}: non-finite value", raw)
        rows.append(values)

    if not rows:
        raise EmptyInputError(f"{path} contains no {what} records")
    return np.array(rows, dtype=float)


def _read_binary(path: Path) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise ParseError(0, f"{path}: truncated header")
    magic, count = _HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise ParseError(0, f"{path}: bad magic {magic!r}, expected {BINARY_MAGIC!r}")
    expected = _HEADER.size + count * 4 * _RECORD_DTYPE.itemsize
    if len(data) != expected:
        raise ParseError(0, f"{path}: size {len(data)} does not match {count} records")
    if count == 0:
        raise EmptyInputError(f"{path} contains no cloud records")
    arr = np.frombuffer(data, dtype=_RECORD_DTYPE, offset=_HEADER.size).reshape(count, 4)
    bad = ~np.all(np.isfinite(arr), axis=1)
    if bad.any():
        record = int(np.argmax(bad)) + 1
        raise ParseError(record, f"cloud record {record}: non-finite value")
    return arr.astype(float)


def read_cloud(
    path: PathLike, fmt: Optional[str] = None, *, validate_range: bool = False
) -> RawScan:
    """Records in file order. ``validate_range`` enforces the 0.1-40 m sensor limits."""
    path = Path(path)
    kind = detect_format(path, fmt)
    if not path.exists():
        raise InputError(f"cloud file not found: {path}")
    arr = _read_binary(path) if kind == "lmc" else _parse_csv_rows(path, 4, "cloud")
    scan = RawScan(points=arr[:, :3], t=arr[:, 3])
    if validate_range:
        ranges = np.linalg.norm(scan.points, axis=1)
        bad = (ranges < RANGE_MIN) | (ranges > RANGE_MAX)
        if bad.any():
            record = int(np.argmax(bad)) + 1
            raise ValidationError(
                f"cloud record {record}: range {ranges[record - 1]:.3f} m outside "
                f"[{RANGE_MIN}, {RANGE_MAX}] m"
            )
    logger.info("Read %d records from %s", len(scan), path)
    return scan


def write_cloud(
    cloud: Union[RawScan, MotorStampedCloud], path: PathLike, fmt: Optional[str] = None
) -> Path:
    path = Path(path)
    kind = detect_format(path, fmt)
    arr = np.column_stack([cloud.points, cloud.t]).astype(_RECORD_DTYPE)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if kind == "lmc":
            with path.open("wb") as handle:
                handle.write(_HEADER.pack(BINARY_MAGIC, arr.shape[0]))
                handle.write(np.ascontiguousarray(arr).tobytes())
        else:
            np.savetxt(path, arr, fmt="%.17g", delimiter=",", header="x,y,z,t", comments="")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %d records to %s", arr.shape[0], path)
    return path


def read_trajectory(path: PathLike) -> MotorTrajectory:
    """Encoder log ``t,angle_rad``: sorted by time, then unwrapped."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"trajectory file not found: {path}")
    arr = _parse_csv_rows(path, 2, "trajectory")
    if arr.shape[0] < 2:
        raise ValidationError(f"trajectory needs at least 2 samples, got {arr.shape[0]}")
    order = np.argsort(arr[:, 0], kind="stable")
    t = arr[order, 0]
    duplicates = np.flatnonzero(np.diff(t) == 0.0)
    if duplicates.size:
        raise ValidationError(f"duplicate trajectory timestamp {t[duplicates[0]]!r}")
    return MotorTrajectory(timestamps=t, angles=unwrap_angles(arr[order, 1]))


def write_trajectory(traj: MotorTrajectory, path: PathLike) -> Path:
    path = Path(path)
    arr = np.column_stack([traj.timestamps, traj.angles])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, arr, fmt="%.17g", delimiter=",", header="t,angle_rad", comments="")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    return path


def stamp_cloud(
    records: Union[RawScan, Sequence[RawScanRecord]],
    traj: MotorTrajectory,
    *,
    time_offset: float = 0.0,
    source_id: str = "",
) -> MotorStampedCloud:
    """Attach interpolated motor angles; points outside the encoder span are dropped."""
    scan = records if isinstance(records, RawScan) else RawScan.from_records(list(records))
    shifted = scan.t + time_offset
    keep = np.asarray(traj.contains(shifted), dtype=bool).reshape(-1)
    dropped = int(keep.size - np.count_nonzero(keep))
    if dropped:
        logger.warning(
            "Dropped %d of %d points outside the encoder span [%.6f, %.6f]",
            dropped,
            keep.size,
            traj.start,
            traj.end,
        )
    if not keep.any():
        raise EmptyInputError(
            f"all {keep.size} points fall outside the encoder span [{traj.start}, {traj.end}]"
        )
    try:
        theta = traj.angle_at(shifted[keep])
    except OutOfRangeError as exc:  # pragma: no cover - guarded by contains()
        raise EmptyInputError(str(exc)) from exc
    return MotorStampedCloud(
        points=scan.points[keep],
        t=scan.t[keep],
        theta=np.atleast_1d(theta),
        source_id=source_id,
        dropped=dropped,
        time_offset=time_offset,
        labels=None if scan.labels is None else scan.labels[keep],
        trajectory=traj,
    )
