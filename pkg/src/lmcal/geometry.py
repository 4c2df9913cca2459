"""Frames, rotations and the motor motion model.

Three frames are involved: the base frame {B} (robot body), the motor frame
{M} that spins about the base z-axis, and the LiDAR frame {L}. A LiDAR point
is mapped to the base frame with::

    r_B(t) = R_MB(t) · (R_LM · r_L + r_LM)

``R_LM`` is built from (roll, pitch, yaw_fixed) as ``Rz(yaw)·Ry(pitch)·Rx(roll)``
(scipy's intrinsic ``"ZYX"`` sequence) and ``r_LM = (tx, ty, tz_fixed)``. The
same convention is used by the simulator, the solver and the evaluation code.

All functions are pure; vectors and rotations are plain ``numpy`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import OutOfRangeError, ValidationError

__all__ = [
    "EULER_SEQUENCE",
    "PARAMETER_NAMES",
    "ExtrinsicParams",
    "MotorTrajectory",
    "motor_rotation",
    "rot_z",
    "rot_z_stack",
    "skew",
    "transform_point",
    "transform_points",
    "unwrap_angles",
    "wrap_angle",
]

EULER_SEQUENCE = "ZYX"
PARAMETER_NAMES = ("roll", "pitch", "tx", "ty")

ArrayLike = Union[Sequence[float], np.ndarray]


def rot_z(angle: float) -> np.ndarray:
    """Rotation about the z-axis by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_stack(angles: ArrayLike) -> np.ndarray:
    """Vectorised :func:`rot_z`: (N,) angles -> (N, 3, 3) rotations."""
    angles = np.asarray(angles, dtype=float)
    c, s = np.cos(angles), np.sin(angles)
    out = np.zeros(angles.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def skew(v: ArrayLike) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def wrap_angle(angle: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def unwrap_angles(angles: ArrayLike) -> np.ndarray:
    """Add 2*pi whenever consecutive samples drop by more than pi."""
    return np.unwrap(np.asarray(angles, dtype=float))


@dataclass(frozen=True)
class ExtrinsicParams:
    """The 4-DOF LiDAR-to-motor mounting state plus the fixed yaw and height."""

    roll: float = 0.0
    pitch: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    yaw_fixed: float = 0.0
    tz_fixed: float = 0.0

    def __post_init__(self) -> None:
        values = (self.roll, self.pitch, self.tx, self.ty, self.yaw_fixed, self.tz_fixed)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError(f"extrinsic parameters must be finite: {values}")
        if abs(self.roll) >= math.pi / 2 or abs(self.pitch) >= math.pi / 2:
            raise ValidationError(
                f"roll/pitch must stay below pi/2 in magnitude (near-upright mount): "
                f"roll={self.roll}, pitch={self.pitch}"
            )

    @property
    def rotation(self) -> np.ndarray:
        """R_LM = Rz(yaw_fixed) · Ry(pitch) · Rx(roll)."""
        return Rotation.from_euler(
            EULER_SEQUENCE, [self.yaw_fixed, self.pitch, self.roll]
        ).as_matrix()

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz_fixed])

    def as_vector(self) -> np.ndarray:
        """The optimised subset, ordered as :data:`PARAMETER_NAMES`."""
        return np.array([self.roll, self.pitch, self.tx, self.ty])

    def with_vector(self, values: ArrayLike) -> "ExtrinsicParams":
        roll, pitch, tx, ty = (float(v) for v in values)
        return replace(self, roll=roll, pitch=pitch, tx=tx, ty=ty)

    @classmethod
    def from_degrees(
        cls,
        roll_deg: float = 0.0,
        pitch_deg: float = 0.0,
        tx: float = 0.0,
        ty: float = 0.0,
        yaw_fixed_deg: float = 0.0,
        tz_fixed: float = 0.0,
    ) -> "ExtrinsicParams":
        return cls(
            roll=math.radians(roll_deg),
            pitch=math.radians(pitch_deg),
            tx=tx,
            ty=ty,
            yaw_fixed=math.radians(yaw_fixed_deg),
            tz_fixed=tz_fixed,
        )

    @classmethod
    def from_rotation(
        cls, rotation: np.ndarray, tx: float, ty: float, yaw_fixed: float, tz_fixed: float
    ) -> "ExtrinsicParams":
        """Re-extract (roll, pitch) in the ZYX convention; yaw is reset to ``yaw_fixed``."""
        _, pitch, roll = Rotation.from_matrix(rotation).as_euler(EULER_SEQUENCE)
        return cls(
            roll=float(roll),
            pitch=float(pitch),
            tx=tx,
            ty=ty,
            yaw_fixed=yaw_fixed,
            tz_fixed=tz_fixed,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "roll": self.roll,
            "pitch": self.pitch,
            "tx": self.tx,
            "ty": self.ty,
            "yaw_fixed": self.yaw_fixed,
            "tz_fixed": self.tz_fixed,
            "roll_deg": math.degrees(self.roll),
            "pitch_deg": math.degrees(self.pitch),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ExtrinsicParams":
        try:
            return cls(
                roll=float(data["roll"]),  # type: ignore[arg-type]
                pitch=float(data["pitch"]),  # type: ignore[arg-type]
                tx=float(data["tx"]),  # type: ignore[arg-type]
                ty=float(data["ty"]),  # type: ignore[arg-type]
                yaw_fixed=float(data.get("yaw_fixed", 0.0)),  # type: ignore[arg-type]
                tz_fixed=float(data.get("tz_fixed", 0.0)),  # type: ignore[arg-type]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"invalid extrinsic record: {exc}") from exc


@dataclass(frozen=True)
class MotorTrajectory:
    """Encoder samples ``(timestamp, angle)``; angles already unwrapped."""

    timestamps: np.ndarray
    angles: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        t = np.asarray(self.timestamps, dtype=float)
        a = np.asarray(self.angles, dtype=float)
        if t.ndim != 1 or t.shape != a.shape:
            raise ValidationError("trajectory timestamps and angles must be 1-D and equally long")
        if t.size < 2:
            raise ValidationError(f"trajectory needs at least 2 samples, got {t.size}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(a))):
            raise ValidationError("trajectory contains non-finite samples")
        if np.any(np.diff(t) <= 0.0):
            raise ValidationError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "angles", a)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    @property
    def angular_span(self) -> float:
        return float(abs(self.angles[-1] - self.angles[0]))

    def contains(self, t: Union[float, np.ndarray]) -> Union[bool, np.ndarray]:
        inside = (np.asarray(t) >= self.start) & (np.asarray(t) <= self.end)
        return bool(inside) if np.ndim(inside) == 0 else inside

    def angle_at(self, t: Union[float, ArrayLike]) -> Union[float, np.ndarray]:
        """Linearly interpolated motor angle; raises outside the sample span."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.start) or np.any(t_arr > self.end):
            raise OutOfRangeError(
                f"time outside trajectory span [{self.start}, {self.end}]"
            )
        theta = np.interp(t_arr, self.timestamps, self.angles)
        return float(theta) if theta.ndim == 0 else theta

    def clipped_angle_at(self, t: ArrayLike) -> np.ndarray:
        """As :meth:`angle_at` with times clamped into the span (time-offset search)."""
        t_arr = np.clip(np.asarray(t, dtype=float), self.start, self.end)
        return np.interp(t_arr, self.timestamps, self.angles)

    @classmethod
    def constant_speed(
        cls,
        duration: float,
        revolutions: float,
        rate_hz: float = 100.0,
        start_angle: float = 0.0,
        start_time: float = 0.0,
    ) -> "MotorTrajectory":
        """Encoder log of a motor turning at constant speed."""
        if duration <= 0 or rate_hz <= 0:
            raise ValidationError("duration and rate_hz must be positive")
        n = max(2, int(math.ceil(duration * rate_hz)) + 1)
        t = start_time + np.linspace(0.0, duration, n)
        angles = start_angle + 2.0 * math.pi * revolutions * (t - start_time) / duration
        return cls(timestamps=t, angles=angles)


def motor_rotation(traj: MotorTrajectory, t: float) -> np.ndarray:
    """R_MB(t): rotation about the base z-axis by the interpolated encoder angle."""
    return rot_z(traj.angle_at(t))  # type: ignore[arg-type]


def transform_point(p_L: ArrayLike, ext: ExtrinsicParams, R_MB: np.ndarray) -> np.ndarray:
    """r_B = R_MB · (R_LM · p_L + r_LM)."""
    p = np.asarray(p_L, dtype=float)
    return R_MB @ (ext.rotation @ p + ext.translation)


def transform_points(points_L: np.ndarray, ext: ExtrinsicParams, theta: ArrayLike) -> np.ndarray:
    """Vectorised transform of (N, 3) LiDAR points stamped with motor angles ``theta``."""
    points_L = np.asarray(points_L, dtype=float)
    in_motor = points_L @ ext.rotation.T + ext.translation
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty_like(in_motor)
    out[:, 0] = c * in_motor[:, 0] - s * in_motor[:, 1]
    out[:, 1] = s * in_motor[:, 0] + c * in_motor[:, 1]
    out[:, 2] = in_motor[:, 2]
    return out
