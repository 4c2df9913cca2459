"""Exception hierarchy for lmcal.

Every error carries the exit code the CLI reports for its family, so scripted
sweeps can tell bad input from bad geometry without parsing messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

__all__ = [
    "EXIT_OK",
    "EXIT_UNEXPECTED",
    "EXIT_INPUT_ERROR",
    "EXIT_DEGENERATE_GEOMETRY",
    "EXIT_NOT_CONVERGED",
    "CalibrationError",
    "InputError",
    "ParseError",
    "ValidationError",
    "EmptyInputError",
    "OutOfRangeError",
    "GeometryError",
    "DegenerateFitError",
    "EmptyResultError",
    "InsufficientOverlapError",
    "DegenerateGeometryError",
]

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT_ERROR = 2
EXIT_DEGENERATE_GEOMETRY = 3
EXIT_NOT_CONVERGED = 4


class CalibrationError(Exception):
    """Base class of every error raised by lmcal."""

    exit_code: int = EXIT_UNEXPECTED

    @property
    def error_class(self) -> str:
        return type(self).__name__

    def to_dict(self) -> Dict[str, object]:
        return {
            "error": self.error_class,
            "exit_code": self.exit_code,
            "message": str(self),
        }


class InputError(CalibrationError):
    exit_code = EXIT_INPUT_ERROR


@dataclass
class ParseError(InputError):
    """Malformed line in a cloud, trajectory, config, scene or region file."""

    line_num: int
    message: str
    line_content: str = ""

    def __str__(self) -> str:
        if self.line_content:
            return f"Line {self.line_num}: {self.message}\n  {self.line_content}"
        return f"Line {self.line_num}: {self.message}"


class ValidationError(InputError):
    """Input parsed but violates a documented invariant."""


class EmptyInputError(InputError):
    """Nothing left to work on (empty file, every point dropped, no hits)."""


class OutOfRangeError(InputError):
    """A timestamp outside the encoder trajectory span."""


class GeometryError(CalibrationError):
    exit_code = EXIT_DEGENERATE_GEOMETRY


class DegenerateFitError(GeometryError):
    """Neighbourhood too thin (coincident or collinear) to define a plane."""


class EmptyResultError(GeometryError):
    """A stage produced nothing, e.g. no voxel meets the minimum support."""


class InsufficientOverlapError(GeometryError):
    """No plane was observed twice at sufficiently different motor angles."""


@dataclass
class DegenerateGeometryError(GeometryError):
    """JᵀWJ is rank deficient; ``null_direction`` names the unconstrained mix."""

    message: str
    null_direction: Dict[str, float] = field(default_factory=dict)
    eigenvalues: Optional[list] = None

    def __str__(self) -> str:
        if not self.null_direction:
            return self.message
        direction = ", ".join(f"{k}={v:+.3f}" for k, v in self.null_direction.items())
        return f"{self.message} (null direction: {direction})"

    def to_dict(self) -> Dict[str, object]:
        data = super().to_dict()
        data["null_direction"] = dict(self.null_direction)
        return data
