"""
DriftLab - Custom Exceptions.

Defines a hierarchy of domain-specific exceptions for clean error handling.
Each top-level family carries the exit code the command line reports.
"""

from __future__ import annotations
from typing import Optional


class DriftLabError(Exception):
    """Base exception for all DriftLab errors."""

    exit_code: int = 1

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)

    def __str__(self) -> str:
        if self.details:
            return f"{self.message}: {self.details}"
        return self.message

    def to_dict(self) -> dict:
        """Machine-readable error object for the command line."""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
            "exit_code": self.exit_code,
        }


# -----------------------------------------------------------------------------
# Configuration Errors (exit code 2)
# -----------------------------------------------------------------------------

class ConfigurationError(DriftLabError):
    """Raised when configuration is invalid or internally inconsistent."""

    exit_code = 2


class InvalidScheduleError(ConfigurationError):
    """Raised when a noise schedule violates its invariants."""
    pass


class StepIndexError(ConfigurationError):
    """Raised when a step index falls outside the schedule."""

    def __init__(self, index: int, limit: int):
        super().__init__(
            message=f"Step index out of range: {index}",
            details=f"valid range is [0, {limit})",
        )


class InvalidDistributionError(ConfigurationError):
    """Raised when a data distribution spec is invalid."""
    pass


class InvalidInjectorError(ConfigurationError):
    """Raised when a noise injector spec is invalid or lacks a step row."""
    pass


class ShapeMismatchError(ConfigurationError):
    """Raised when array shapes or channel layouts disagree."""

    def __init__(self, what: str, expected: object, actual: object):
        super().__init__(
            message=f"Shape mismatch for {what}",
            details=f"expected {expected}, got {actual}",
        )


class InconsistentRunError(ConfigurationError):
    """Raised when family, factors and schedule of a sampler run disagree."""
    pass


class MissingCalibrationError(ConfigurationError):
    """Raised when a correction mode is requested without calibration data."""

    def __init__(self, mode: str):
        super().__init__(
            message=f"Mode '{mode}' requires a calibration table",
            details="run 'calibrate' first and pass --table",
        )


# -----------------------------------------------------------------------------
# Artifact Errors (exit code 3)
# -----------------------------------------------------------------------------

class ArtifactError(DriftLabError):
    """Base exception for artifact IO failures."""

    exit_code = 3


class ArtifactNotFoundError(ArtifactError):
    """Raised when an expected artifact file does not exist."""

    def __init__(self, path: str):
        super().__init__(message=f"Artifact not found: {path}")


class ArtifactFormatError(ArtifactError):
    """Raised when an artifact file violates its pinned format."""

    def __init__(self, path: str, reason: str):
        super().__init__(
            message=f"Malformed artifact: {path}",
            details=reason,
        )


# -----------------------------------------------------------------------------
# Numerical Errors (exit code 4)
# -----------------------------------------------------------------------------

class NumericalError(DriftLabError):
    """Base exception for numerical failures."""

    exit_code = 4


class NonFiniteValueError(NumericalError):
    """Raised when an input or intermediate contains NaN or infinity."""

    def __init__(self, what: str):
        super().__init__(
            message=f"Non-finite values in {what}",
        )


class DegenerateStepError(NumericalError):
    """Raised when a solver step has a zero log-SNR increment or zero denominator."""
    pass


class InsufficientSamplesError(NumericalError):
    """Raised when too few samples are available for an estimate."""

    def __init__(self, what: str, required: int, available: int):
        super().__init__(
            message=f"Insufficient samples for {what}",
            details=f"need {required}, have {available}",
        )
