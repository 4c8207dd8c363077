"""
Exception hierarchy for the DP-Fair toolkit.

Library code raises these with a diagnostic message; flows log them and
re-raise; the command line maps them onto exit codes.
"""

from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3


class DPFairError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(DPFairError):
    """Invalid or inconsistent configuration."""


class DataError(DPFairError):
    """Ingestion, split or negative sampling cannot proceed."""


class ModelError(DPFairError):
    """Parameter shapes or indices do not match the declared scorer."""


class PrivacyError(DPFairError):
    """Accountant or calibration failure."""


class MetricsError(DPFairError):
    """A metric aggregate is undefined (e.g. an empty user group)."""


class SolverError(DPFairError):
    """Re-ranking instance is malformed or the search exceeded its limits."""


class TrainingDivergedError(DPFairError):
    """Loss or update became non-finite during training."""

    def __init__(self, message: str, step: int, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class StageError(DPFairError):
    """A pipeline stage failed; wraps the original error with the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the command-line exit code."""
    if isinstance(error, StageError) and isinstance(error.cause, ConfigError):
        return EXIT_CONFIG_ERROR
    if isinstance(error, ConfigError):
        return EXIT_CONFIG_ERROR
    return EXIT_STAGE_FAILURE
