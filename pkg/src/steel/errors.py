"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``steel.cli``).
"""

from __future__ import annotations


class SteelError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SteelError, ValueError):
    pass


class NumericError(SteelError, ArithmeticError):
    """Non-finite input or a computation that produced NaN/inf."""


class FormatError(SteelError):
    """File has the wrong magic number or an unsupported version."""


class CorruptionError(SteelError):
    """File is truncated or its header disagrees with its payload."""


class TrainingFailure(NumericError):
    """Training diverged. ``last_state`` holds the last finite parameters."""

    def __init__(self, message: str, last_state=None, task_id=None):
        super().__init__(message)
        self.last_state = last_state
        self.task_id = task_id


class DegenerateZoo(SteelError, ValueError):
    pass


class ConfigError(SteelError):
    pass


class ArtifactError(SteelError):
    """A required artifact (zoo, checkpoint, hypothesis set) is missing or unreadable."""
