"""Exception types shared across the package.

The CLI maps each family onto its own exit code.
"""


class ConfigError(ValueError):
    """Invalid experiment or attack configuration."""


class DataError(ValueError):
    """Unreadable, malformed or degenerate input data."""


class InputShapeError(ValueError):
    """Batch shape does not match what the model expects."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one was required."""

    def __init__(self, message, *, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class CheckpointError(ValueError):
    """Checkpoint is truncated, tampered with, or from another format version."""
