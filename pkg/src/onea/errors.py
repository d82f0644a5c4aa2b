"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError and ShapeError are user
errors (exit 2), NumericError and its subclasses are numeric failures
(exit 3), FormatError and plain OSError are I/O failures (exit 4).
"""


class OneaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OneaError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(OneaError):
    """A configuration value, CLI flag, or metadata field is invalid."""


class FormatError(OneaError):
    """A serialized container is malformed; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericError(OneaError):
    """A numeric routine failed (non-convergence, NaN, zero norm)."""


class DegenerateBaseError(NumericError):
    """The base matrix of an alignment has no usable singular directions."""


class TrainingError(NumericError):
    """Training diverged; the message echoes seed and config for replay."""
