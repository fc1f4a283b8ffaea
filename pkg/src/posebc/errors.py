"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError / UsageError -> 1,
DataFormatError (and subclasses) -> 2, NumericError -> 3.
"""


class PoseBCError(Exception):
    """Base class for all package errors."""


class ConfigError(PoseBCError, ValueError):
    """Invalid configuration value or inconsistent component wiring."""


class UsageError(PoseBCError, ValueError):
    """Operation called with unusable inputs (empty batch, mode mismatch, ...)."""


class DimensionError(PoseBCError, ValueError):
    """Array shape or length does not match the declared contract."""


class DataFormatError(PoseBCError, ValueError):
    """On-disk data is malformed or inconsistent."""


class CheckpointMagicError(DataFormatError):
    """Checkpoint file does not start with the expected magic bytes."""


class CheckpointVersionError(DataFormatError):
    """Checkpoint format version is not supported."""


class CheckpointChecksumError(DataFormatError):
    """Checkpoint CRC mismatch (truncated or corrupted file)."""


class NumericError(PoseBCError, ArithmeticError):
    """Non-finite value encountered where finite math is required."""
