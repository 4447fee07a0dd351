"""Exception types shared across the package."""


class FvlError(Exception):
    """Base class for package errors."""


class ConfigError(FvlError, ValueError):
    """Invalid configuration (bad ratios, empty slots, unknown keys...)."""


class DataError(FvlError, ValueError):
    """Malformed or inconsistent data (missing gold item, unknown label...)."""


class ShapeError(FvlError, ValueError):
    """Tensor shape or resolution does not match the configured model."""


class LengthError(FvlError, ValueError):
    """Sequence exceeds the position budget."""


class UsageError(FvlError, ValueError):
    """An operation was called in a way its contract forbids."""


class StateError(FvlError, RuntimeError):
    """An operation requires a different object state (e.g. frozen tokenizer)."""


class IntegrityError(FvlError, RuntimeError):
    """A persisted artifact fails validation (truncation, checksum mismatch)."""


class NumericError(FvlError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(FvlError, RuntimeError):
    """Training aborted (non-finite loss); last good checkpoint is kept."""
