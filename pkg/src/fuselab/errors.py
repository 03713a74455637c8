"""Exception types shared across fuselab."""


class FuselabError(Exception):
    """Base class for all fuselab errors."""


class DimensionError(FuselabError, ValueError):
    """Operand extents do not agree (channel counts, inner dimensions)."""


class ShapeError(FuselabError, ValueError):
    """A shape violates an op contract (element counts, odd extents)."""


class ConfigError(FuselabError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(FuselabError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(FuselabError, FloatingPointError):
    """NaN or Inf produced or supplied where finite values are required."""


class FormatError(FuselabError, ValueError):
    """Malformed binary container; carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricUndefinedError(FuselabError, ValueError):
    """A quality index cannot be evaluated on the given data."""


class TrainingAborted(FuselabError, RuntimeError):
    """Training stopped on a non-finite loss or gradient."""
