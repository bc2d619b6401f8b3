"""Exception hierarchy shared across the toolkit.

The CLI maps each family onto an exit code: usage errors -> 1, data errors
-> 2, numeric failures -> 3.
"""


class RbfsntError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RbfsntError, ValueError):
    pass


class NonFiniteError(RbfsntError, FloatingPointError):
    pass


class StateError(RbfsntError, RuntimeError):
    """Backward called without a matching forward, or on a stale trace."""


class ConfigError(RbfsntError, ValueError):
    pass


class DataError(RbfsntError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class InfeasiblePackingError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class DivergenceError(NonFiniteError):
    """Training loss became non-finite; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
