"""Shared exception types."""


class SdqlError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(SdqlError, ValueError):
    """A configuration value violates its contract."""


class ShapeError(SdqlError, ValueError):
    """Array dimensions do not match what an operation requires."""


class NumericError(SdqlError, ArithmeticError):
    """A numeric result is non-finite or an update was refused."""


class StagedStructureError(SdqlError, RuntimeError):
    """The stage index changed in a way the staged model forbids."""


class InvalidBatchError(SdqlError, ValueError):
    """A training batch violates the single-stage or shape contract."""


class CheckpointError(SdqlError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""
