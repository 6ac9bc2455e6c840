"""Exception types shared across the package."""


class TailnasError(Exception):
    """Base class for all package errors."""


class ShapeError(TailnasError):
    """Operand shapes are incompatible with the requested operation."""


class UnknownPrimitiveError(TailnasError):
    """A primitive name is not in the dispatch table."""


class StructureError(TailnasError):
    """An operation cannot be built with the requested channel geometry."""


class ConfigError(TailnasError):
    """An experiment config failed strict parsing."""


class SearchAborted(TailnasError):
    """The search loop hit a non-finite loss and wrote a diagnostic snapshot."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class SplitWarning(UserWarning):
    """A stratified split left a class without samples in one half."""
