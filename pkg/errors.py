"""
Exception hierarchy for the self-gradient lab.

Validation failures subclass ValueError so callers can keep catching the
builtin; everything raised on purpose derives from SGNetError.
"""

from __future__ import annotations

from typing import Any, Optional


class SGNetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ContractError(SGNetError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are inconsistent for an op-kind."""


class GraphLookupError(SGNetError, KeyError):
    """A leaf or node was requested that the graph does not contain."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "graph lookup failed"


class NumericError(SGNetError, ArithmeticError):
    """A non-finite value was produced or supplied."""


class DataFormatError(ContractError):
    """Dataset bytes do not follow the expected layout."""


class LabelRangeError(DataFormatError):
    def __init__(self, message: str, record: int):
        super().__init__(message)
        self.record = record


class CheckpointError(SGNetError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class DivergenceError(SGNetError):
    """Training produced a non-finite loss.

    ``last_good`` holds the checkpoint taken at the end of the last epoch that
    finished cleanly (or the initial parameters when the first epoch failed).
    """

    def __init__(self, message: str, last_good: Optional[Any] = None, epoch: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
