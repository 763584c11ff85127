"""Exception types shared across the package."""

from __future__ import annotations


class WienerLabError(Exception):
    """Base class for all package errors."""


class InvalidArgument(WienerLabError, ValueError):
    pass


class ContractViolation(WienerLabError, ValueError):
    """A documented precondition between two objects does not hold."""


class Unsupported(WienerLabError, NotImplementedError):
    pass


class NumericFailure(WienerLabError, ArithmeticError):
    """A computation produced non-finite values.

    ``node`` carries the time-grid index where the failure was detected, when
    there is one.
    """

    def __init__(self, message: str, node: int | None = None):
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.node = node
