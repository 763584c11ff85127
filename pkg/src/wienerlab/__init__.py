"""Numerical laboratory for the variational representation of Wiener functionals."""

from __future__ import annotations

from .errors import ContractViolation, InvalidArgument, NumericFailure, Unsupported, WienerLabError

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "InvalidArgument",
    "NumericFailure",
    "Unsupported",
    "WienerLabError",
    "__version__",
]
