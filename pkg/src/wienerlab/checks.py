"""Pass/fail comparisons that can be recomputed from their stored numbers."""

from __future__ import annotations

import math
import operator
from dataclasses import asdict, dataclass
from typing import Iterable

_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt}


@dataclass(frozen=True)
class Check:
    """``value op bound``; ``passed`` is derived, never stored independently."""

    name: str
    value: float
    op: str
    bound: float
    note: str = ""

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown comparison {self.op!r}")

    @property
    def passed(self) -> bool:
        v, b = float(self.value), float(self.bound)
        if math.isnan(v) or math.isnan(b):
            return False
        return bool(_OPS[self.op](v, b))

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    @classmethod
    def from_dict(cls, d: dict) -> "Check":
        return cls(d["name"], d["value"], d["op"], d["bound"], d.get("note", ""))

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.6g} {self.op} {self.bound:.6g}"


def within(name: str, value: float, target: float, tol: float, note: str = "") -> Check:
    """``|value - target| <= tol``."""
    return Check(name, abs(value - target), "<=", tol, note)


def all_passed(checks: Iterable[Check]) -> bool:
    return all(c.passed for c in checks)


def recompute(check_dicts: Iterable[dict]) -> bool:
    """Overall verdict from serialized checks, ignoring any stored ``passed`` flags."""
    return all(Check.from_dict(d).passed for d in check_dicts)
