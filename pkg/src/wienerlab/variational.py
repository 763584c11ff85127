"""Both sides of the variational formula for ``log E[exp F(B)]``.

The left side is estimated by Monte Carlo (log-mean-exp) or, for small
``d * m``, by tensor Gauss-Hermite quadrature. The right side is the control
objective ``E[F(B^v)] - 1/2 E sum |v_k|^2 dt_k`` for a given drift policy,
evaluated on a caller-supplied Brownian batch so that different policies can
be compared on common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgument, NumericFailure, Unsupported
from .functionals import CylinderFunctional, TruncationSpec, evaluate, truncate
from .gaussian import mark_marginal_kl
from .paths import (
    DriftPolicy,
    EstimatorReport,
    PathBatch,
    PathInput,
    ZeroPolicy,
    _action_samples,
    check_horizon,
    per_path,
    simulate,
)
from .quadrature import composite_gaussian_1d, covariance_sqrt, gaussian_rule

MAX_QUADRATURE_DIM = 3


@dataclass(frozen=True)
class GapReport:
    lhs: EstimatorReport
    rhs: EstimatorReport
    gap: float
    gap_se: float

    @classmethod
    def build(cls, lhs: EstimatorReport, rhs: EstimatorReport) -> "GapReport":
        return cls(lhs, rhs, lhs.value - rhs.value, math.hypot(lhs.std_error, rhs.std_error))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# left side
# --------------------------------------------------------------------------


def log_mean_exp(values: np.ndarray, seed: int | None = None, method: str = "mc_lhs") -> EstimatorReport:
    """``log mean exp(values)`` with a delta-method standard error."""
    values = np.asarray(values, dtype=float)
    if np.all(np.isnan(values) | (values == -np.inf)):
        raise NumericFailure("every functional value is -inf or NaN")
    if np.isnan(values).any():
        raise NumericFailure(f"{int(np.isnan(values).sum())} functional values are NaN")
    top = values.max()
    if top == np.inf:
        return EstimatorReport(math.inf, math.inf, values.size, seed, method)
    w = np.exp(values - top)
    m = w.mean()
    n = values.size
    se = float(w.std(ddof=1) / (math.sqrt(n) * m)) if n > 1 else 0.0
    return EstimatorReport(float(top + math.log(m)), se, n, seed, method)


def estimate_lhs(F: CylinderFunctional, paths: PathInput) -> EstimatorReport:
    vals = per_path(paths, lambda c: evaluate(F, c))
    return log_mean_exp(vals, paths.seed)


def mark_quadrature(F: CylinderFunctional, order: int | None = None):
    """Quadrature nodes for the mark vector ``(B_{t_1}, ..., B_{t_m})``.

    Returns ``(x, rule)`` with ``x`` of shape ``(points, m, d)``.
    """
    dim = F.n_marks * F.dim
    if dim > MAX_QUADRATURE_DIM:
        raise Unsupported(f"quadrature needs d*m <= {MAX_QUADRATURE_DIM}, got {dim}")
    rule = gaussian_rule(dim, 64 if order is None else order)
    t = np.asarray(F.marks)
    cov = np.kron(np.minimum.outer(t, t), np.eye(F.dim))
    x = rule.nodes @ covariance_sqrt(cov).T
    return x.reshape(-1, F.n_marks, F.dim), rule


def estimate_lhs_quadrature(F: CylinderFunctional, order: int | None = None) -> EstimatorReport:
    """Deterministic ``log E[exp F(B)]`` by tensor Gauss-Hermite (order 64).

    One-dimensional functionals with known kinks use a composite
    Gauss-Legendre rule split at the kinks instead, since Gauss-Hermite loses
    its spectral accuracy there.
    """
    if not F.a1_holds:
        raise NumericFailure(f"exp(F) is not integrable for {F.name!r}")
    if F.kinks and F.dim * F.n_marks == 1:
        x, logw = composite_gaussian_1d(math.sqrt(F.last_mark), F.kinks)
        value = float(logsumexp(F(x[:, None, None]) + logw))
        method = "composite_legendre"
    else:
        x, rule = mark_quadrature(F, order)
        value = float(rule.log_expect_exp(F(x)))
        method = f"gauss_hermite_{rule.order}"
    if not math.isfinite(value):
        raise NumericFailure(f"quadrature of exp(F) is not finite for {F.name!r}")
    return EstimatorReport.exact(value, method)


# --------------------------------------------------------------------------
# right side
# --------------------------------------------------------------------------


def rhs_samples(F: CylinderFunctional, policy: DriftPolicy, base: PathBatch) -> np.ndarray:
    x, drifts = simulate(base, policy)
    drifted = PathBatch(base.grid, x, base.seed, "drifted")
    return evaluate(F, drifted) - 0.5 * _action_samples(drifts, base.grid.dt)


def estimate_rhs(F: CylinderFunctional, policy: DriftPolicy, base: PathInput) -> EstimatorReport:
    for m in F.marks:
        base.grid.index_of(m)
    check_horizon(policy, base.grid)
    samples = per_path(base, lambda c: rhs_samples(F, policy, c))
    if not np.all(np.isfinite(samples)):
        raise NumericFailure(f"non-finite control objective under policy {policy.name!r}")
    return EstimatorReport.from_samples(samples, base.seed, "mc_rhs")


def duality_gap(
    F: CylinderFunctional,
    policy: DriftPolicy,
    base: PathInput,
    lhs: EstimatorReport | None = None,
) -> GapReport:
    """``lhs - rhs``; non-negative in expectation for every admissible policy.

    ``lhs`` defaults to the Monte Carlo estimate on ``base``; pass a
    quadrature report to remove its noise from the gap.
    """
    if lhs is None:
        lhs = estimate_lhs(F, base)
    return GapReport.build(lhs, estimate_rhs(F, policy, base))


@dataclass(frozen=True)
class DVReport:
    dv_value: float
    dv_se: float
    mean_f: EstimatorReport
    entropy: float
    entropy_method: str
    lhs: EstimatorReport
    slack: float
    slack_se: float

    def to_dict(self) -> dict:
        return asdict(self)


def dv_bound(
    F: CylinderFunctional,
    policy: DriftPolicy,
    base: PathInput,
    lhs: EstimatorReport | None = None,
) -> DVReport:
    """Evaluate ``E[F(B^v)] - H`` for the law of the drifted path.

    For affine (Gaussian-law) policies ``H`` is the exact relative entropy of
    the drifted law at the marks of ``F``, which is all a cylinder functional
    sees. Otherwise ``H`` is replaced by its upper bound ``1/2 E sum |v|^2 dt``
    and the reported value is conservative.
    """
    check_horizon(policy, base.grid)
    if lhs is None:
        lhs = estimate_lhs(F, base)

    def one(chunk):
        x, drifts = simulate(chunk, policy)
        fx = evaluate(F, PathBatch(chunk.grid, x, chunk.seed, "drifted"))
        return np.stack([fx, _action_samples(drifts, chunk.grid.dt)], axis=1)

    samples = per_path(base, one)
    mean_f = EstimatorReport.from_samples(samples[:, 0], base.seed, "mc_mean_f")
    if policy.is_gaussian_family:
        h = mark_marginal_kl(policy, base.grid, F.marks, F.dim)
        method = "gaussian_marginal"
        dv = mean_f.value - h
        dv_se = mean_f.std_error
    else:
        half = EstimatorReport.from_samples(samples[:, 0] - 0.5 * samples[:, 1], base.seed, "mc")
        h = 0.5 * float(samples[:, 1].mean())
        method = "bound_only"
        dv, dv_se = half.value, half.std_error
    return DVReport(
        dv_value=dv,
        dv_se=dv_se,
        mean_f=mean_f,
        entropy=h,
        entropy_method=method,
        lhs=lhs,
        slack=lhs.value - dv,
        slack_se=math.hypot(lhs.std_error, dv_se),
    )


# --------------------------------------------------------------------------
# truncation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    upper: float
    lower: float
    lhs: float
    lhs_se: float
    rhs: float | None
    rhs_se: float | None


def truncation_sweep(
    F: CylinderFunctional,
    specs: Sequence[TruncationSpec],
    base: PathInput | None = None,
    reference_policy: DriftPolicy | None = None,
    method: str = "quadrature",
) -> list[SweepRow]:
    """Tabulate both sides of the formula for ``(F ^ M) v (-N)`` over ``specs``.

    ``specs`` must be ordered by non-decreasing ``M`` and ``N``. The left side
    uses quadrature (``method="quadrature"``) or Monte Carlo on ``base``; the
    right side is evaluated under ``reference_policy`` on ``base`` when a base
    batch is given.
    """
    for a, b in zip(specs, specs[1:]):
        if b.upper < a.upper or b.lower < a.lower:
            raise InvalidArgument("truncation specs must be ordered by increasing M and N")
    if method not in ("quadrature", "mc"):
        raise InvalidArgument(f"unknown method {method!r}")
    if method == "mc" and base is None:
        raise InvalidArgument("Monte Carlo sweep needs a base batch")
    if reference_policy is None:
        reference_policy = F.optimal_policy() if F.optimal_policy else ZeroPolicy()
    rows = []
    for spec in specs:
        G = truncate(F, spec)
        lhs = estimate_lhs_quadrature(G) if method == "quadrature" else estimate_lhs(G, base)
        rhs = estimate_rhs(G, reference_policy, base) if base is not None else None
        rows.append(
            SweepRow(
                upper=spec.upper,
                lower=spec.lower,
                lhs=lhs.value,
                lhs_se=lhs.std_error,
                rhs=None if rhs is None else rhs.value,
                rhs_se=None if rhs is None else rhs.std_error,
            )
        )
    return rows
