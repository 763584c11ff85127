"""Ornstein-Uhlenbeck semigroup on (R^d, gamma) and the inequalities around it.

Everything deterministic here is done with tensor Gauss-Hermite rules: the
semigroup ``(Q_t f)(x) = E f(e^{-t} x + sqrt(1 - e^{-2t}) Y)``, the exponential
hypercontractivity norms, and the log-Sobolev integrals. The conditional form
of hypercontractivity is checked by Monte Carlo over Brownian paths with the
inner conditional expectation done by quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidArgument, NumericFailure, Unsupported
from .functionals import CylinderFunctional
from .paths import EstimatorReport, PathBatch, PathInput, TimeGrid, make_grid, per_path, refine_grid
from .quadrature import GaussianQuadrature, gaussian_rule
from .variational import log_mean_exp


@dataclass(frozen=True, eq=False)
class ScalarField:
    """``f: R^d -> R`` evaluated on arrays of shape (..., d)."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    b_holds: bool = True  # e^f and f integrable under gamma

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x) -> np.ndarray:
        if self.grad is None:
            raise Unsupported(f"{self.name!r} has no gradient")
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)

    def check_b(self, quad: GaussianQuadrature | None = None) -> tuple[bool, bool]:
        """Quadrature screen for integrability of ``e^f`` and ``f`` under gamma."""
        quad = quad or gaussian_rule(self.dim)
        v = self(quad.nodes)
        exp_ok = bool(np.isfinite(quad.log_expect_exp(v)))
        abs_ok = bool(np.isfinite(quad.expect(np.abs(v))))
        return exp_ok, abs_ok


def _sum_last(x):
    return x.sum(axis=-1)


def linear_field(a: float = 1.0, d: int = 1) -> ScalarField:
    return ScalarField(f"linear:a={a}", lambda x: a * _sum_last(x), d, lambda x: np.full_like(x, a))


def constant_field(c: float = 0.5, d: int = 1) -> ScalarField:
    return ScalarField(f"constant:c={c}", lambda x: np.full(x.shape[:-1], c), d, np.zeros_like)


def sine_field() -> ScalarField:
    return ScalarField("sin", lambda x: np.sin(x[..., 0]), 1, np.cos)


def quadratic_field(c: float = 0.25) -> ScalarField:
    return ScalarField(f"quadratic:c={c}", lambda x: c * _sum_last(x * x), 1, lambda x: 2 * c * x)


def exponential_field(a: float = 1.0) -> ScalarField:
    return ScalarField(f"exp:a={a}", lambda x: np.exp(a * x[..., 0]), 1, lambda x: a * np.exp(a * x), b_holds=False)


def shifted_sine_field(b: float = 0.5) -> ScalarField:
    return ScalarField(f"one_plus_sin:b={b}", lambda x: 1 + b * np.sin(x[..., 0]), 1, lambda x: b * np.cos(x))


def mixed_2d_field() -> ScalarField:
    def f(x):
        return np.sin(x[..., 0]) + 0.3 * x[..., 0] * x[..., 1]

    def grad(x):
        return np.stack([np.cos(x[..., 0]) + 0.3 * x[..., 1], 0.3 * x[..., 0]], axis=-1)

    return ScalarField("mixed_2d", f, 2, grad)


FIELDS: dict[str, Callable[..., ScalarField]] = {
    "linear": linear_field,
    "constant": constant_field,
    "sin": sine_field,
    "quadratic": quadratic_field,
    "exp": exponential_field,
    "one_plus_sin": shifted_sine_field,
    "mixed_2d": mixed_2d_field,
}


def parse_field(spec: str) -> ScalarField:
    name, _, rest = spec.partition(":")
    if name not in FIELDS:
        raise InvalidArgument(f"unknown field {name!r}; known: {sorted(FIELDS)}")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        kwargs[k.strip()] = int(v) if k.strip() == "d" else float(v)
    return FIELDS[name](**kwargs)


def field_from_functional(F: CylinderFunctional) -> ScalarField:
    """Terminal-mark catalog functional at ``t = 1`` viewed as a field on R^d."""
    if F.n_marks != 1 or abs(F.last_mark - 1.0) > 1e-12:
        raise InvalidArgument("only single-mark functionals at t = 1 define a field")
    grad = None if F.grad_f is None else (lambda x: F.gradient(x.reshape(-1, 1, F.dim)).reshape(x.shape))
    return ScalarField(F.name, lambda x: F(x.reshape(-1, 1, F.dim)).reshape(x.shape[:-1]), F.dim, grad)


def _quad(f: ScalarField, quad: GaussianQuadrature | None) -> GaussianQuadrature:
    quad = quad or gaussian_rule(f.dim)
    if quad.dim != f.dim:
        raise InvalidArgument(f"quadrature dimension {quad.dim} != field dimension {f.dim}")
    return quad


# --------------------------------------------------------------------------
# semigroup
# --------------------------------------------------------------------------


def ou_apply(f: ScalarField, t: float, x, quad: GaussianQuadrature | None = None) -> np.ndarray:
    """``(Q_t f)(x)`` for ``x`` of shape (d,) or (n, d)."""
    if t < 0:
        raise InvalidArgument(f"t must be >= 0, got {t}")
    quad = _quad(f, quad)
    x = np.asarray(x, dtype=float)
    if t == 0:
        return f(x)
    a, s = math.exp(-t), math.sqrt(-math.expm1(-2 * t))
    pts = a * x[..., None, :] + s * quad.nodes
    return quad.expect(f(pts))


def log_gaussian_mgf(g: Callable[[np.ndarray], np.ndarray], quad: GaussianQuadrature) -> float:
    """``log E exp g(Y)`` for standard Gaussian ``Y``, with the rule recentred at the mode.

    Uses ``E e^{g(Y)} = E e^{g(Y + m) - m.Y - |m|^2/2}`` with ``m`` maximising
    ``g(y) - |y|^2/2``, so integrands whose mass sits far outside the nodes
    (large exponents in hypercontractivity norms) stay accurate.
    """

    def neg(y):
        v = float(g(y[None, :])[0]) - 0.5 * float(y @ y)
        return -v if math.isfinite(v) else math.inf

    m = minimize(neg, np.zeros(quad.dim), method="BFGS").x
    if not np.all(np.isfinite(m)):
        m = np.zeros(quad.dim)
    y = quad.nodes
    return float(quad.log_expect_exp(g(y + m) - y @ m - 0.5 * float(m @ m)))


@dataclass(frozen=True)
class InequalityReport:
    lhs: float
    rhs: float
    deficit: float  # rhs - lhs

    def holds(self, tol: float = 1e-9) -> bool:
        return self.deficit >= -tol


def ehc_check(f: ScalarField, t: float, quad: GaussianQuadrature | None = None) -> InequalityReport:
    """``||exp(Q_t f)||_{L^p(gamma)}`` with ``p = e^{2t}`` against ``||e^f||_{L^1(gamma)}``.

    Computed in log space: ``log lhs = e^{-2t} log E exp(p Q_t f)``, each
    Gaussian integral on a rule recentred at the integrand's mode.
    """
    if t < 0:
        raise InvalidArgument(f"t must be >= 0, got {t}")
    quad = _quad(f, quad)
    if not f.b_holds:
        raise NumericFailure(f"{f.name!r} is tagged as having exp(f) or f outside L1(gamma)")
    log_rhs = log_gaussian_mgf(f, quad)
    p = math.exp(2 * t)
    log_lhs = log_gaussian_mgf(lambda y: p * ou_apply(f, t, y, quad), quad) / p
    if not (math.isfinite(log_lhs) and math.isfinite(log_rhs)):
        raise NumericFailure(f"non-finite hypercontractivity norms for {f.name!r}; exp(f) is not integrable")
    try:
        lhs, rhs = math.exp(log_lhs), math.exp(log_rhs)
    except OverflowError as exc:
        raise NumericFailure(f"hypercontractivity norms overflow for {f.name!r}") from exc
    return InequalityReport(lhs, rhs, rhs - lhs)


def conditional_g(f: ScalarField, t: float, x, quad: GaussianQuadrature | None = None) -> np.ndarray:
    """``g(t, x) = E f(x + B_1 - B_t) = E f(x + sqrt(1 - t) Y)``, ``0 <= t <= 1``."""
    if not 0 <= t <= 1:
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    quad = _quad(f, quad)
    x = np.asarray(x, dtype=float)
    if t == 1:
        return f(x)
    return quad.expect(f(x[..., None, :] + math.sqrt(1 - t) * quad.nodes))


def rehc_grid(t: float, steps: int = 4) -> TimeGrid:
    """Grid on [0, 1] with marks ``{t, 1}`` that also contains ``t * s`` for its own nodes."""
    base = make_grid(1.0, steps, sorted({t, 1.0}))
    return refine_grid(base, [t * s for s in base.nodes])


@dataclass(frozen=True)
class RehcReport:
    lhs: EstimatorReport
    rhs: EstimatorReport
    slack: float
    slack_se: float
    lhs_quadrature: float
    rhs_quadrature: float

    @property
    def passed(self) -> bool:
        return self.slack >= -3 * self.slack_se


def rehc_check(f: ScalarField, t: float, base: PathInput, quad: GaussianQuadrature | None = None) -> RehcReport:
    """``t log E exp(g(t, B_t) / t) <= log E exp f(B_1)`` by Monte Carlo over ``base``.

    Quadrature values of both sides are reported alongside for reference.
    """
    if not 0 < t <= 1:
        raise InvalidArgument(f"t must lie in (0, 1], got {t}")
    quad = _quad(f, quad)
    grid = base.grid
    grid.index_of(t)
    grid.index_of(1.0)

    def one(chunk: PathBatch) -> np.ndarray:
        bt, b1 = chunk.at(t), chunk.at(1.0)
        return np.stack([conditional_g(f, t, bt, quad) / t, f(b1)], axis=1)

    s = per_path(base, one)
    inner = log_mean_exp(s[:, 0], base.seed)
    lhs = EstimatorReport(t * inner.value, t * inner.std_error, inner.n_samples, base.seed, "mc_rehc_lhs")
    rhs = log_mean_exp(s[:, 1], base.seed)
    lhs_q = t * float(quad.log_expect_exp(conditional_g(f, t, math.sqrt(t) * quad.nodes, quad) / t))
    rhs_q = float(quad.log_expect_exp(f(quad.nodes)))
    return RehcReport(lhs, rhs, rhs.value - lhs.value, math.hypot(lhs.std_error, rhs.std_error), lhs_q, rhs_q)


def rescale_path(base: PathBatch, t: float, nodes=None) -> PathBatch:
    """Brownian rescaling ``W_s = B_{t s} / sqrt(t)`` on ``[0, 1]``.

    ``nodes`` are the output times ``s``; by default every node ``s`` of the
    base grid for which ``t * s`` is also a node. Grids from :func:`rehc_grid`
    contain the coarse nodes and their ``t``-multiples, so the default keeps
    at least the coarse grid.
    """
    if not 0 < t <= 1:
        raise InvalidArgument(f"t must lie in (0, 1], got {t}")
    grid = base.grid
    if abs(grid.horizon - 1.0) > 1e-12:
        raise InvalidArgument("rescaling is defined for paths on [0, 1]")
    if nodes is None:
        nodes = [s for s in grid.nodes if grid.has_node(t * s)]
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size < 2 or abs(nodes[-1] - 1.0) > 1e-12:
        raise InvalidArgument(f"rescaled grid must end at s = 1 (is t={t} a node?)")
    try:
        idx = [grid.index_of(t * s) for s in nodes]
    except InvalidArgument as exc:
        raise InvalidArgument(f"grid does not contain t * s for the requested nodes (t={t})") from exc
    out = TimeGrid(nodes, (nodes.size - 1,))
    return PathBatch(out, base.values[:, idx, :] / math.sqrt(t), base.seed, base.kind)


def lsi_check(f: ScalarField, quad: GaussianQuadrature | None = None) -> InequalityReport:
    """``int f^2 log|f| dgamma <= ||grad f||^2 + ||f||^2 log ||f||`` (norms in L^2(gamma))."""
    if f.grad is None:
        raise Unsupported(f"log-Sobolev check needs a gradient for {f.name!r}")
    quad = _quad(f, quad)
    v = f(quad.nodes)
    g = f.gradient(quad.nodes).reshape(v.shape + (-1,))
    a = np.abs(v)
    ent = np.where(a > 0, a * a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    lhs = float(quad.expect(ent))
    norm_sq = float(quad.expect(v * v))
    grad_sq = float(quad.expect((g * g).sum(axis=-1)))
    rhs = grad_sq + (0.5 * norm_sq * math.log(norm_sq) if norm_sq > 0 else 0.0)
    return InequalityReport(lhs, rhs, rhs - lhs)
