"""Föllmer drift for cylinder functionals and the entropy checks built on it.

For ``F(w) = f(w(t_1), ..., w(t_m))`` the drift at time ``t`` and state ``x``
is the gradient in ``x`` of ``log E[exp f(past, x + G)]``, where ``past`` are
the already observed marks and ``G`` is the Brownian increment vector to the
remaining marks. Driving Brownian motion with it produces paths whose law has
density ``exp(F) / E[exp F]`` with respect to Wiener measure.

Two equivalent forms are implemented: the ratio form
``E[e^f grad f] / E[e^f]`` (needs a gradient) and the score form
``E[e^f S] / E[e^f]`` with ``S`` the Gaussian score of the increment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgument, NumericFailure, Unsupported
from .functionals import CylinderFunctional, evaluate
from .gaussian import brownian_mark_cov, gaussian_kl, mark_marginal_kl
from .paths import (
    DriftPolicy,
    EstimatorReport,
    PathBatch,
    PathInput,
    _TIME_ATOL,
    _log_weight,
    action_norm_sq,
    per_path,
    simulate,
)
from .quadrature import gaussian_rule
from .variational import estimate_lhs_quadrature, mark_quadrature

INNER_MC_DRAWS = 10_000
INNER_MC_SEED = 20_240_601
NEAR_TERMINAL = 1e-8
_MAX_BLOCK_POINTS = 1 << 20


@dataclass(frozen=True)
class RelEntropyResult:
    value: float
    method: str  # gaussian_closed_form | tilt_identity | action_identity | bound_only

    @property
    def is_bound(self) -> bool:
        return self.method == "bound_only"


# --------------------------------------------------------------------------
# inner expectation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _InnerRule:
    """Standard Gaussian nodes ``z`` of shape (Q, n_future, d) with log weights."""

    z: np.ndarray
    log_w: np.ndarray
    kind: str

    @classmethod
    def build(cls, n_future: int, dim: int, order: int | None, inner_mc: int | None) -> "_InnerRule":
        k = n_future * dim
        if inner_mc is None and k <= 3:
            rule = gaussian_rule(k, order if order is not None else (64 if k == 1 else 32))
            return cls(rule.nodes.reshape(-1, n_future, dim), rule.log_weights, f"gauss_hermite_{rule.order}")
        draws = INNER_MC_DRAWS if inner_mc is None else int(inner_mc)
        rng = np.random.default_rng(INNER_MC_SEED)
        z = rng.standard_normal((draws, n_future, dim))
        return cls(z, np.full(draws, -math.log(draws)), f"inner_mc_{draws}")


def _future_chol(marks_future: np.ndarray, t: float) -> np.ndarray:
    c = np.minimum.outer(marks_future, marks_future) - t
    return np.linalg.cholesky(c)


def _drift_from_state(
    F: CylinderFunctional,
    t: float,
    x: np.ndarray,
    past: np.ndarray,
    form: str,
    inner: _InnerRule,
) -> np.ndarray:
    """Drift for a batch: ``x`` is (n, d), ``past`` is (n, p, d) observed marks."""
    n, d = x.shape
    marks = np.asarray(F.marks)
    p = past.shape[1]
    future = marks[p:]
    nf = future.size
    lc = _future_chol(future, t)
    # increments to future marks: G[:, j] = sum_i L[j, i] z[:, i]
    g = np.einsum("ji,qid->qjd", lc, inner.z)
    if form == "score":
        # Gaussian score of the increment, summed over future marks
        score = np.einsum("i,qid->qd", np.linalg.solve(lc, np.ones(nf)), inner.z)
    q = g.shape[0]
    out = np.empty((n, d))
    block = max(1, _MAX_BLOCK_POINTS // q)
    for s in range(0, n, block):
        xs = x[s : s + block]
        b = xs.shape[0]
        y = np.empty((b, q, F.n_marks, d))
        y[:, :, :p] = past[s : s + block, None]
        y[:, :, p:] = xs[:, None, None, :] + g[None]
        flat = y.reshape(b * q, F.n_marks, d)
        logits = F(flat).reshape(b, q) + inner.log_w
        if not np.all(np.isfinite(logits)):
            raise NumericFailure(f"non-finite integrand in the Föllmer drift of {F.name!r} at t={t}")
        probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        if form == "ratio":
            grad = F.gradient(flat).reshape(b, q, F.n_marks, d)[:, :, p:].sum(axis=2)
            out[s : s + block] = np.einsum("bq,bqd->bd", probs, grad)
        else:
            out[s : s + block] = probs @ score
    return out


def _check_integrable(F: CylinderFunctional, t: float) -> None:
    if not F.a1_holds:
        raise NumericFailure(f"exp(F) is not integrable for {F.name!r}")
    if F.growth is not None and 2 * F.growth * (F.last_mark - t) >= 1:
        raise NumericFailure(
            f"inner expectation of exp(f) diverges for {F.name!r} at t={t}: "
            f"2 * {F.growth} * {F.last_mark - t} >= 1"
        )


def _resolve_form(F: CylinderFunctional, form: str) -> str:
    if form == "auto":
        return "ratio" if F.grad_f is not None else "score"
    if form not in ("ratio", "score"):
        raise InvalidArgument(f"unknown drift form {form!r}")
    if form == "ratio" and F.grad_f is None:
        raise InvalidArgument(f"ratio form needs a gradient for {F.name!r}")
    return form


def follmer_drift(
    F: CylinderFunctional,
    t: float,
    x,
    past=None,
    form: str = "auto",
    order: int | None = None,
    inner_mc: int | None = None,
) -> np.ndarray:
    """Föllmer drift ``u(t, x)`` of ``F``.

    ``x`` is a point (d,) or a batch (n, d). ``past`` holds the values at the
    marks already passed (``t_j <= t``) with shape (p, d) or (n, p, d). The
    drift vanishes for ``t >= t_m``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    n, d = xb.shape
    if d != F.dim:
        raise InvalidArgument(f"state has dimension {d}, functional {F.dim}")
    if t >= F.last_mark - _TIME_ATOL:
        out = np.zeros((n, d))
        return out[0] if single else out
    p = int(np.searchsorted(F.marks, t + _TIME_ATOL))
    if past is None:
        past = np.zeros((p, d))
    past = np.asarray(past, dtype=float)
    if past.ndim == 2:
        past = np.broadcast_to(past, (n, *past.shape))
    if past.shape[1] != p:
        raise InvalidArgument(f"expected {p} past mark values at t={t}, got {past.shape[1]}")
    _check_integrable(F, t)
    form = _resolve_form(F, form)
    out = _drift(F, t, xb, past, form, order, inner_mc)
    if not np.all(np.isfinite(out)):
        raise NumericFailure(f"non-finite Föllmer drift for {F.name!r} at t={t}")
    return out[0] if single else out


def _drift(F, t, x, past, form, order, inner_mc, inner=None):
    p = past.shape[1]
    nf = F.n_marks - p
    if nf == 1 and F.marks[-1] - t < NEAR_TERMINAL and F.grad_f is not None:
        # sigma -> 0: the smoothed log-density is f itself
        y = np.concatenate([past, x[:, None, :]], axis=1)
        return F.gradient(y)[:, -1]
    if inner is None:
        inner = _InnerRule.build(nf, F.dim, order, inner_mc)
    return _drift_from_state(F, t, x, past, form, inner)


@dataclass(eq=False)
class FollmerPolicy(DriftPolicy):
    """Drift policy driving Brownian motion to the law ``exp(F) dW / E[exp F]``.

    Zero from the last mark on; ``sup_bound`` is set from the functional's
    a priori drift bound when it has one.
    """

    functional: CylinderFunctional = None
    form: str = "auto"
    order: int | None = None
    inner_mc: int | None = None
    name: str = "follmer"

    def __post_init__(self):
        F = self.functional
        self.cutoff = F.last_mark
        self.sup_bound = F.follmer_bound
        self.form = _resolve_form(F, self.form)
        self._inner = {}

    def _rule_for(self, n_future: int) -> _InnerRule:
        if n_future not in self._inner:
            self._inner[n_future] = _InnerRule.build(n_future, self.functional.dim, self.order, self.inner_mc)
        return self._inner[n_future]

    def rule(self, times, history):
        F = self.functional
        t = float(times[-1])
        p = int(np.searchsorted(F.marks, t + _TIME_ATOL))
        idx = [int(np.argmin(np.abs(times - m))) for m in F.marks[:p]]
        past = history[:, idx, :]
        inner = self._rule_for(F.n_marks - p)
        return _drift(F, t, history[:, -1], past, self.form, self.order, self.inner_mc, inner)


def follmer_policy(F: CylinderFunctional, form: str = "auto", order: int | None = None,
                   inner_mc: int | None = None) -> FollmerPolicy:
    if F.n_marks > 1 and F.n_marks * F.dim > 2:
        raise Unsupported("multi-mark Föllmer drift is implemented for m * d <= 2 only")
    _check_integrable(F, 0.0)
    return FollmerPolicy(functional=F, form=form, order=order, inner_mc=inner_mc)


# --------------------------------------------------------------------------
# entropy
# --------------------------------------------------------------------------


def gaussian_target(F: CylinderFunctional):
    """Mean and covariance of the terminal law tilted by ``exp(f)``, when Gaussian."""
    if F.n_marks != 1 or F.name not in ("linear", "quadratic", "zero"):
        return None
    t, d = F.last_mark, F.dim
    if F.name == "linear":
        return np.full(d, F.params["a"] * t), t * np.eye(d)
    if F.name == "zero":
        return np.zeros(d), t * np.eye(d)
    c = F.params["c"]
    if 2 * c * t >= 1:
        return None
    return np.zeros(d), t / (1 - 2 * c * t) * np.eye(d)


def target_entropy(F: CylinderFunctional) -> RelEntropyResult:
    """Relative entropy of ``exp(F) dW / E[exp F]`` with respect to Wiener measure.

    The density depends on the mark values only, so the path-space entropy
    equals that of the mark marginal: ``E_mu[F] - log E[exp F]``.
    """
    target = gaussian_target(F)
    if target is not None:
        mean, cov = target
        ref = brownian_mark_cov(F.marks, F.dim)
        return RelEntropyResult(gaussian_kl(mean, cov, np.zeros_like(mean), ref), "gaussian_closed_form")
    if not F.a1_holds:
        raise NumericFailure(f"exp(F) is not integrable for {F.name!r}")
    x, rule = mark_quadrature(F)
    fx = F(x)
    logits = fx + rule.log_weights
    probs = np.exp(logits - logsumexp(logits))
    value = float(probs @ fx - estimate_lhs_quadrature(F).value)
    return RelEntropyResult(max(value, 0.0), "tilt_identity")


@dataclass(frozen=True)
class EntropyIdentityReport:
    entropy: RelEntropyResult
    half_action: EstimatorReport
    diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.diff) <= self.tolerance


def entropy_identity_check(
    F: CylinderFunctional,
    base: PathInput,
    allowance: float = 0.01,
    policy: FollmerPolicy | None = None,
) -> EntropyIdentityReport:
    """Compare ``H(mu | W)`` with half the action of the Föllmer drift.

    Passes when the difference is within three standard errors plus the
    discretisation ``allowance``.
    """
    if F.n_marks != 1:
        raise Unsupported("entropy identity check is for single-mark functionals")
    policy = policy or follmer_policy(F)
    h = target_entropy(F)
    action = action_norm_sq(policy, base)
    half = EstimatorReport(0.5 * action.value, 0.5 * action.std_error, action.n_samples, action.seed, "mc_half_action")
    return EntropyIdentityReport(h, half, h.value - half.value, 3 * half.std_error + allowance)


@dataclass(frozen=True)
class EntropyBoundReport:
    entropy: RelEntropyResult
    half_action: EstimatorReport
    slack: float

    @property
    def passed(self) -> bool:
        return self.slack >= -3 * self.half_action.std_error


def entropy_bound_check(policy: DriftPolicy, base: PathInput, marks=None) -> EntropyBoundReport:
    """Check ``H(law of B^v at marks | W) <= 1/2 E sum |v|^2 dt``.

    The left side is the exact relative entropy of the Euler-drifted chain at
    ``marks`` (default: the horizon), available in closed form for affine
    drifts; it lower-bounds the path-space entropy.
    """
    if not policy.is_gaussian_family:
        raise Unsupported(f"policy {policy.name!r} is not in the affine Gaussian family")
    grid = base.grid
    marks = (grid.horizon,) if marks is None else tuple(marks)
    d = base.dim
    h = RelEntropyResult(mark_marginal_kl(policy, grid, marks, d), "gaussian_closed_form")
    action = action_norm_sq(policy, base)
    half = EstimatorReport(0.5 * action.value, 0.5 * action.std_error, action.n_samples, action.seed, "mc_half_action")
    return EntropyBoundReport(h, half, half.value - h.value)


# --------------------------------------------------------------------------
# importance sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroVarianceReport:
    mean_plain: float
    var_plain: float
    mean_is: float
    var_is: float
    ratio: float
    n_samples: int


def zero_variance_check(
    F: CylinderFunctional,
    base: PathInput,
    policy: DriftPolicy | None = None,
) -> ZeroVarianceReport:
    """Variance of ``exp F`` under plain Monte Carlo versus importance sampling.

    The importance-sampling estimator is ``exp(F(X) + log_weight)`` with ``X``
    driven by the Föllmer drift, which has zero variance in continuous time.
    """
    policy = policy or follmer_policy(F)

    def one(chunk: PathBatch) -> np.ndarray:
        x, drifts = simulate(chunk, policy)
        plain = np.exp(evaluate(F, chunk))
        fx = evaluate(F, PathBatch(chunk.grid, x, chunk.seed, "drifted"))
        return np.stack([plain, np.exp(fx + _log_weight(chunk, drifts))], axis=1)

    s = per_path(base, one)
    var_plain = float(s[:, 0].var(ddof=1))
    var_is = float(s[:, 1].var(ddof=1))
    if var_plain == 0.0:
        ratio = 0.0 if var_is == 0.0 else math.inf
    else:
        ratio = var_is / var_plain
    return ZeroVarianceReport(
        float(s[:, 0].mean()), var_plain, float(s[:, 1].mean()), var_is, ratio, s.shape[0]
    )
