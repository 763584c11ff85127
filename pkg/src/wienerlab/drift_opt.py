"""Parametric drift families and stochastic ascent on the control objective.

The objective for parameters ``theta`` is

    J(theta) = E[ F(X) - 1/2 sum_k |v_k|^2 dt_k ],   X = Euler path under v_theta,

which lower-bounds ``log E[exp F(B)]`` for every ``theta``. Gradients are
pathwise: a backward (adjoint) sweep through the Euler recursion on a fixed
Brownian batch. Functionals without a gradient fall back to simultaneous
perturbation (SPSA) on common random numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .functionals import CylinderFunctional, evaluate, mark_values
from .paths import (
    BrownianSource,
    DriftPolicy,
    EstimatorReport,
    PathBatch,
    PathInput,
    TimeGrid,
    _TIME_ATOL,
    make_grid,
    sample_brownian,
)
from .variational import GapReport, duality_gap, estimate_lhs, estimate_lhs_quadrature, estimate_rhs

FAMILY_KINDS = ("constant", "piecewise_constant_open_loop", "linear_feedback", "grid_feedback")


def derive_seed(seed: int, *path: int) -> int:
    """Independent 63-bit seed for a labelled sub-stream of ``seed``."""
    state = np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class PolicyFamily:
    """Finite-dimensional family of drifts on ``[0, horizon]``.

    Time-dependent coefficients are piecewise constant on ``pieces`` equal
    sub-intervals. ``grid_feedback`` (one dimension) interpolates a table over
    ``pieces + 1`` time knots and ``x_knots`` state knots in
    ``[-x_max, x_max]``. ``clamp`` bounds every drift vector radially.
    """

    kind: str
    horizon: float = 1.0
    dim: int = 1
    pieces: int = 10
    clamp: float | None = None
    x_knots: int = 21
    x_max: float = 4.0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise InvalidArgument(f"unknown family {self.kind!r}; known: {FAMILY_KINDS}")
        if self.kind == "grid_feedback" and self.dim != 1:
            raise InvalidArgument("grid_feedback is one-dimensional")
        if self.pieces < 1:
            raise InvalidArgument("need at least one piece")

    @property
    def n_params(self) -> int:
        d, p = self.dim, self.pieces
        return {
            "constant": d,
            "piecewise_constant_open_loop": p * d,
            "linear_feedback": p * (d * d + d),
            "grid_feedback": (p + 1) * self.x_knots,
        }[self.kind]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def piece(self, t: float) -> int:
        return min(int(t / self.horizon * self.pieces + 1e-12), self.pieces - 1)

    def _linear_parts(self, theta):
        d, p = self.dim, self.pieces
        a = theta[: p * d * d].reshape(p, d, d)
        b = theta[p * d * d :].reshape(p, d)
        return a, b

    def raw_drift(self, theta: np.ndarray, t: float, x: np.ndarray, jac: bool = False):
        """Unclamped drift at ``(t, x)``; with ``jac`` also ``dv/dx`` and ``dv/dtheta``.

        Shapes: ``v`` (n, d), ``dv/dx`` (n, d, d) or None when it vanishes,
        ``dv/dtheta`` (n, d, n_params).
        """
        n, d = x.shape
        P = self.n_params
        if self.kind == "constant":
            v = np.broadcast_to(theta, (n, d))
            if not jac:
                return v
            jt = np.broadcast_to(np.eye(d), (n, d, d))
            return v, None, jt
        if self.kind == "piecewise_constant_open_loop":
            k = self.piece(t)
            v = np.broadcast_to(theta[k * d : (k + 1) * d], (n, d))
            if not jac:
                return v
            jt = np.zeros((n, d, P))
            jt[:, :, k * d : (k + 1) * d] = np.eye(d)
            return v, None, jt
        if self.kind == "linear_feedback":
            k = self.piece(t)
            a, b = self._linear_parts(theta)
            v = x @ a[k].T + b[k]
            if not jac:
                return v
            jt = np.zeros((n, d, P))
            off = k * d * d
            for i in range(d):
                jt[:, i, off + i * d : off + (i + 1) * d] = x
            boff = self.pieces * d * d + k * d
            jt[:, :, boff : boff + d] = np.eye(d)
            return v, np.broadcast_to(a[k], (n, d, d)), jt
        return self._grid_drift(theta, t, x, jac)

    def _grid_drift(self, theta, t, x, jac):
        nt, nx = self.pieces + 1, self.x_knots
        table = theta.reshape(nt, nx)
        s = min(max(t / self.horizon, 0.0), 1.0) * self.pieces
        i = min(int(s), self.pieces - 1)
        alpha = s - i
        dx = 2 * self.x_max / (nx - 1)
        xc = np.clip(x[:, 0], -self.x_max, self.x_max)
        u = (xc + self.x_max) / dx
        j = np.minimum(u.astype(int), nx - 2)
        beta = u - j
        t00, t01 = table[i, j], table[i, j + 1]
        t10, t11 = table[i + 1, j], table[i + 1, j + 1]
        v = ((1 - alpha) * ((1 - beta) * t00 + beta * t01) + alpha * ((1 - beta) * t10 + beta * t11))[:, None]
        if not jac:
            return v
        inside = (x[:, 0] > -self.x_max) & (x[:, 0] < self.x_max)
        slope = ((1 - alpha) * (t01 - t00) + alpha * (t11 - t10)) / dx * inside
        n = x.shape[0]
        jt = np.zeros((n, 1, nt * nx))
        rows = np.arange(n)
        jt[rows, 0, i * nx + j] += (1 - alpha) * (1 - beta)
        jt[rows, 0, i * nx + j + 1] += (1 - alpha) * beta
        jt[rows, 0, (i + 1) * nx + j] += alpha * (1 - beta)
        jt[rows, 0, (i + 1) * nx + j + 1] += alpha * beta
        return v, slope[:, None, None], jt

    def drift(self, theta: np.ndarray, t: float, x: np.ndarray, jac: bool = False):
        """Drift with the clamp applied (and its Jacobians, chained)."""
        if t >= self.horizon - _TIME_ATOL:
            n, d = x.shape
            z = np.zeros((n, d))
            return z if not jac else (z, None, np.zeros((n, d, self.n_params)))
        out = self.raw_drift(theta, t, x, jac)
        if self.clamp is None:
            return out
        v, jx, jt = out if jac else (out, None, None)
        norm = np.linalg.norm(v, axis=1)
        over = norm > self.clamp
        if not over.any():
            return out
        scale = np.where(over, self.clamp / np.maximum(norm, 1e-300), 1.0)
        vc = v * scale[:, None]
        if not jac:
            return vc
        d = v.shape[1]
        unit = v / np.maximum(norm, 1e-300)[:, None]
        proj = np.where(over[:, None, None], np.eye(d) - unit[:, :, None] * unit[:, None, :], np.eye(d))
        proj = proj * scale[:, None, None]
        jx = None if jx is None else np.einsum("nij,njk->nik", proj, jx)
        jt = np.einsum("nij,njk->nik", proj, jt)
        return vc, jx, jt

    def policy(self, theta) -> "FamilyPolicy":
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidArgument(f"expected {self.n_params} parameters, got shape {theta.shape}")
        theta.flags.writeable = False
        return FamilyPolicy(family=self, theta=theta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class FamilyPolicy(DriftPolicy):
    family: PolicyFamily = None
    theta: np.ndarray = None
    name: str = "family"

    def __post_init__(self):
        self.name = self.family.kind
        self.sup_bound = self.family.clamp
        self.cutoff = self.family.horizon

    def rule(self, times, history):
        return self.family.raw_drift(self.theta, float(times[-1]), history[:, -1])

    def affine(self, t, dim):
        fam = self.family
        if fam.kind == "grid_feedback":
            return None
        d = fam.dim
        v0 = fam.raw_drift(self.theta, t, np.zeros((1, d)))[0]
        if fam.kind == "linear_feedback":
            a, _ = fam._linear_parts(self.theta)
            return a[fam.piece(t)].copy(), v0
        return np.zeros((d, d)), v0.copy()

    def describe(self):
        return {**super().describe(), "family": self.family.to_dict(), "theta": self.theta.tolist()}


# --------------------------------------------------------------------------
# objective and gradient
# --------------------------------------------------------------------------


def objective_and_gradient(F: CylinderFunctional, family: PolicyFamily, theta: np.ndarray, base: PathBatch):
    """Per-path objective samples and the pathwise gradient of their mean."""
    grid = base.grid
    b = base.values
    n, _, d = b.shape
    dt = grid.dt
    x = np.empty_like(b)
    x[:, 0] = b[:, 0]
    acc = np.zeros((n, d))
    action = np.zeros(n)
    for k in range(grid.steps):
        v = family.drift(theta, float(grid.nodes[k]), x[:, k])
        action += np.einsum("nd,nd->n", v, v) * dt[k]
        acc = acc + v * dt[k]
        x[:, k + 1] = b[:, k + 1] + acc
    drifted = PathBatch(grid, x, base.seed, "drifted")
    samples = evaluate(F, drifted) - 0.5 * action
    mark_idx = [grid.index_of(m) for m in F.marks]
    gmarks = F.gradient(mark_values(F, drifted))
    lam = np.zeros((n, d))
    grad = np.zeros(family.n_params)
    for k in range(grid.steps, 0, -1):
        for j, idx in enumerate(mark_idx):
            if idx == k:
                lam = lam + gmarks[:, j]
        v, jx, jt = family.drift(theta, float(grid.nodes[k - 1]), x[:, k - 1], jac=True)
        r = (lam - v) * dt[k - 1]
        grad += np.einsum("nd,ndp->p", r, jt) / n
        if jx is not None:
            lam = lam + np.einsum("nd,nde->ne", r, jx)
    return samples, grad


def objective_samples(F: CylinderFunctional, family: PolicyFamily, theta: np.ndarray, base: PathBatch) -> np.ndarray:
    grid = base.grid
    b = base.values
    n, _, d = b.shape
    dt = grid.dt
    x = np.empty_like(b)
    x[:, 0] = b[:, 0]
    acc = np.zeros((n, d))
    action = np.zeros(n)
    for k in range(grid.steps):
        v = family.drift(theta, float(grid.nodes[k]), x[:, k])
        action += np.einsum("nd,nd->n", v, v) * dt[k]
        acc = acc + v * dt[k]
        x[:, k + 1] = b[:, k + 1] + acc
    return evaluate(F, PathBatch(grid, x, base.seed, "drifted")) - 0.5 * action


def spsa_gradient(F, family, theta, base, rng, c: float = 0.05, repeats: int = 4):
    """Simultaneous-perturbation gradient on common random numbers.

    Biased by O(c^2) for smooth objectives; the only option when ``F`` has no
    gradient.
    """
    grad = np.zeros_like(theta)
    for _ in range(repeats):
        delta = rng.choice([-1.0, 1.0], size=theta.size)
        up = objective_samples(F, family, theta + c * delta, base).mean()
        down = objective_samples(F, family, theta - c * delta, base).mean()
        grad += (up - down) / (2 * c) * delta
    return grad / repeats


# --------------------------------------------------------------------------
# ascent loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OptConfig:
    iters: int = 200
    batch: int = 2048
    steps: int = 200
    lr: float = 0.05
    decay: float = 0.995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    heldout: int = 20000
    eval_every: int = 10
    spsa_c: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptTrace:
    config: dict
    family: dict
    seeds: dict
    iterations: list = field(default_factory=list)
    final_theta: list | None = None
    best_theta: list | None = None
    best_heldout: float | None = None
    best_heldout_se: float | None = None
    initial_heldout: float | None = None
    gradient: str = "pathwise"

    def to_jsonl(self) -> str:
        head = {k: v for k, v in asdict(self).items() if k != "iterations"}
        lines = [json.dumps({"header": head})]
        lines += [json.dumps(r) for r in self.iterations]
        return "\n".join(lines) + "\n"


class OptimizationDiverged(NumericFailure):
    def __init__(self, message: str, trace: OptTrace, node: int | None = None):
        super().__init__(message, node)
        self.trace = trace


def optimize(F: CylinderFunctional, family: PolicyFamily, config: OptConfig = OptConfig()):
    """Maximise the control objective of ``F`` over ``family``.

    Starts from the zero drift, runs Adam with geometric step decay on fresh
    training batches, and returns the parameters with the best objective on a
    held-out batch whose seed is disjoint from all training seeds.
    """
    if F.last_mark > family.horizon + _TIME_ATOL:
        raise InvalidArgument(f"functional marks {F.marks} extend beyond family horizon {family.horizon}")
    if F.dim != family.dim:
        raise InvalidArgument(f"functional is {F.dim}-dimensional, family {family.dim}")
    grid = make_grid(family.horizon, config.steps, F.marks)
    heldout_seed = derive_seed(config.seed, 2)
    heldout = BrownianSource(grid, config.heldout, heldout_seed, family.dim)
    trace = OptTrace(
        config=config.to_dict(),
        family=family.to_dict(),
        seeds={"master": config.seed, "heldout": heldout_seed, "train": f"derive_seed({config.seed}, 1, iteration)"},
        gradient="pathwise" if F.grad_f is not None else "spsa",
    )
    spsa_rng = np.random.default_rng(derive_seed(config.seed, 3))

    def held(theta) -> EstimatorReport:
        return estimate_rhs(F, family.policy(theta), heldout)

    theta = family.zeros()
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    best = held(theta)
    best_theta = theta.copy()
    trace.initial_heldout = best.value
    for it in range(config.iters):
        base = sample_brownian(grid, config.batch, derive_seed(config.seed, 1, it), family.dim)
        try:
            if F.grad_f is not None:
                samples, grad = objective_and_gradient(F, family, theta, base)
            else:
                samples = objective_samples(F, family, theta, base)
                grad = spsa_gradient(F, family, theta, base, spsa_rng, config.spsa_c)
        except NumericFailure as exc:
            raise OptimizationDiverged(f"objective diverged at iteration {it}: {exc}", trace) from exc
        obj = float(samples.mean())
        if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
            raise OptimizationDiverged(f"objective diverged at iteration {it}", trace)
        step = config.lr * config.decay**it
        m = config.beta1 * m + (1 - config.beta1) * grad
        s = config.beta2 * s + (1 - config.beta2) * grad * grad
        mhat = m / (1 - config.beta1 ** (it + 1))
        shat = s / (1 - config.beta2 ** (it + 1))
        theta = theta + step * mhat / (np.sqrt(shat) + config.eps)
        record = {"iteration": it, "objective": obj, "step": step, "grad_norm": float(np.linalg.norm(grad))}
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iters:
            try:
                h = held(theta)
            except NumericFailure as exc:
                raise OptimizationDiverged(f"held-out objective diverged at iteration {it}: {exc}", trace) from exc
            record["heldout"] = h.value
            if h.value > best.value:
                best, best_theta = h, theta.copy()
        trace.iterations.append(record)
    trace.final_theta = theta.tolist()
    trace.best_theta = best_theta.tolist()
    trace.best_heldout = best.value
    trace.best_heldout_se = best.std_error
    return family.policy(best_theta), trace


# --------------------------------------------------------------------------
# oracle comparison
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleComparison:
    policy_gap: GapReport
    oracle_gap: GapReport | None
    lhs_method: str


def reference_lhs(F: CylinderFunctional, base: PathInput | None = None) -> EstimatorReport:
    """Best available value of ``log E[exp F(B)]``: closed form, quadrature, then MC."""
    if F.log_mgf is not None:
        return EstimatorReport.exact(F.log_mgf, "closed_form")
    try:
        return estimate_lhs_quadrature(F)
    except NumericFailure:
        raise
    except Exception:
        if base is None:
            raise
        return estimate_lhs(F, base)


def compare_to_oracle(F: CylinderFunctional, policy: DriftPolicy, base: PathInput) -> OracleComparison:
    lhs = reference_lhs(F, base)
    gap = duality_gap(F, policy, base, lhs=lhs)
    oracle = None
    if F.optimal_policy is not None:
        oracle = duality_gap(F, F.optimal_policy(), base, lhs=lhs)
    return OracleComparison(gap, oracle, lhs.method)
