"""Acceptance suite: numbered criteria, each a list of recomputable checks.

Every criterion uses fixed seeds and finishes in well under a minute on one
core; criterion 2 includes a policy optimisation (about 15 s).
"""

from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functionals as fn
from . import ou_gaussian as ou
from .checks import Check, all_passed, within
from .drift_opt import OptConfig, PolicyFamily, optimize
from .follmer import entropy_identity_check, entropy_bound_check, zero_variance_check
from .gaussian import gaussian_kl
from .paths import BrownianSource, ConstantPolicy, PathBatch, _action_samples, make_grid, ou_feedback, sample_brownian, simulate
from .variational import GapReport, estimate_lhs, estimate_lhs_quadrature, estimate_rhs, truncation_sweep


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: list[Check]
    details: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all_passed(self.checks)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d}: {self.title} ({self.elapsed:.1f}s)"

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "title": self.title,
            "passed": self.passed,
            "elapsed": self.elapsed,
            "checks": [c.to_dict() for c in self.checks],
            "details": self.details,
        }


def linear_case() -> tuple[list[Check], dict]:
    checks, details = [], {}
    grid = make_grid(1.0, 10, (1.0,))
    for k, a in enumerate((0.5, 1.0)):
        F = fn.linear_terminal(a)
        src = BrownianSource(grid, 10**6, 101 + k)
        lhs = estimate_lhs(F, src)
        rhs = estimate_rhs(F, F.optimal_policy(), src)
        gap = GapReport.build(lhs, rhs)
        target = a * a / 2
        checks += [
            within(f"a={a} lhs vs a^2/2", lhs.value, target, 3 * lhs.std_error),
            within(f"a={a} rhs vs a^2/2", rhs.value, target, 3 * rhs.std_error),
            within(f"a={a} |gap|", gap.gap, 0.0, 3 * gap.gap_se),
        ]
        details[f"a={a}"] = gap.to_dict()
    return checks, details


def quadratic_case() -> tuple[list[Check], dict]:
    F = fn.quadratic_terminal(0.25)
    exact = -0.5 * math.log(0.5)
    lhs = estimate_lhs_quadrature(F)
    checks = [within("quadrature lhs", lhs.value, exact, 1e-9)]

    t0 = time.perf_counter()
    family = PolicyFamily("linear_feedback", pieces=10)
    _, trace = optimize(F, family, OptConfig(steps=200, iters=200, seed=5))
    opt_seconds = time.perf_counter() - t0
    checks += [
        Check("optimised rhs - (lhs - 0.01)", trace.best_heldout - (lhs.value - 0.01), ">=", 0.0),
        Check("optimisation seconds", opt_seconds, "<=", 300.0),
    ]

    src = BrownianSource(make_grid(1.0, 400, F.marks), 100_000, 11)
    gap = GapReport.build(lhs, estimate_rhs(F, F.optimal_policy(), src))
    checks.append(Check("oracle gap", gap.gap, "<=", 0.005 + 3 * gap.gap_se))
    details = {
        "lhs": lhs.value,
        "optimised_heldout": trace.best_heldout,
        "optimised_heldout_se": trace.best_heldout_se,
        "best_theta": trace.best_theta,
        "oracle_gap": gap.to_dict(),
    }
    return checks, details


def random_policies(n: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    kinds = ("constant", "piecewise_constant_open_loop", "linear_feedback", "grid_feedback")
    out = []
    for _ in range(n):
        family = PolicyFamily(
            str(rng.choice(kinds)), pieces=int(rng.integers(1, 6)), clamp=float(rng.uniform(0.5, 3.0))
        )
        out.append(family.policy(rng.normal(0.0, 1.5, family.n_params)))
    return out


def weak_duality(n_policies: int = 200, n_paths: int = 2000, steps: int = 20) -> tuple[list[Check], dict]:
    """``lhs - rhs >= -3 se`` for random clamped policies against exact left sides."""
    cases = {name: F for name, F in fn.catalog().items() if F.a1_holds}
    lhs = {name: estimate_lhs_quadrature(F).value for name, F in cases.items()}
    marks = sorted({m for F in cases.values() for m in F.marks})
    base = sample_brownian(make_grid(1.0, steps, marks), n_paths, 31)
    worst, worst_case, violations = math.inf, None, 0
    for i, policy in enumerate(random_policies(n_policies, 37)):
        x, drifts = simulate(base, policy)
        drifted = PathBatch(base.grid, x, base.seed, "drifted")
        half_action = 0.5 * _action_samples(drifts, base.grid.dt)
        for name, F in cases.items():
            s = fn.evaluate(F, drifted) - half_action
            se = float(s.std(ddof=1) / math.sqrt(s.size))
            margin = lhs[name] - float(s.mean()) + 3 * se
            violations += margin < 0
            if margin < worst:
                worst, worst_case = margin, (i, name)
    checks = [
        Check("violations", violations, "<=", 0),
        Check("min(gap + 3 se)", worst, ">=", 0.0),
    ]
    return checks, {"functionals": sorted(cases), "cases": n_policies * len(cases), "tightest": worst_case}


def entropy_identity() -> tuple[list[Check], dict]:
    grid = make_grid(1.0, 400, (1.0,))
    checks, details = [], {}
    for F, n, target in ((fn.linear_terminal(1.0), 20_000, 0.5), (fn.quadratic_terminal(0.25), 10_000, 0.153426)):
        rep = entropy_identity_check(F, BrownianSource(grid, n, 41), allowance=0.01)
        checks += [
            within(f"{F.name} H closed form", rep.entropy.value, target, 1e-6),
            within(f"{F.name} |H - action/2|", rep.diff, 0.0, rep.tolerance),
        ]
        details[F.name] = {"H": rep.entropy.value, "half_action": rep.half_action.value,
                           "se": rep.half_action.std_error, "diff": rep.diff}
    return checks, details


def entropy_bound() -> tuple[list[Check], dict]:
    grid = make_grid(1.0, 400, (1.0,))
    quad_oracle = fn.quadratic_terminal(0.25).optimal_policy()
    policies = {
        "constant 1": ConstantPolicy(1.0, cutoff=1.0),
        "constant -0.7": ConstantPolicy(-0.7, cutoff=1.0),
        "ou feedback": ou_feedback(1.0, cutoff=1.0),
        "quadratic oracle feedback": quad_oracle,
    }
    checks, details = [], {}
    for label, policy in policies.items():
        rep = entropy_bound_check(policy, BrownianSource(grid, 20_000, 53))
        checks.append(Check(f"{label} slack", rep.slack, ">=", -3 * rep.half_action.std_error))
        details[label] = {"kl": rep.entropy.value, "half_action": rep.half_action.value, "slack": rep.slack}
    var = (1 - math.exp(-2)) / 2
    details["ou feedback"]["continuum_kl"] = gaussian_kl(np.zeros(1), np.eye(1) * var, np.zeros(1), np.eye(1))
    return checks, details


def zero_variance() -> tuple[list[Check], dict]:
    F = fn.linear_terminal(1.0)
    rep = zero_variance_check(F, BrownianSource(make_grid(1.0, 400, (1.0,)), 10_000, 61))
    checks = [Check("variance ratio", rep.ratio, "<=", 1e-3)]
    return checks, {"var_plain": rep.var_plain, "var_is": rep.var_is, "mean_is": rep.mean_is}


def truncation() -> tuple[list[Check], dict]:
    levels = (1, 2, 4, 8, 16, 64)
    Fq = fn.quadratic_terminal(0.25)
    upper = truncation_sweep(Fq, [fn.TruncationSpec(upper=m) for m in levels])
    Fl = fn.linear_terminal(1.0)
    lower = truncation_sweep(Fl, [fn.TruncationSpec(lower=n) for n in (1, 2, 4, 8, 16, 32, 64)])
    up = [r.lhs for r in upper]
    lo = [r.lhs for r in lower]
    checks = [
        Check("quadratic: min increment", min(np.diff(up)), ">", 0.0),
        within("quadratic: M=64 vs limit", up[-1], Fq.log_mgf, 1e-6),
        Check("linear: max increment", max(np.diff(lo)), "<=", 0.0),
        within("linear: N=64 vs limit", lo[-1], Fl.log_mgf, 1e-6),
    ]
    return checks, {"upper_levels": list(levels), "upper_lhs": up, "lower_lhs": lo}


def ehc_fields() -> list[ou.ScalarField]:
    return [
        ou.linear_field(),
        ou.constant_field(0.5),
        ou.sine_field(),
        ou.quadratic_field(0.25),
        ou.shifted_sine_field(0.5),
        ou.mixed_2d_field(),
    ]


def hypercontractivity() -> tuple[list[Check], dict]:
    ts = np.geomspace(0.05, 3.0, 8)
    worst, lin_err = math.inf, 0.0
    for f in ehc_fields():
        for t in ts:
            rep = ou.ehc_check(f, float(t))
            worst = min(worst, rep.deficit)
            if f.name.startswith("linear"):
                lin_err = max(lin_err, abs(rep.deficit), abs(rep.lhs - math.exp(0.5)), abs(rep.rhs - math.exp(0.5)))
    checks = [Check("min deficit", worst, ">=", -1e-9), Check("linear equality error", lin_err, "<=", 1e-8)]
    return checks, {"t": ts.tolist(), "fields": [f.name for f in ehc_fields()]}


def conditional_hypercontractivity(n: int = 100_000) -> tuple[list[Check], dict]:
    fields = [ou.linear_field(), ou.constant_field(0.5), ou.sine_field(), ou.quadratic_field(0.25),
              ou.shifted_sine_field(0.5)]
    checks, details = [], {}
    for t in (0.25, 0.5, 0.75, 1.0):
        base = BrownianSource(ou.rehc_grid(t), n, 71)
        for f in fields:
            rep = ou.rehc_check(f, t, base)
            checks.append(Check(f"t={t} {f.name} slack", rep.slack, ">=", -3 * rep.slack_se))
            if f.name.startswith("linear"):
                checks.append(within(f"t={t} linear equality", rep.slack, 0.0, 3 * rep.slack_se))
            details[f"t={t} {f.name}"] = {"lhs": rep.lhs.value, "rhs": rep.rhs.value, "slack": rep.slack,
                                          "se": rep.slack_se}
    return checks, details


def log_sobolev() -> tuple[list[Check], dict]:
    fields = [ou.sine_field(), ou.quadratic_field(0.25), ou.shifted_sine_field(0.5), ou.mixed_2d_field(),
              ou.linear_field(), ou.constant_field(1.0)]
    deficits = {f.name: ou.lsi_check(f).deficit for f in fields}
    eq = ou.lsi_check(ou.exponential_field(1.0))
    target = 2 * math.e**2
    checks = [
        Check("min deficit", min(deficits.values()), ">=", -1e-9),
        within("exp: lhs vs 2e^2", eq.lhs, target, 1e-7),
        within("exp: rhs vs 2e^2", eq.rhs, target, 1e-7),
    ]
    return checks, {"deficits": deficits, "exp": {"lhs": eq.lhs, "rhs": eq.rhs}}


REPRO_RUNS = (
    ("lhs", {"functional": "quadratic:c=0.25", "n": 30_000, "steps": 10, "seed": 3}),
    ("gap", {"functional": "two_mark", "policy": "ou:rate=0.5", "n": 30_000, "steps": 20, "seed": 4}),
    ("follmer", {"functional": "bounded_smooth", "n": 2_000, "steps": 50, "seed": 5}),
    ("ou-rehc", {"field": "sin", "t": [0.5], "n": 20_000, "seed": 6}),
    ("optimize", {"functional": "linear", "family": "constant", "iters": 5, "batch": 512, "heldout": 2000,
                  "steps": 10, "seed": 7}),
)


def reproducibility() -> tuple[list[Check], dict]:
    """Persist run records, re-execute each from its file with more threads, compare results."""
    from .cli import load_config, run, write_record

    mismatched, details = [], {}
    with tempfile.TemporaryDirectory() as out:
        for sub, cfg in REPRO_RUNS:
            first = run(sub, {**cfg, "threads": 1})
            path = write_record(first, out)
            sub2, cfg2 = load_config(path)
            second = run(sub2, {**cfg2, "threads": 4})
            same = json.dumps(first["results"], sort_keys=True) == json.dumps(second["results"], sort_keys=True)
            details[sub] = {"record": path.name, "identical": same}
            if not same:
                mismatched.append(sub)
    return [Check("runs with differing results", len(mismatched), "<=", 0)], details


CRITERIA: dict[int, tuple[str, Callable[[], tuple[list[Check], dict]]]] = {
    1: ("formula equality, linear case", linear_case),
    2: ("formula equality, quadratic case", quadratic_case),
    3: ("weak duality over random clamped policies", weak_duality),
    4: ("Föllmer entropy identity", entropy_identity),
    5: ("marginal entropy bound", entropy_bound),
    6: ("zero-variance importance sampling", zero_variance),
    7: ("truncation monotone convergence", truncation),
    8: ("exponential hypercontractivity", hypercontractivity),
    9: ("conditional-form hypercontractivity", conditional_hypercontractivity),
    10: ("Gaussian log-Sobolev inequality", log_sobolev),
    11: ("bitwise reproducibility across thread counts", reproducibility),
}


def run_criterion(number: int) -> CriterionResult:
    title, body = CRITERIA[number]
    t0 = time.perf_counter()
    checks, details = body()
    return CriterionResult(number, title, checks, details, time.perf_counter() - t0)


def run_all(numbers=None) -> list[CriterionResult]:
    return [run_criterion(k) for k in (numbers or sorted(CRITERIA))]
