"""Cylinder functionals ``F(w) = f(w(t_1), ..., w(t_m))`` and their catalog.

``f`` is vectorised: it takes an array of shape ``(batch, m, d)`` holding the
path values at the marks and returns ``(batch,)``. Catalog entries carry
closed-form oracles where one exists, plus the metadata the Föllmer and
optimisation code needs (growth rate, optimal drift, drift bound).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_ndtr

from .errors import InvalidArgument
from .paths import AffinePolicy, ConstantPolicy, DriftPolicy, PathBatch, ZeroPolicy

ArrayFn = Callable[[np.ndarray], np.ndarray]

INF = math.inf


@dataclass(frozen=True, eq=False)
class CylinderFunctional:
    name: str
    marks: tuple[float, ...]
    f: ArrayFn
    dim: int = 1
    grad_f: ArrayFn | None = None
    log_mgf: float | None = None
    optimal_policy: Callable[[], DriftPolicy] | None = None
    bounds: tuple[float, float] = (-INF, INF)
    a1_holds: bool = True
    # f(x) <= growth * |x|^2 + const; None when unknown.
    growth: float | None = None
    # a priori bound on the Föllmer drift, when f = log(phi) with inf phi > 0
    follmer_bound: float | None = None
    # locations of non-smooth points of f for one-dimensional functionals
    kinks: tuple[float, ...] = ()
    spec: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        marks = tuple(float(m) for m in self.marks)
        if not marks:
            raise InvalidArgument("a cylinder functional needs at least one mark")
        if marks[0] < 0 or any(b <= a for a, b in zip(marks, marks[1:])):
            raise InvalidArgument(f"marks must be increasing and >= 0: {marks}")
        object.__setattr__(self, "marks", marks)

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def last_mark(self) -> float:
        return self.marks[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.asarray(self.f(x), dtype=float)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.grad_f is None:
            raise InvalidArgument(f"functional {self.name!r} has no gradient")
        return np.asarray(self.grad_f(np.asarray(x, dtype=float)), dtype=float)


@dataclass(frozen=True)
class TruncationSpec:
    """Cap at ``upper`` and floor at ``-lower``: ``w -> (F(w) ^ M) v (-N)``."""

    upper: float = INF
    lower: float = INF

    def __post_init__(self):
        if not self.upper > -self.lower:
            raise InvalidArgument(f"need M > -N, got M={self.upper}, N={self.lower}")


def mark_values(F: CylinderFunctional, paths: PathBatch) -> np.ndarray:
    idx = [paths.grid.index_of(m) for m in F.marks]
    if paths.dim != F.dim:
        raise InvalidArgument(f"functional {F.name!r} is {F.dim}-dimensional, paths are {paths.dim}")
    return paths.values[:, idx, :]


def evaluate(F: CylinderFunctional, paths: PathBatch) -> np.ndarray:
    return F(mark_values(F, paths))


def truncate(F: CylinderFunctional, spec: TruncationSpec) -> CylinderFunctional:
    M, N = spec.upper, spec.lower
    lo, hi = F.bounds
    if M >= hi and -N <= lo:
        return F

    def f(x):
        return np.maximum(np.minimum(F.f(x), M), -N)

    kinks = F.kinks
    if F.dim * F.n_marks == 1:
        kinks = tuple(sorted(set(F.kinks) | set(_level_crossings(F, [M, -N]))))

    grad = None
    if F.grad_f is not None:

        def grad(x):
            v = F.f(x)
            inside = (v < M) & (v > -N)
            return F.grad_f(x) * inside[:, None, None]

    return replace(
        F,
        name=f"{F.name}^[{-N:g},{M:g}]",
        f=f,
        grad_f=grad,
        log_mgf=None,
        optimal_policy=None,
        bounds=(max(lo, -N), min(hi, M)),
        a1_holds=F.a1_holds or M < INF,
        growth=0.0 if M < INF else F.growth,
        follmer_bound=None,
        kinks=kinks,
        spec=f"{F.spec}|trunc:M={M},N={N}",
    )


def _level_crossings(F: CylinderFunctional, levels, half_width: float = 30.0, n: int = 60001):
    """Points where a one-dimensional ``f`` crosses any of ``levels``."""
    sigma = math.sqrt(F.last_mark) or 1.0
    x = np.linspace(-half_width * sigma, half_width * sigma, n)

    def g(z):
        return float(F(np.array([[[z]]]))[0])

    vals = F(x[:, None, None])
    out = []
    for level in levels:
        if not math.isfinite(level):
            continue
        diff = vals - level
        for i in np.nonzero(np.sign(diff[:-1]) * np.sign(diff[1:]) < 0)[0]:
            out.append(brentq(lambda z: g(z) - level, x[i], x[i + 1], xtol=1e-14))
        out.extend(x[diff == 0].tolist())
    return out


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------


def zero(t: float = 1.0, d: int = 1) -> CylinderFunctional:
    return CylinderFunctional(
        "zero",
        (t,),
        lambda x: np.zeros(x.shape[0]),
        dim=int(d),
        grad_f=np.zeros_like,
        log_mgf=0.0,
        optimal_policy=ZeroPolicy,
        bounds=(0.0, 0.0),
        growth=0.0,
        follmer_bound=0.0,
        spec=f"zero:t={t},d={d}",
        params={"t": t, "d": d},
    )


def linear_terminal(a: float = 1.0, t: float = 1.0, d: int = 1) -> CylinderFunctional:
    """``f(x) = a * sum_i x_i`` at time ``t``; optimal drift is the constant ``a``."""
    d = int(d)
    return CylinderFunctional(
        "linear",
        (t,),
        lambda x: a * x[:, 0].sum(axis=-1),
        dim=d,
        grad_f=lambda x: np.full_like(x, a),
        log_mgf=0.5 * d * a * a * t,
        optimal_policy=lambda: ConstantPolicy(np.full(d, a), cutoff=t, name=f"constant:{a:g}"),
        growth=0.0,
        spec=f"linear:a={a},t={t},d={d}",
        params={"a": a, "t": t, "d": d},
    )


def quadratic_terminal(c: float = 0.25, t: float = 1.0, d: int = 1, name: str = "quadratic") -> CylinderFunctional:
    """``f(x) = c |x|^2`` at time ``t``; exponentially integrable iff ``2 c t < 1``."""
    d = int(d)
    ok = 2 * c * t < 1
    log_mgf = -0.5 * d * math.log(1 - 2 * c * t) if ok else INF

    def optimal():
        return AffinePolicy(
            lambda s: (2 * c / (1 - 2 * c * (t - s)), 0.0),
            cutoff=t,
            name=f"quadratic_oracle:c={c:g}",
        )

    return CylinderFunctional(
        name,
        (t,),
        lambda x: c * np.einsum("nd,nd->n", x[:, 0], x[:, 0]),
        dim=d,
        grad_f=lambda x: 2 * c * x,
        log_mgf=log_mgf,
        optimal_policy=optimal if ok else None,
        bounds=(0.0, INF) if c >= 0 else (-INF, 0.0),
        a1_holds=ok,
        growth=max(c, 0.0),
        spec=f"{name}:c={c},t={t},d={d}",
        params={"c": c, "t": t, "d": d},
    )


def diverging(c: float = 0.6, t: float = 1.0) -> CylinderFunctional:
    """Quadratic with ``2 c t >= 1``: ``E exp(F(B))`` is infinite."""
    if 2 * c * t < 1:
        raise InvalidArgument(f"diverging entry needs 2*c*t >= 1, got c={c}, t={t}")
    return quadratic_terminal(c, t, name="diverging")


def two_mark(a1: float = 1.0, a2: float = 1.0, t1: float = 0.5, t2: float = 1.0) -> CylinderFunctional:
    """``f = a1 w(t1) + a2 w(t2)`` in one dimension."""
    log_mgf = 0.5 * (a1 * a1 * t1 + 2 * a1 * a2 * t1 + a2 * a2 * t2)

    def optimal():
        return AffinePolicy(
            lambda s: (0.0, a1 + a2 if s < t1 else a2),
            cutoff=t2,
            name="two_mark_oracle",
        )

    coef = np.array([a1, a2])
    return CylinderFunctional(
        "two_mark",
        (t1, t2),
        lambda x: x[:, :, 0] @ coef,
        grad_f=lambda x: np.broadcast_to(coef[None, :, None], x.shape).copy(),
        log_mgf=log_mgf,
        optimal_policy=optimal,
        growth=0.0,
        spec=f"two_mark:a1={a1},a2={a2},t1={t1},t2={t2}",
        params={"a1": a1, "a2": a2, "t1": t1, "t2": t2},
    )


def bounded_smooth(t: float = 1.0) -> CylinderFunctional:
    """``f(x) = sin(x)`` at time ``t`` (first coordinate, one dimension)."""

    def grad(x):
        return np.cos(x)

    return CylinderFunctional(
        "bounded_smooth",
        (t,),
        lambda x: np.sin(x[:, 0, 0]),
        grad_f=grad,
        bounds=(-1.0, 1.0),
        growth=0.0,
        spec=f"bounded_smooth:t={t}",
        params={"t": t},
    )


def unbounded_below(t: float = 1.0) -> CylinderFunctional:
    """``f(x) = -|x|``; ``E exp(-|B_t|) = 2 exp(t/2) Phi(-sqrt(t))``."""
    log_mgf = math.log(2.0) + 0.5 * t + float(log_ndtr(-math.sqrt(t)))
    return CylinderFunctional(
        "unbounded_below",
        (t,),
        lambda x: -np.abs(x[:, 0, 0]),
        grad_f=lambda x: -np.sign(x),
        log_mgf=log_mgf,
        bounds=(-INF, 0.0),
        growth=0.0,
        kinks=(0.0,),
        spec=f"unbounded_below:t={t}",
        params={"t": t},
    )


def smooth_density(b: float = 0.5, t: float = 1.0) -> CylinderFunctional:
    """``f = log(1 + b sin x)``: the log of a density w.r.t. Wiener measure.

    ``E[1 + b sin B_t] = 1`` so the log-partition is zero, and the Föllmer drift
    is bounded by ``sup|phi'| / inf phi = |b| / (1 - |b|)``.
    """
    if not abs(b) < 1:
        raise InvalidArgument(f"need |b| < 1, got {b}")
    return CylinderFunctional(
        "smooth_density",
        (t,),
        lambda x: np.log1p(b * np.sin(x[:, 0, 0])),
        grad_f=lambda x: b * np.cos(x) / (1 + b * np.sin(x)),
        log_mgf=0.0,
        bounds=(math.log1p(-abs(b)), math.log1p(abs(b))),
        growth=0.0,
        follmer_bound=abs(b) / (1 - abs(b)),
        spec=f"smooth_density:b={b},t={t}",
        params={"b": b, "t": t},
    )


CATALOG: dict[str, Callable[..., CylinderFunctional]] = {
    "zero": zero,
    "linear": linear_terminal,
    "quadratic": quadratic_terminal,
    "two_mark": two_mark,
    "bounded_smooth": bounded_smooth,
    "unbounded_below": unbounded_below,
    "smooth_density": smooth_density,
    "diverging": diverging,
}


def catalog() -> dict[str, CylinderFunctional]:
    """Default instance of every catalog entry, keyed by name."""
    return {name: make() for name, make in CATALOG.items()}


def parameter_schema(name: str) -> dict[str, float]:
    import inspect

    sig = inspect.signature(CATALOG[name])
    return {p: v.default for p, v in sig.parameters.items() if p != "name"}


def parse_functional(spec: str) -> CylinderFunctional:
    """Build a catalog entry from ``"name"`` or ``"name:k=v,k=v"``.

    >>> parse_functional("quadratic:c=0.25,t=1").log_mgf
    0.34657359027997264
    """
    name, _, rest = spec.partition(":")
    name = name.strip()
    if name not in CATALOG:
        raise InvalidArgument(f"unknown functional {name!r}; known: {sorted(CATALOG)}")
    schema = parameter_schema(name)
    kwargs = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq or key not in schema:
            raise InvalidArgument(f"bad parameter {item!r} for {name!r}; expected one of {list(schema)}")
        kwargs[key] = int(value) if key == "d" else float(value)
    return CATALOG[name](**kwargs)


# --------------------------------------------------------------------------
# integrability diagnostics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegrabilityDiagnosis:
    a1_ok: bool
    a2_ok: bool
    tail_fraction: float
    top_k: int
    negative_part_mean: float
    sub_batch_means: tuple[float, ...]


def check_integrability(
    F: CylinderFunctional,
    paths: PathBatch,
    top_fraction: float = 0.001,
    threshold: float = 0.5,
    n_sub: int = 10,
) -> IntegrabilityDiagnosis:
    """Empirical heavy-tail screen for exp(F) and stability check for F_-.

    Flags exp(F) when the largest ``top_fraction`` of samples carry more than
    ``threshold`` of the total; flags F_- when its sub-batch means are not
    finite or disagree by more than five standard errors. Advisory only.
    """
    if paths.kind != "brownian":
        raise InvalidArgument("integrability is checked under Wiener measure")
    vals = evaluate(F, paths)
    n = vals.size
    k = max(1, math.ceil(top_fraction * n))
    finite = np.isfinite(vals)
    if not finite.all():
        tail = 1.0
    else:
        w = np.exp(vals - vals.max())
        tail = float(np.sort(w)[-k:].sum() / w.sum())
    neg = np.maximum(-vals, 0.0)
    subs = np.array_split(neg, min(n_sub, n))
    means = np.array([s.mean() for s in subs])
    sub_n = n / len(subs)
    spread = np.abs(means - neg.mean()).max() if np.isfinite(means).all() else INF
    tol = 5 * neg.std() / math.sqrt(sub_n) + 1e-12
    return IntegrabilityDiagnosis(
        a1_ok=bool(finite.all() and tail <= threshold),
        a2_ok=bool(np.isfinite(neg.mean()) and spread <= tol),
        tail_fraction=tail,
        top_k=k,
        negative_part_mean=float(neg.mean()),
        sub_batch_means=tuple(float(m) for m in means),
    )
