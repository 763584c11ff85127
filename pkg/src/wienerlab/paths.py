"""Time grids, Brownian path batches, drift policies and the Euler drift scheme.

Paths live on the nodes of a :class:`TimeGrid` only. A drifted path is built
by the left-point Euler recursion

    X[k+1] = X[k] + v(t_k, X[0..k]) * dt_k + (B[k+1] - B[k]),

accumulated as ``X = B + D`` with ``D`` the running drift integral, so that a
zero drift reproduces the Brownian values bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericFailure

#: Paths per independently seeded sub-batch. Fixed so that results never
#: depend on how sub-batches are scheduled.
CHUNK_SIZE = 8192

_TIME_ATOL = 1e-12


@dataclass(frozen=True)
class EstimatorReport:
    value: float
    std_error: float
    n_samples: int
    seed: int | None
    method: str

    @classmethod
    def from_samples(cls, samples: np.ndarray, seed: int | None, method: str) -> "EstimatorReport":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        mean = float(samples.mean())
        se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(value=mean, std_error=se, n_samples=n, seed=seed, method=method)

    @classmethod
    def exact(cls, value: float, method: str) -> "EstimatorReport":
        return cls(value=float(value), std_error=0.0, n_samples=0, seed=None, method=method)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray
    mark_indices: tuple[int, ...] = ()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidArgument("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise InvalidArgument("grid must start at t = 0")
        if not np.all(np.diff(nodes) > 0):
            raise InvalidArgument("grid nodes must be strictly increasing")
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def marks(self) -> tuple[float, ...]:
        return tuple(float(self.nodes[i]) for i in self.mark_indices)

    def index_of(self, time: float) -> int:
        """Index of the node equal to ``time``; raises if there is none."""
        i = int(np.searchsorted(self.nodes, time - _TIME_ATOL))
        if i < self.nodes.size and abs(self.nodes[i] - time) <= _TIME_ATOL:
            return i
        raise InvalidArgument(f"time {time!r} is not a node of the grid")

    def has_node(self, time: float) -> bool:
        try:
            self.index_of(time)
        except InvalidArgument:
            return False
        return True

    def to_dict(self) -> dict:
        return {"nodes": self.nodes.tolist(), "mark_indices": list(self.mark_indices)}


def make_grid(horizon: float, steps: int, mark_times: Sequence[float] = ()) -> TimeGrid:
    """Uniform grid on ``[0, horizon]`` with every mark time inserted as a node.

    A mark within 1e-12 of a uniform node replaces that node, so the mark
    value is always represented exactly.
    """
    if not horizon > 0:
        raise InvalidArgument(f"horizon must be positive, got {horizon}")
    if int(steps) != steps or steps < 1:
        raise InvalidArgument(f"steps must be a positive integer, got {steps}")
    marks = [float(m) for m in mark_times]
    if any(b <= a for a, b in zip(marks, marks[1:])):
        raise InvalidArgument(f"mark times must be strictly increasing: {marks}")
    if marks and (marks[0] < 0 or marks[-1] > horizon + _TIME_ATOL):
        raise InvalidArgument(f"mark times must lie in [0, {horizon}]: {marks}")

    nodes = [horizon * k / steps for k in range(steps + 1)]
    for m in marks:
        hit = [i for i, t in enumerate(nodes) if abs(t - m) <= _TIME_ATOL]
        if hit:
            nodes[hit[0]] = m if hit[0] != 0 else 0.0
        else:
            nodes.append(m)
    nodes = np.array(sorted(nodes))
    grid = TimeGrid(nodes)
    return TimeGrid(nodes, tuple(grid.index_of(m) for m in marks))


def refine_grid(grid: TimeGrid, times: Sequence[float]) -> TimeGrid:
    """Return ``grid`` with the extra ``times`` added as (non-mark) nodes."""
    extra = [float(t) for t in times if 0 <= t <= grid.horizon and not grid.has_node(t)]
    nodes = np.array(sorted(set(grid.nodes.tolist()) | set(extra)))
    new = TimeGrid(nodes)
    return TimeGrid(nodes, tuple(new.index_of(m) for m in grid.marks))


# --------------------------------------------------------------------------
# path batches
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathBatch:
    grid: TimeGrid
    values: np.ndarray  # (batch, nodes, d)
    seed: int | None
    kind: str = "brownian"

    def __post_init__(self):
        if self.kind not in ("brownian", "drifted"):
            raise InvalidArgument(f"unknown path kind {self.kind!r}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[1] != self.grid.nodes.size:
            raise InvalidArgument(
                f"values of shape {values.shape} do not fit a grid with {self.grid.nodes.size} nodes"
            )
        if np.any(values[:, 0] != 0.0):
            raise InvalidArgument("every path must start at the origin")
        if not np.isfinite(values).all():
            raise NumericFailure("path values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at(self, time: float) -> np.ndarray:
        return self.values[:, self.grid.index_of(time)]


def _chunk_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def _brownian_chunk(grid: TimeGrid, n: int, dim: int, seed: int, index: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_chunk_seed(seed, index)))
    z = rng.standard_normal((n, grid.steps, dim))
    z *= np.sqrt(grid.dt)[None, :, None]
    out = np.zeros((n, grid.steps + 1, dim))
    np.cumsum(z, axis=1, out=out[:, 1:])
    return out


@dataclass(frozen=True, eq=False)
class BrownianSource:
    """Lazily generated Brownian batch, split into fixed-size seeded chunks.

    Chunk ``i`` is drawn from ``SeedSequence([seed, i])`` regardless of the
    order or the thread in which chunks are produced, so every statistic built
    chunk by chunk is independent of ``threads``.
    """

    grid: TimeGrid
    size: int
    seed: int
    dim: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgument(f"batch size must be >= 1, got {self.size}")
        if self.dim < 1:
            raise InvalidArgument(f"dimension must be >= 1, got {self.dim}")

    @property
    def n_chunks(self) -> int:
        return -(-self.size // CHUNK_SIZE)

    def chunk(self, index: int) -> PathBatch:
        n = min(CHUNK_SIZE, self.size - index * CHUNK_SIZE)
        values = _brownian_chunk(self.grid, n, self.dim, self.seed, index)
        return PathBatch(self.grid, values, self.seed, "brownian")

    def chunks(self) -> Iterator[PathBatch]:
        for i in range(self.n_chunks):
            yield self.chunk(i)

    def map(self, fn: Callable[[PathBatch], np.ndarray]) -> list[np.ndarray]:
        """Apply ``fn`` to every chunk, in chunk order."""
        if self.threads <= 1 or self.n_chunks == 1:
            return [fn(c) for c in self.chunks()]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(lambda i: fn(self.chunk(i)), range(self.n_chunks)))

    def materialize(self) -> PathBatch:
        values = np.concatenate(self.map(lambda c: c.values), axis=0)
        return PathBatch(self.grid, values, self.seed, "brownian")


PathInput = Union[PathBatch, BrownianSource]


def sample_brownian(grid: TimeGrid, batch: int, seed: int, dim: int = 1, threads: int = 1) -> PathBatch:
    return BrownianSource(grid, batch, seed, dim, threads).materialize()


def per_path(base: PathInput, fn: Callable[[PathBatch], np.ndarray]) -> np.ndarray:
    """Evaluate a per-path statistic on a batch or, chunk by chunk, on a source."""
    if isinstance(base, BrownianSource):
        return np.concatenate(base.map(fn), axis=0)
    return fn(base)


def _seed_of(base: PathInput) -> int | None:
    return base.seed


# --------------------------------------------------------------------------
# drift policies
# --------------------------------------------------------------------------


class DriftPolicy:
    """Adapted feedback rule ``v(t_k, X[0..k])``.

    Subclasses implement :meth:`rule`, which receives the node times
    ``t_0..t_k`` and the path history of shape ``(batch, k + 1, d)``; later
    nodes are never passed in. :meth:`evaluate` applies the cutoff (zero drift
    for ``t >= cutoff``) and the radial clamp to ``sup_bound``.

    ``zero_tail`` declares that the drift vanishes beyond whatever horizon it
    is simulated on, which is how finite-horizon policies fit the
    square-integrable class.
    """

    name = "policy"
    sup_bound: float | None = None
    cutoff: float | None = None
    zero_tail: bool = True

    def rule(self, times: np.ndarray, history: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def affine(self, t: float, dim: int) -> tuple[np.ndarray, np.ndarray] | None:
        """``(A, b)`` with ``v = A x + b`` at time ``t`` if the rule is affine in
        the current state, else ``None``. Cutoff and clamp are not applied."""
        return None

    @property
    def is_gaussian_family(self) -> bool:
        return self.affine(0.0, 1) is not None and self.sup_bound is None

    def evaluate(self, times: np.ndarray, history: np.ndarray) -> np.ndarray:
        n, _, d = history.shape
        t = float(times[-1])
        if self.cutoff is not None and t >= self.cutoff - _TIME_ATOL:
            return np.zeros((n, d))
        v = np.broadcast_to(np.asarray(self.rule(times, history), dtype=float), (n, d))
        if self.sup_bound is not None:
            v = clamp_norm(v, self.sup_bound)
        return v

    def describe(self) -> dict:
        return {"name": self.name, "sup_bound": self.sup_bound, "cutoff": self.cutoff}


def clamp_norm(v: np.ndarray, bound: float) -> np.ndarray:
    """Project each row of ``v`` radially onto the ball of radius ``bound``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norm, 1e-300))
    return v * scale


class ZeroPolicy(DriftPolicy):
    name = "zero"

    def rule(self, times, history):
        return np.zeros((history.shape[0], history.shape[2]))

    def affine(self, t, dim):
        return np.zeros((dim, dim)), np.zeros(dim)


@dataclass(eq=False)
class ConstantPolicy(DriftPolicy):
    value: float | Sequence[float] = 1.0
    cutoff: float | None = None
    sup_bound: float | None = None
    name: str = "constant"

    def rule(self, times, history):
        return np.broadcast_to(np.asarray(self.value, dtype=float), history.shape[2])

    def affine(self, t, dim):
        return np.zeros((dim, dim)), np.broadcast_to(np.asarray(self.value, dtype=float), dim).copy()

    def describe(self):
        return {**super().describe(), "value": np.asarray(self.value).tolist()}


@dataclass(eq=False)
class AffinePolicy(DriftPolicy):
    """``v(t, x) = A(t) x + b(t)`` with coefficients supplied by a callable.

    ``coefficients(t)`` returns ``(A, b)``; a scalar ``A`` means ``A * I``.
    """

    coefficients: Callable[[float], tuple] = None
    cutoff: float | None = None
    sup_bound: float | None = None
    name: str = "affine"

    def affine(self, t, dim):
        a, b = self.coefficients(t)
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            a = a * np.eye(dim)
        return a, np.broadcast_to(np.asarray(b, dtype=float), dim).copy()

    def rule(self, times, history):
        a, b = self.affine(float(times[-1]), history.shape[2])
        return history[:, -1] @ a.T + b


def ou_feedback(rate: float = 1.0, cutoff: float | None = None) -> AffinePolicy:
    """The mean-reverting feedback ``v(t, x) = -rate * x``."""
    return AffinePolicy(lambda t: (-rate, 0.0), cutoff=cutoff, name=f"ou_feedback:{rate:g}")


@dataclass(eq=False)
class MarkovPolicy(DriftPolicy):
    """Feedback on the current state only: ``v = fn(t, x)`` with ``x`` of shape (n, d)."""

    fn: Callable[[float, np.ndarray], np.ndarray] = None
    cutoff: float | None = None
    sup_bound: float | None = None
    name: str = "markov"

    def rule(self, times, history):
        return self.fn(float(times[-1]), history[:, -1])


# --------------------------------------------------------------------------
# drifted paths and path functionals of the drift
# --------------------------------------------------------------------------


def simulate(base: PathBatch, policy: DriftPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Run the Euler scheme; return drifted values and the drift at each step.

    Shapes are ``(batch, nodes, d)`` and ``(batch, steps, d)``.
    """
    if base.kind != "brownian":
        raise InvalidArgument("drift must be applied to a brownian batch")
    grid = base.grid
    b = base.values
    n, _, d = b.shape
    drifts = np.zeros((n, grid.steps, d))
    if isinstance(policy, ZeroPolicy):
        return b, drifts
    dt = grid.dt
    x = np.empty_like(b)
    x[:, 0] = b[:, 0]
    acc = np.zeros((n, d))
    for k in range(grid.steps):
        history = x[:, : k + 1]
        history.flags.writeable = False
        v = policy.evaluate(grid.nodes[: k + 1], history)
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"policy {policy.name!r} returned a non-finite drift", node=k)
        drifts[:, k] = v
        acc = acc + v * dt[k]
        x[:, k + 1] = b[:, k + 1] + acc
    return x, drifts


def apply_drift(base: PathBatch, policy: DriftPolicy) -> PathBatch:
    x, _ = simulate(base, policy)
    if x is base.values:
        x = x.copy()
    return PathBatch(base.grid, x, base.seed, "drifted")


def check_horizon(policy: DriftPolicy, grid: TimeGrid) -> None:
    beyond = policy.cutoff is None or policy.cutoff > grid.horizon + _TIME_ATOL
    if beyond and not policy.zero_tail:
        raise ContractViolation(
            f"policy {policy.name!r} may be non-zero beyond the horizon {grid.horizon} "
            "and does not declare a zero tail"
        )


def _action_samples(drifts: np.ndarray, dt: np.ndarray) -> np.ndarray:
    return np.einsum("nkd,nkd,k->n", drifts, drifts, dt)


def action_samples(policy: DriftPolicy, base: PathBatch) -> np.ndarray:
    check_horizon(policy, base.grid)
    _, drifts = simulate(base, policy)
    return _action_samples(drifts, base.grid.dt)


def action_norm_sq(policy: DriftPolicy, base: PathInput) -> EstimatorReport:
    """Monte Carlo estimate of ``E sum_k |v_k|^2 dt_k`` along the drifted paths."""
    check_horizon(policy, base.grid)
    samples = per_path(base, lambda c: action_samples(policy, c))
    return EstimatorReport.from_samples(samples, _seed_of(base), "mc_action")


def _log_weight(base: PathBatch, drifts: np.ndarray) -> np.ndarray:
    db = np.diff(base.values, axis=1)
    return -np.einsum("nkd,nkd->n", drifts, db) - 0.5 * _action_samples(drifts, base.grid.dt)


def girsanov_log_weight(policy: DriftPolicy, base: PathInput) -> np.ndarray:
    """Per-path ``-sum v_k . dB_k - 1/2 sum |v_k|^2 dt_k`` (Ito, left point)."""

    def one(chunk: PathBatch) -> np.ndarray:
        _, drifts = simulate(chunk, policy)
        return _log_weight(chunk, drifts)

    return per_path(base, one)
