"""Tensor Gauss-Hermite rules for expectations under a standard Gaussian.

Nodes come from the probabilists' Hermite family (weight ``exp(-x**2 / 2)``),
so after normalising the weights an expectation ``E[h(Z)]`` with
``Z ~ N(0, I_d)`` is simply ``weights @ h(nodes)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgument

MAX_TENSOR_POINTS = 2_000_000


def default_order(dim: int) -> int:
    return 64 if dim == 1 else 32


@lru_cache(maxsize=None)
def _hermite_1d(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@dataclass(frozen=True, eq=False)
class GaussianQuadrature:
    """Product rule for the standard Gaussian measure on R^dim.

    ``nodes`` has shape ``(order**dim, dim)``; ``weights`` sums to one.
    """

    dim: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, dim: int, order: int | None = None) -> "GaussianQuadrature":
        if dim < 1:
            raise InvalidArgument(f"dimension must be >= 1, got {dim}")
        order = default_order(dim) if order is None else int(order)
        if order < 1:
            raise InvalidArgument(f"order must be >= 1, got {order}")
        if order**dim > MAX_TENSOR_POINTS:
            raise InvalidArgument(
                f"tensor rule with {order}**{dim} points exceeds {MAX_TENSOR_POINTS}"
            )
        x, w = _hermite_1d(order)
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        wgrids = np.meshgrid(*([w] * dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
        nodes.flags.writeable = False
        weights.flags.writeable = False
        return cls(dim=dim, order=order, nodes=nodes, weights=weights)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Contract the trailing node axis of ``values`` against the weights."""
        return np.asarray(values) @ self.weights

    def log_expect_exp(self, values: np.ndarray) -> np.ndarray:
        """``log E[exp(values)]`` along the trailing node axis, overflow-safe."""
        return logsumexp(np.asarray(values) + self.log_weights, axis=-1)


@lru_cache(maxsize=32)
def gaussian_rule(dim: int, order: int | None = None) -> GaussianQuadrature:
    """Cached constructor; rules are immutable so sharing is safe."""
    return GaussianQuadrature.build(dim, order)


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """Square root ``L`` with ``L @ L.T == cov`` that tolerates singular ``cov``."""
    cov = np.asarray(cov, dtype=float)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
        raise InvalidArgument("covariance matrix is not positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def composite_gaussian_1d(
    sigma: float,
    breakpoints=(),
    half_width: float = 30.0,
    panel: float = 0.5,
    order: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule for ``N(0, sigma**2)`` on the real line.

    Panels of width ``panel * sigma`` cover ``[-half_width * sigma,
    half_width * sigma]`` and are split at ``breakpoints`` so that integrands
    with kinks there are integrated at full accuracy. Returns nodes and log
    weights (Gaussian density included).
    """
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    lo, hi = -half_width * sigma, half_width * sigma
    edges = sorted({lo, hi, *(float(b) for b in breakpoints if lo < b < hi)})
    g, w = np.polynomial.legendre.leggauss(order)
    xs, ws = [], []
    for a, b in zip(edges, edges[1:]):
        n = max(1, int(np.ceil((b - a) / (panel * sigma))))
        e = np.linspace(a, b, n + 1)
        half = np.diff(e)[:, None] / 2
        mid = (e[:-1] + e[1:])[:, None] / 2
        xs.append((half * g + mid).ravel())
        ws.append((half * w).ravel())
    x = np.concatenate(xs)
    logw = np.log(np.concatenate(ws)) - x**2 / (2 * sigma**2) - 0.5 * np.log(2 * np.pi * sigma**2)
    return x, logw
