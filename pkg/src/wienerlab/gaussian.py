"""Exact Gaussian laws for affine drifts and the Gaussian relative entropy.

For a drift ``v = A(t) x + b(t)`` the Euler chain is linear-Gaussian, so the
joint law of its values at the mark nodes is computed exactly by propagating
mean and covariance through the same recursion the simulator uses.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument, Unsupported
from .paths import DriftPolicy, TimeGrid, _TIME_ATOL


def gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """``KL(N(mean0, cov0) || N(mean1, cov1))``."""
    mean0 = np.atleast_1d(np.asarray(mean0, dtype=float))
    mean1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    k = mean0.size
    c1 = np.linalg.cholesky(cov1)
    c0 = np.linalg.cholesky(cov0)
    solve = np.linalg.solve(cov1, cov0)
    diff = mean1 - mean0
    maha = diff @ np.linalg.solve(cov1, diff)
    logdet1 = 2 * np.log(np.diag(c1)).sum()
    logdet0 = 2 * np.log(np.diag(c0)).sum()
    return float(0.5 * (np.trace(solve) + maha - k + logdet1 - logdet0))


def brownian_mark_cov(marks, dim: int) -> np.ndarray:
    """Covariance of ``(B_{t_1}, ..., B_{t_m})`` flattened mark-major."""
    t = np.asarray(marks, dtype=float)
    return np.kron(np.minimum.outer(t, t), np.eye(dim))


def affine_euler_marginal(policy: DriftPolicy, grid: TimeGrid, marks, dim: int = 1):
    """Mean and covariance of the Euler-drifted path at ``marks``.

    Returns ``(mean, cov)`` of the flattened vector ``(X_{t_1}, ..., X_{t_m})``.
    """
    if policy.affine(0.0, dim) is None:
        raise Unsupported(f"policy {policy.name!r} is not affine in the state")
    if policy.sup_bound is not None:
        raise Unsupported("a clamped policy does not give a Gaussian law")
    mark_idx = [grid.index_of(m) for m in marks]
    eye = np.eye(dim)
    mean = np.zeros(dim)
    # joint covariance of [saved marks..., current state]
    joint = np.zeros((dim, dim))
    saved_means: list[np.ndarray] = []

    def save():
        nonlocal joint
        s = joint.shape[0]
        # duplicate the current block; the copy becomes the newest saved mark
        order = np.r_[np.arange(s), np.arange(s - dim, s)]
        joint = joint[np.ix_(order, order)]
        saved_means.append(mean.copy())

    if 0 in mark_idx:
        save()
    for k, dt in enumerate(grid.dt):
        t = float(grid.nodes[k])
        if policy.cutoff is not None and t >= policy.cutoff - _TIME_ATOL:
            a, b = np.zeros((dim, dim)), np.zeros(dim)
        else:
            a, b = policy.affine(t, dim)
        m = eye + a * dt
        s = joint.shape[0]
        trans = np.eye(s)
        trans[s - dim :, s - dim :] = m
        joint = trans @ joint @ trans.T
        joint[s - dim :, s - dim :] += dt * eye
        mean = m @ mean + b * dt
        if k + 1 in mark_idx:
            save()
    s = joint.shape[0]
    return np.concatenate(saved_means), joint[: s - dim, : s - dim]


def mark_marginal_kl(policy: DriftPolicy, grid: TimeGrid, marks, dim: int = 1) -> float:
    """Relative entropy of the drifted law at ``marks`` w.r.t. Brownian motion.

    Marks at ``t = 0`` are dropped since both laws are a point mass there.
    """
    marks = [float(m) for m in marks if m > _TIME_ATOL]
    if not marks:
        return 0.0
    for m in marks:
        if m > grid.horizon + _TIME_ATOL:
            raise InvalidArgument(f"mark {m} beyond horizon {grid.horizon}")
    mean, cov = affine_euler_marginal(policy, grid, marks, dim)
    ref = brownian_mark_cov(marks, dim)
    return gaussian_kl(mean, cov, np.zeros_like(mean), ref)
