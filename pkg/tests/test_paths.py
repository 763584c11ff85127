from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wienerlab.errors import ContractViolation, InvalidArgument, NumericFailure
from wienerlab.paths import (
    BrownianSource,
    ConstantPolicy,
    DriftPolicy,
    EstimatorReport,
    MarkovPolicy,
    PathBatch,
    ZeroPolicy,
    action_norm_sq,
    apply_drift,
    check_horizon,
    girsanov_log_weight,
    make_grid,
    ou_feedback,
    refine_grid,
    sample_brownian,
    simulate,
)


def within_3se(values, target):
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / math.sqrt(values.size)
    return abs(values.mean() - target) <= 3 * se


# grids ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "horizon, steps, marks, nodes",
    [
        (1.0, 4, [], [0, 0.25, 0.5, 0.75, 1]),
        (1.0, 2, [0.3], [0, 0.3, 0.5, 1]),
        (1.0, 1, [0.0], [0, 1]),
    ],
)
def test_make_grid_examples(horizon, steps, marks, nodes):
    grid = make_grid(horizon, steps, marks)
    assert np.allclose(grid.nodes, nodes)
    for m in marks:
        assert grid.nodes[grid.index_of(m)] == m


@pytest.mark.parametrize("marks", [[0.5, 0.3], [1.5], [-0.1], [0.3, 0.3]])
def test_make_grid_rejects_bad_marks(marks):
    with pytest.raises(InvalidArgument):
        make_grid(1.0, 4, marks)


def test_make_grid_rejects_bad_shape():
    with pytest.raises(InvalidArgument):
        make_grid(0.0, 4)
    with pytest.raises(InvalidArgument):
        make_grid(1.0, 0)


@given(
    steps=st.integers(1, 50),
    marks=st.lists(st.floats(0.0, 1.0, allow_nan=False), max_size=4, unique=True),
)
def test_grid_invariants(steps, marks):
    marks = sorted(marks)
    grid = make_grid(1.0, steps, marks)
    assert grid.nodes[0] == 0.0
    assert np.all(np.diff(grid.nodes) > 0)
    for m in marks:
        assert grid.has_node(m)


def test_refine_grid_keeps_marks():
    grid = make_grid(1.0, 4, [0.3])
    fine = refine_grid(grid, [0.1, 0.6])
    assert all(fine.has_node(t) for t in (0.1, 0.3, 0.6, 1.0))
    assert fine.marks == grid.marks


# sampling ------------------------------------------------------------------


def test_paths_start_at_zero_and_are_read_only():
    base = sample_brownian(make_grid(1.0, 10), 50, seed=3, dim=2)
    assert base.values.shape == (50, 11, 2)
    assert np.all(base.values[:, 0] == 0.0)
    with pytest.raises(ValueError):
        base.values[0, 1, 0] = 1.0


def test_sampling_is_deterministic_and_thread_independent():
    grid = make_grid(1.0, 8)
    a = sample_brownian(grid, 20_000, seed=11, threads=1)
    b = sample_brownian(grid, 20_000, seed=11, threads=4)
    c = sample_brownian(grid, 20_000, seed=12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_brownian_second_moments():
    n = 10**6
    base = sample_brownian(make_grid(1.0, 2, [0.5]), n, seed=5)
    w1 = base.at(1.0)[:, 0]
    assert abs((w1**2).mean() - 1.0) <= 3 * math.sqrt(2 / n)
    assert within_3se(base.at(0.5)[:, 0] * w1, 0.5)


def test_source_chunks_match_materialized():
    src = BrownianSource(make_grid(1.0, 4), 20_000, seed=2)
    assert src.n_chunks == 3
    full = src.materialize()
    assert np.array_equal(full.values[: src.chunk(0).size], src.chunk(0).values)


# drift ---------------------------------------------------------------------


def test_zero_policy_is_identity():
    base = sample_brownian(make_grid(1.0, 20), 100, seed=1)
    assert np.array_equal(apply_drift(base, ZeroPolicy()).values, base.values)


def test_constant_drift_mean():
    base = sample_brownian(make_grid(1.0, 20), 100_000, seed=4)
    x = apply_drift(base, ConstantPolicy(1.0, cutoff=1.0))
    assert x.kind == "drifted"
    assert within_3se(x.at(1.0)[:, 0], 1.0)


def test_ou_feedback_variance():
    n = 100_000
    base = sample_brownian(make_grid(1.0, 400), n, seed=6)
    x1 = apply_drift(base, ou_feedback(1.0, cutoff=1.0)).at(1.0)[:, 0]
    target = (1 - math.exp(-2)) / 2
    se = x1.var() * math.sqrt(2 / n)
    assert abs(x1.var() - target) <= 3 * se + 2e-3


class RecordingPolicy(DriftPolicy):
    name = "recording"

    def __init__(self):
        self.seen = []

    def rule(self, times, history):
        self.seen.append((len(times), history.shape[1]))
        assert not history.flags.writeable
        return np.zeros(history.shape[2])


def test_policy_never_sees_future():
    grid = make_grid(1.0, 10)
    policy = RecordingPolicy()
    simulate(sample_brownian(grid, 5, seed=0), policy)
    assert [s for s in policy.seen] == [(k + 1, k + 1) for k in range(grid.steps)]


def test_nonfinite_drift_reports_node():
    policy = MarkovPolicy(lambda t, x: np.where(t > 0.45, np.nan, 0.0) * np.ones_like(x), cutoff=1.0)
    with pytest.raises(NumericFailure) as info:
        apply_drift(sample_brownian(make_grid(1.0, 10), 4, seed=0), policy)
    assert info.value.node == 5


@given(bound=st.floats(0.1, 3.0), scale=st.floats(0.0, 10.0))
@settings(max_examples=30, deadline=None)
def test_clamp_respected(bound, scale):
    policy = MarkovPolicy(lambda t, x: scale * x, cutoff=1.0, sup_bound=bound)
    _, drifts = simulate(sample_brownian(make_grid(1.0, 5), 64, seed=1), policy)
    assert np.all(np.linalg.norm(drifts, axis=-1) <= bound * (1 + 1e-12))


def test_cutoff_zeroes_drift():
    _, drifts = simulate(sample_brownian(make_grid(1.0, 10), 8, seed=0), ConstantPolicy(2.0, cutoff=0.5))
    assert np.all(drifts[:, :5] == 2.0) and np.all(drifts[:, 5:] == 0.0)


# action and weights --------------------------------------------------------


def test_action_examples():
    base = sample_brownian(make_grid(1.0, 50), 1000, seed=0)
    zero = action_norm_sq(ZeroPolicy(), base)
    assert zero.value == 0.0
    const = action_norm_sq(ConstantPolicy(1.0, cutoff=1.0), base)
    assert const.value == pytest.approx(1.0, abs=1e-12) and const.std_error < 1e-12


def test_ou_action():
    base = BrownianSource(make_grid(1.0, 400), 50_000, seed=8)
    rep = action_norm_sq(ou_feedback(1.0, cutoff=1.0), base)
    assert abs(rep.value - (math.exp(-2) + 1) / 4) <= 3 * rep.std_error + 2e-3


def test_horizon_contract():
    class Open(ConstantPolicy):
        zero_tail = False

    grid = make_grid(1.0, 4)
    with pytest.raises(ContractViolation):
        check_horizon(Open(1.0), grid)
    with pytest.raises(ContractViolation):
        check_horizon(Open(1.0, cutoff=2.0), grid)
    check_horizon(Open(1.0, cutoff=1.0), grid)
    check_horizon(ConstantPolicy(1.0), grid)


def test_girsanov_examples():
    base = sample_brownian(make_grid(1.0, 20), 200_000, seed=9)
    assert np.all(girsanov_log_weight(ZeroPolicy(), base) == 0.0)
    lw = girsanov_log_weight(ConstantPolicy(1.0, cutoff=1.0), base)
    assert within_3se(np.exp(lw), 1.0)
    assert within_3se(lw, -0.5)


@pytest.mark.parametrize(
    "policy",
    [ConstantPolicy(0.7, cutoff=1.0), ou_feedback(1.0, cutoff=1.0),
     MarkovPolicy(lambda t, x: np.sin(x) + t, cutoff=1.0, sup_bound=2.0)],
    ids=["constant", "ou", "bounded_markov"],
)
def test_girsanov_martingale(policy):
    base = sample_brownian(make_grid(1.0, 50), 100_000, seed=10)
    assert within_3se(np.exp(girsanov_log_weight(policy, base)), 1.0)


def test_estimator_report_constructors():
    rep = EstimatorReport.from_samples(np.array([1.0, 2.0, 3.0]), 4, "mc")
    assert rep.value == 2.0 and rep.std_error == pytest.approx(1 / math.sqrt(3))
    exact = EstimatorReport.exact(0.5, "closed_form")
    assert exact.std_error == 0.0 and exact.to_dict()["method"] == "closed_form"


def test_grid_refinement_consistency():
    stats = []
    for steps in (200, 400):
        base = BrownianSource(make_grid(1.0, steps), 40_000, seed=13)
        stats.append(action_norm_sq(ou_feedback(1.0, cutoff=1.0), base))
    se = math.hypot(stats[0].std_error, stats[1].std_error)
    assert abs(stats[0].value - stats[1].value) <= 3 * se


def test_pathbatch_validation():
    grid = make_grid(1.0, 2)
    with pytest.raises(InvalidArgument):
        PathBatch(grid, np.ones((2, 3, 1)), 0, "brownian")
    with pytest.raises(InvalidArgument):
        PathBatch(grid, np.zeros((2, 4, 1)), 0, "brownian")
    bad = np.zeros((2, 3, 1))
    bad[0, 2, 0] = np.inf
    with pytest.raises(NumericFailure):
        PathBatch(grid, bad, 0, "brownian")
