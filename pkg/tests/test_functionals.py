from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wienerlab import functionals as fn
from wienerlab.errors import InvalidArgument
from wienerlab.paths import PathBatch, make_grid, sample_brownian
from wienerlab.quadrature import gaussian_rule


def single_path(value: float) -> PathBatch:
    grid = make_grid(1.0, 2, [1.0])
    return PathBatch(grid, np.array([[[0.0], [0.3], [value]]]), 0, "brownian")


def test_evaluate_examples():
    assert fn.evaluate(fn.linear_terminal(1.0), single_path(0.7))[0] == pytest.approx(0.7)
    assert fn.evaluate(fn.zero(), single_path(0.7))[0] == 0.0
    assert fn.evaluate(fn.quadratic_terminal(0.25), single_path(2.0))[0] == pytest.approx(1.0)


def test_evaluate_needs_marks_on_grid():
    base = sample_brownian(make_grid(1.0, 3), 4, seed=0)
    with pytest.raises(InvalidArgument):
        fn.evaluate(fn.two_mark(), base)


def test_truncate_examples():
    F = fn.linear_terminal(1.0)
    same = fn.truncate(F, fn.TruncationSpec())
    assert same.log_mgf == F.log_mgf
    assert fn.evaluate(same, single_path(0.7))[0] == pytest.approx(0.7)
    capped = fn.truncate(F, fn.TruncationSpec(upper=0.0))
    assert fn.evaluate(capped, single_path(0.7))[0] == 0.0
    assert capped.log_mgf is None
    Q = fn.quadratic_terminal(0.25)
    floored = fn.truncate(Q, fn.TruncationSpec(lower=0.0))
    assert fn.evaluate(floored, single_path(2.0))[0] == pytest.approx(1.0)
    assert floored.log_mgf == Q.log_mgf


def test_truncation_spec_validation():
    with pytest.raises(InvalidArgument):
        fn.TruncationSpec(upper=-1.0, lower=1.0)


@given(
    upper=st.floats(-2.0, 5.0),
    lower=st.floats(-1.9, 5.0),
    bump=st.floats(0.0, 3.0),
)
@settings(max_examples=40, deadline=None)
def test_truncation_bounds_and_monotone(upper, lower, bump):
    if upper <= -lower:
        lower = -upper + 0.1
    base = sample_brownian(make_grid(1.0, 2, [0.5, 1.0]), 256, seed=1)
    for F in (fn.linear_terminal(1.0), fn.quadratic_terminal(0.25), fn.two_mark()):
        lo = fn.evaluate(fn.truncate(F, fn.TruncationSpec(upper, lower)), base)
        hi = fn.evaluate(fn.truncate(F, fn.TruncationSpec(upper + bump, lower)), base)
        assert np.all(lo <= upper) and np.all(lo >= -lower)
        assert np.all(lo <= hi)


def test_catalog_contents():
    cat = fn.catalog()
    for name in ("linear", "quadratic", "two_mark", "bounded_smooth", "unbounded_below", "diverging"):
        assert name in cat
    assert not cat["diverging"].a1_holds
    flagged = fn.quadratic_terminal(0.6)
    assert not flagged.a1_holds and flagged.log_mgf == math.inf
    with pytest.raises(InvalidArgument):
        fn.diverging(0.25)


@pytest.mark.parametrize(
    "spec, value",
    [("linear:a=1", 0.5), ("quadratic:c=0.25,t=1", -0.5 * math.log(0.5)), ("two_mark:a1=1,a2=1", 1.25)],
)
def test_oracle_values(spec, value):
    assert fn.parse_functional(spec).log_mgf == pytest.approx(value, abs=1e-12)


def independent_log_mgf(F) -> float:
    """Brute-force oracle on an independent-increment parametrisation."""
    rule = gaussian_rule(F.n_marks * F.dim, 64 if F.n_marks * F.dim == 1 else 32)
    z = rule.nodes.reshape(-1, F.n_marks, F.dim)
    dt = np.diff((0.0,) + tuple(F.marks))
    x = np.cumsum(z * np.sqrt(dt)[None, :, None], axis=1)
    return rule.log_expect_exp(F(x))


@pytest.mark.parametrize("name", ["zero", "linear", "quadratic", "two_mark", "smooth_density"])
def test_oracles_against_quadrature(name):
    F = fn.catalog()[name]
    assert independent_log_mgf(F) == pytest.approx(F.log_mgf, abs=1e-9)


def test_unbounded_below_oracle():
    F = fn.unbounded_below()
    from scipy.integrate import quad

    val = quad(lambda x: math.exp(-abs(x) - x * x / 2) / math.sqrt(2 * math.pi), -np.inf, np.inf)[0]
    assert F.log_mgf == pytest.approx(math.log(val), abs=1e-10)


@pytest.mark.parametrize("name", ["linear", "quadratic", "two_mark", "bounded_smooth", "smooth_density"])
def test_gradients_match_finite_differences(name):
    F = fn.catalog()[name]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, F.n_marks, F.dim))
    g = F.gradient(x)
    h = 1e-5
    for i in range(F.n_marks):
        for j in range(F.dim):
            e = np.zeros_like(x)
            e[:, i, j] = h
            fd = (F(x + e) - F(x - e)) / (2 * h)
            assert np.allclose(g[:, i, j], fd, rtol=1e-6, atol=1e-8)


def test_bounds_respected():
    base = sample_brownian(make_grid(1.0, 2, [0.5, 1.0]), 5000, seed=2)
    for F in fn.catalog().values():
        if F.bounds is None:
            continue
        v = fn.evaluate(F, base)
        assert np.all(v >= F.bounds[0] - 1e-12) and np.all(v <= F.bounds[1] + 1e-12)


def test_parse_functional_errors():
    with pytest.raises(InvalidArgument):
        fn.parse_functional("nope")
    with pytest.raises(InvalidArgument):
        fn.parse_functional("linear:b=1")
    assert "c" in fn.parameter_schema("quadratic")


def test_integrability_diagnosis():
    base = sample_brownian(make_grid(1.0, 1, [1.0]), 100_000, seed=3)
    lin = fn.check_integrability(fn.linear_terminal(1.0), base)
    assert lin.a1_ok and lin.a2_ok
    div = fn.check_integrability(fn.diverging(0.6), base)
    assert not div.a1_ok
    z = fn.check_integrability(fn.zero(), base)
    assert z.a1_ok and z.a2_ok
    assert z.tail_fraction == pytest.approx(z.top_k / base.size)
