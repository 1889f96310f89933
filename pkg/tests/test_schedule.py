import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptdiff.schedule import build_linear_schedule, sigma_at

# ab_300 and sigma_2 computed with mpmath at 50 digits (product of 1 - beta_t).
ALPHA_BAR_300 = 0.048058428944293969
SIGMA_2 = 0.0079049491282004893


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(300, 1e-4, 0.02)


def test_endpoints(sched):
    assert sched.beta_at(1) == 1e-4
    assert sched.beta_at(300) == 0.02
    assert sched.alpha_bar_at(1) == pytest.approx(0.9999, abs=1e-15)


def test_alpha_bar_end(sched):
    assert abs(sched.alpha_bar_at(300) - 0.047) <= 0.005
    assert sched.alpha_bar_at(300) == pytest.approx(ALPHA_BAR_300, rel=1e-12)


def test_linear_interpolation(sched):
    np.testing.assert_allclose(np.diff(sched.beta), (0.02 - 1e-4) / 299, rtol=1e-9)


def test_invariants(sched):
    assert np.all((sched.beta > 0) & (sched.beta < 1))
    assert np.all(np.diff(sched.beta) >= 0)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert 0 < sched.alpha_bar[-1] < sched.alpha_bar[0] < 1
    assert np.array_equal(sched.alpha, 1.0 - sched.beta)
    assert sched.posterior_var_at(1) == 0.0
    assert np.all(sched.posterior_var >= 0)


def test_incremental_product_matches_direct(sched):
    for t in range(1, 301):
        direct = math.prod(1.0 - b for b in sched.beta[:t])
        assert abs(sched.alpha_bar_at(t) - direct) <= 1e-12 * direct


def test_identity(sched):
    for t in range(2, 301):
        lhs = 1 - sched.alpha_bar_at(t) - sched.beta_at(t)
        rhs = sched.alpha_at(t) * (1 - sched.alpha_bar_at(t - 1))
        assert abs(lhs - rhs) <= 1e-12


def test_sigma(sched):
    assert sigma_at(sched, 1) == 0.0
    assert sigma_at(sched, 2) == pytest.approx(SIGMA_2, rel=1e-12)
    for t in range(1, 301):
        assert sigma_at(sched, t) ** 2 <= sched.beta_at(t)
    with pytest.raises(ValueError):
        sigma_at(sched, 0)
    with pytest.raises(ValueError):
        sigma_at(sched, 301)


def test_pure_value():
    a = build_linear_schedule(300, 1e-4, 0.02)
    b = build_linear_schedule(300, 1e-4, 0.02)
    assert a == b
    assert a.alpha_bar.tobytes() == b.alpha_bar.tobytes()


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (0, 1e-4, 0.02), (10, 0.0, 0.02),
                                  (10, 1e-4, 1.0), (10, 0.03, 0.02), (10, -0.1, 0.5)])
def test_rejects(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


@given(T=st.integers(2, 400), lo=st.floats(1e-6, 0.05), span=st.floats(0, 0.2))
def test_properties(T, lo, span):
    s = build_linear_schedule(T, lo, lo + span)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.posterior_var[0] == 0
    assert np.all(s.posterior_var <= s.beta + 1e-15)
