import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from adaptdiff.metrics import RobustnessGridResult, dice, paired_t_test


def test_dice_hand_cases():
    a = np.zeros((4, 4), np.uint8)
    a[0] = 1
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[3] = 1
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, :2] = 1
    c[1, :2] = 1
    assert dice(a, c) == 0.5
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        dice(a, np.zeros((3, 3)))


masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_t_test_hand_case():
    # closed form for df = 2: p = 1 - t / sqrt(2 + t^2); value cross-checked by quadrature
    r = paired_t_test([1, 2, 3], [0, 0, 0])
    assert r.t == pytest.approx(2 * math.sqrt(3), abs=1e-4)
    assert r.df == 2
    assert r.p == pytest.approx(0.0741799002274, abs=1e-9)
    assert r.p == pytest.approx(0.0742, abs=1e-3)


def test_t_test_degenerate():
    r = paired_t_test([0.3, 0.4], [0.3, 0.4])
    assert (r.t, r.p) == (0.0, 1.0)
    r = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert r.p == 0.0 and r.degenerate
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [2.0])


def test_t_test_against_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=25), rng.normal(0.3, 1, size=25)
    ref = stats.ttest_rel(a, b)
    r = paired_t_test(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-9)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=20))
def test_t_test_antisymmetric(pairs):
    a, b = (np.array(x) for x in zip(*pairs))
    d = a - b
    if np.ptp(d) < 1e-6:
        return
    r1, r2 = paired_t_test(a, b), paired_t_test(b, a)
    assert r1.t == pytest.approx(-r2.t, rel=1e-9, abs=1e-12)
    assert r1.p == pytest.approx(r2.p, rel=1e-9, abs=1e-15)


def test_grid_result_csv():
    r = RobustnessGridResult([0.0, 0.2], [0.0, 0.1], np.array([[0.9, 0.8], [np.nan, 0.7]]),
                             np.array([[4, 4], [0, 4]]), np.array([[True, True], [False, True]]))
    lines = r.to_csv().splitlines()
    assert lines[0] == "r_fp,r_fn,mean_dice,n,valid"
    assert lines[1] == "0,0,0.900000,4,1"
    assert lines[3] == "0.2,0,nan,0,0"
    assert r.cell(0.2, 0.1) == 0.7
