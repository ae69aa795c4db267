import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penmcfm.special import digamma, log_gamma, trigamma

mpmath.mp.dps = 40
GRID = np.geomspace(1e-4, 1e6, 301)


def _check(ours, exact):
    # absolute where the function is O(1), relative where it is large
    exact = float(exact)
    if abs(exact) <= 1.0:
        assert abs(ours - exact) < 1e-12
    else:
        assert abs(ours - exact) < 1e-13 * abs(exact)


@pytest.mark.parametrize("x", GRID)
def test_log_gamma_matches_mpmath(x):
    _check(log_gamma(x), mpmath.loggamma(mpmath.mpf(x)))


@pytest.mark.parametrize("x", GRID)
def test_digamma_matches_mpmath(x):
    _check(digamma(x), mpmath.digamma(mpmath.mpf(x)))


def test_trigamma_matches_mpmath():
    for x in np.geomspace(1e-3, 1e5, 60):
        exact = float(mpmath.polygamma(1, mpmath.mpf(x)))
        assert abs(trigamma(x) - exact) < 1e-12 * exact


def test_known_values():
    assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-12)
    assert log_gamma(2.0) == pytest.approx(0.0, abs=1e-12)
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-12)


def test_recurrence_on_log_grid():
    x = np.geomspace(1e-3, 1e5, 200)
    assert np.max(np.abs(digamma(x + 1) - digamma(x) - 1 / x) / np.maximum(1.0, 1 / x)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-4, max_value=1e6))
def test_vectorized_equals_scalar(x):
    arr = np.array([x, 2 * x])
    assert log_gamma(arr)[0] == log_gamma(x)
    assert digamma(arr)[1] == digamma(2 * x)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        log_gamma(bad)
    with pytest.raises(ValueError):
        digamma(bad)
