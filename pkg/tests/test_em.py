import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_dataset, random_params
from penmcfm.data import make_dataset, standardize_penalized
from penmcfm.em import (
    EStepCache,
    PenaltyLevel,
    e_step,
    fit_em,
    fit_path,
    initialize,
    m_step,
    m_step_detailed,
    null_fit,
    penalized_objective,
)
from penmcfm.model import ParamSet
from penmcfm.optim import PenaltyConfig, lambda_max, solve_l1_smooth, weibull_objective
from penmcfm.simulate import SimulationScenario, simulate


def _small_problem(seed, n=30, frailty=True):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=n)
    return ds, random_params(rng, ds, frailty=frailty)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_estep_invariants(seed, frailty):
    ds, p = _small_problem(seed, frailty=frailty)
    c = e_step(p, ds)
    assert np.all((ds.delta <= c.p) & (c.p <= 1))
    assert np.all(c.a > 0) and np.all(c.c >= 0) and np.all(c.c <= c.a)
    ev = ds.delta == 1
    assert np.all(c.p[ev] == 1) and np.all(c.a[ev] == c.c[ev])


def test_estep_example_value():
    p = ParamSet(1.25, 2.5, 0.5, [], [], 0.0, [], [], True)
    ds = make_dataset([1.0], [0])
    mpmath.mp.dps = 50
    su = mpmath.power(1 + mpmath.mpf("2.5"), mpmath.mpf("-0.5"))
    exact = float(0.5 * su / (0.5 + 0.5 * su))
    assert exact == pytest.approx(0.3483314773547883, rel=1e-15)
    assert e_step(p, ds).p[0] == pytest.approx(exact, rel=1e-14)


def test_estep_cured_limit():
    p = ParamSet(1.25, 2.5, 0.5, [], [], -800.0, [], [], True)
    c = e_step(p, make_dataset([1.0], [0]))
    assert c.p[0] == 0.0
    assert c.a[0] == pytest.approx(1.0, rel=1e-15)


def test_estep_no_frailty_equals_large_theta(rng):
    ds = random_dataset(rng, n=40)
    p = random_params(rng, ds)
    off = e_step(p.with_(frailty_enabled=False), ds)
    big = e_step(p.with_(theta=1e8), ds)
    for name in ("p", "a", "b", "c"):
        assert np.max(np.abs(getattr(off, name) - getattr(big, name))) < 1e-5
    assert np.all(off.a == 1) and np.all(off.b == 0)
    np.testing.assert_array_equal(off.c, off.p)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("theta_step", ["expected", "observed"])
def test_substeps_do_not_decrease(seed, theta_step):
    ds, p = _small_problem(seed, n=50)
    pen = PenaltyLevel(0.02, 0.03, 0.7)
    _, steps, _ = m_step_detailed(p, e_step(p, ds), pen, ds, theta_step=theta_step)
    assert [s.name for s in steps] == ["b_p", "beta_p", "b0,b_u", "alpha,gamma,beta_u", "theta"]
    for s in steps:
        assert s.after >= s.before - 1e-10, s


def test_lambda_max_zeroes_penalized_blocks(rng):
    ds = random_dataset(rng, n=60)
    null = null_fit(ds, initialize(ds))
    lmax = lambda_max(ds, null.params, null.estep, 1.0)
    start = null.params.with_(b_p=np.full(3, 0.2), beta_p=np.full(3, -0.2))
    new = m_step(start, null.estep, PenaltyLevel(lmax, lmax), ds)
    assert np.all(new.b_p == 0) and np.all(new.beta_p == 0)


def test_all_uncured_no_frailty_reduces_to_weibull_regression(rng):
    ds = random_dataset(rng, n=50)
    p = random_params(rng, ds, frailty=False)
    ones = np.ones(ds.n)
    cache = EStepCache(ones, ones, np.zeros(ds.n), ones)
    new = m_step(p, cache, PenaltyLevel(0.0, 0.0), ds)
    obj = weibull_objective(ds.delta, ds.t, ones, ds.Xu, ds.Xp @ new.beta_p)
    ref = solve_l1_smooth(obj, 0.0, 0.0, np.zeros(2 + ds.Xu.shape[1]), tol=1e-11).x
    got = np.r_[np.log(new.alpha), np.log(new.gamma), new.beta_u]
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_theta_step_flags_upper_bound(rng):
    ds = random_dataset(rng, n=20)
    ds = make_dataset(ds.t, np.zeros(ds.n), ds.Zu, ds.Zp, ds.Xu, ds.Xp)
    p = random_params(rng, ds)
    ones = np.ones(ds.n)
    cache = EStepCache(np.full(ds.n, 0.5), ones, np.zeros(ds.n), np.full(ds.n, 0.5))
    new, _, flag = m_step_detailed(p, cache, PenaltyLevel(0.0, 0.0), ds)
    assert flag == "upper" and new.theta == 1e4


# ---------------------------------------------------------------------------
# fit_em
# ---------------------------------------------------------------------------


def test_infinite_tolerance_single_iteration(rng):
    ds, p = _small_problem(1)
    assert fit_em(ds, PenaltyLevel(0.01, 0.01), p, tol=np.inf).iterations == 1


def test_max_iter_is_not_an_error():
    ds, p = _small_problem(2)
    res = fit_em(ds, PenaltyLevel(0.01, 0.01), p, tol=1e-14, max_iter=3)
    assert res.iterations == 3 and not res.converged
    assert "max_iter" in " ".join(res.notes)


@pytest.mark.parametrize("seed", range(4))
def test_penalized_observed_objective_ascends(seed):
    ds, p = _small_problem(seed, n=60)
    res = fit_em(ds, PenaltyLevel(0.02, 0.02, 0.8), p, max_iter=40, record=True)
    diffs = np.diff(res.observed_trace)
    assert np.all(diffs >= -1e-8)
    assert res.observed_trace[-1] == pytest.approx(penalized_objective(res.params, ds, res.penalty), rel=1e-12)


def test_converged_trace_below_tolerance():
    ds, p = _small_problem(5, n=80)
    res = fit_em(ds, PenaltyLevel(0.05, 0.05), p, tol=1e-6, max_iter=2000, theta_step="observed")
    assert res.converged
    last, prev = np.array(res.objective_trace[-1]), np.array(res.objective_trace[-2])
    assert np.all(np.abs(last - prev) < 1e-6)


def test_near_lambda_max_gives_empty_support():
    truth = simulate(SimulationScenario(n=200, P=50, s=5, block_size=10, seed=11))
    ds, _ = standardize_penalized(truth.dataset)
    null = null_fit(ds, initialize(ds), theta_step="observed", solver_max_iter=50)
    lmax = lambda_max(ds, null.params, null.estep, 1.0)
    res = fit_em(ds, PenaltyLevel(1.01 * lmax, 1.01 * lmax), null.params, theta_step="observed")
    assert res.converged
    assert res.selected_support_b.size == 0 and res.selected_support_beta.size == 0


def test_fit_result_serialization():
    ds, p = _small_problem(3)
    d = fit_em(ds, PenaltyLevel(0.05, 0.05), p, max_iter=5).to_dict()
    assert set(d) == {
        "params", "estep", "iterations", "objective_trace", "converged",
        "selected_support_beta", "selected_support_b",
    }
    assert all(len(row) == 3 for row in d["objective_trace"])


# ---------------------------------------------------------------------------
# path
# ---------------------------------------------------------------------------


def _path_problem():
    truth = simulate(SimulationScenario(n=150, P=30, s=3, block_size=10, seed=4))
    ds, _ = standardize_penalized(truth.dataset)
    init = initialize(ds)
    null = null_fit(ds, init, theta_step="observed", solver_max_iter=20)
    return ds, null.params, lambda_max(ds, null.params, null.estep, 1.0)


def test_single_stage_path_and_weight_cap():
    ds, start, lmax = _path_problem()
    grid = lmax * np.array([1.0, 0.5, 0.25])
    one = fit_path(ds, PenaltyConfig(grid, stages=1), start, theta_step="observed", solver_max_iter=20)
    assert [(e.index, e.stage) for e in one.entries] == [(0, 1), (1, 1), (2, 1)]
    two = fit_path(ds, PenaltyConfig(grid, stages=2), start, theta_step="observed", solver_max_iter=20)
    assert [(e.index, e.stage) for e in two.entries] == [(i, k) for i in range(3) for k in (1, 2)]
    for i in range(3):
        s1, s2 = two.fit_at(i, 1), two.fit_at(i, 2)
        zero = s1.params.beta_p == 0
        assert np.all(s2.penalty.weights_beta[zero] == 1e6)
        assert np.all(s2.params.beta_p[zero] == 0)


def test_path_support_mostly_grows():
    ds, start, lmax = _path_problem()
    grid = lmax * np.geomspace(1.0, 0.05, 10)
    path = fit_path(ds, PenaltyConfig(grid, stages=1), start, theta_step="observed", solver_max_iter=20)
    sizes = [f.selected_support_b.size + f.selected_support_beta.size for f in path.final_fits()]
    grows = sum(b >= a for a, b in zip(sizes, sizes[1:]))
    assert grows >= 0.9 * (len(sizes) - 1)
    assert sizes[0] == 0 and sizes[-1] > 0


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def test_initialize_equal_times_fallback():
    ds = make_dataset([2.0, 2.0, 2.0, 5.0], [1, 1, 1, 0])
    p = initialize(ds)
    assert p.gamma == 1.0 and p.alpha == pytest.approx(0.5) and p.theta == 1.0


def test_initialize_moments_recover_weibull(rng):
    u = rng.uniform(size=5000)
    t = (-np.log(u) / 1.25) ** (1 / 2.5)
    p = initialize(make_dataset(t, np.ones(5000)))
    assert p.alpha == pytest.approx(1.25, rel=0.1)
    assert p.gamma == pytest.approx(2.5, rel=0.1)
    assert p.theta == 1.0


def test_initialize_zero_penalized_and_needs_events(rng):
    ds = random_dataset(rng, n=40)
    p = initialize(ds)
    assert np.all(p.b_p == 0) and np.all(p.beta_p == 0) and p.b0 == 0
    with pytest.raises(ValueError, match="two events"):
        initialize(make_dataset([1.0, 2.0, 3.0], [1, 0, 0]))
