import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect

from helpers import cd_penalized_logistic, central_difference, random_dataset, random_params
from penmcfm.data import make_dataset
from penmcfm.em import e_step
from penmcfm.optim import (
    DivergenceError,
    PenaltyConfig,
    SmoothObjective,
    adaptive_weights,
    lambda_max,
    lambda_path,
    log_grid,
    logistic_objective,
    maximize_theta,
    negloglik_incidence,
    negloglik_latency,
    pseudo_gradient,
    soft_threshold,
    solve_l1_smooth,
    theta_score,
    weibull_objective,
)
from penmcfm.special import digamma


def quadratic(center):
    center = np.asarray(center, dtype=float)
    return SmoothObjective(lambda x: (0.5 * float((x - center) @ (x - center)), x - center), center.size)


def assert_certificate(obj, x, r, tol):
    g = obj.grad(x)
    nz = x != 0
    assert np.all(np.abs(g[nz] + r[nz] * np.sign(x[nz])) < tol)
    assert np.all(np.abs(g[~nz]) <= r[~nz] + tol)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def test_scalar_quadratic_soft_threshold():
    assert solve_l1_smooth(quadratic([3.0]), 1.0, 1.0, [0.0]).x[0] == pytest.approx(2.0, abs=1e-8)
    assert solve_l1_smooth(quadratic([3.0]), 1.0, 5.0, [1.0]).x[0] == 0.0


def test_soft_threshold_and_pseudo_gradient():
    np.testing.assert_array_equal(soft_threshold([3.0, -3.0, 0.5], 1.0), [2.0, -2.0, 0.0])
    pg = pseudo_gradient(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.5, 2.0, -2.0, 0.5]), np.ones(4))
    np.testing.assert_array_equal(pg, [0.0, 1.0, -1.0, 1.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_certificate_at_return(seed):
    rng = np.random.default_rng(seed)
    n, k = 40, 6
    D = rng.standard_normal((n, k))
    p = rng.uniform(size=n)
    obj = logistic_objective(p, D, ridge=rng.uniform(0, 0.1))
    w = rng.uniform(0.5, 2.0, size=k)
    scale = rng.uniform(0, 0.2)
    res = solve_l1_smooth(obj, w, scale, rng.standard_normal(k), tol=1e-8)
    assert res.converged
    assert_certificate(obj, res.x, scale * w, 1e-8)


def test_composite_never_increases(rng):
    D = rng.standard_normal((30, 5))
    obj = logistic_objective(rng.uniform(size=30), D)
    x0 = rng.standard_normal(5)
    res = solve_l1_smooth(obj, 1.0, 0.05, x0, max_iter=3)
    assert res.fun <= obj.value(x0) + 0.05 * np.abs(x0).sum()


def test_lasso_logistic_matches_coordinate_descent(rng):
    n, k = 50, 10
    Z = rng.standard_normal((n, k))
    b_true = np.zeros(k)
    b_true[:3] = (1.5, -1.0, 0.8)
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-(0.3 + Z @ b_true)))).astype(float)
    D = np.hstack([np.ones((n, 1)), Z])
    mask = np.r_[0.0, np.ones(k)]
    lam_max = np.max(np.abs(Z.T @ (y - y.mean()))) / n
    lam = 0.2 * lam_max
    ours = solve_l1_smooth(logistic_objective(y, D), mask, lam, np.zeros(k + 1), tol=1e-11).x
    oracle = cd_penalized_logistic(y, D, lam, mask.astype(bool))
    assert np.count_nonzero(oracle[1:]) not in (0, k)
    assert np.max(np.abs(ours - oracle)) < 1e-5
    np.testing.assert_array_equal(ours[1:] == 0, oracle[1:] == 0)


# ---------------------------------------------------------------------------
# smooth objectives
# ---------------------------------------------------------------------------


def test_incidence_at_origin(rng):
    n = 20
    Z = np.hstack([np.ones((n, 1)), rng.standard_normal((n, 3))])
    p = rng.uniform(size=n)
    obj = negloglik_incidence(p, Z, np.r_[0, 1, 1, 1])
    val, grad = obj(np.zeros(4))
    assert val == pytest.approx(np.log(2), rel=1e-15)
    np.testing.assert_allclose(grad, -(Z.T @ (p - 0.5)) / n, rtol=1e-14)


def test_incidence_binary_reduction(rng):
    n = 25
    Z = np.hstack([np.ones((n, 1)), rng.standard_normal((n, 2))])
    y = (rng.uniform(size=n) < 0.5).astype(float)
    b = rng.standard_normal(3)
    eta = Z @ b
    nll = -np.mean(np.where(y == 1, -np.log1p(np.exp(-eta)), -np.log1p(np.exp(eta))))
    assert negloglik_incidence(y, Z, np.zeros(3)).value(b) == pytest.approx(nll, rel=1e-13)


def test_incidence_ridge_only_on_penalized(rng):
    Z = np.hstack([np.ones((10, 1)), rng.standard_normal((10, 2))])
    p = rng.uniform(size=10)
    b = np.array([2.0, 1.0, -1.0])
    plain = negloglik_incidence(p, Z, np.r_[0, 1, 1]).value(b)
    ridged = negloglik_incidence(p, Z, np.r_[0, 1, 1], lam=0.4, alpha_enet=0.5).value(b)
    assert ridged - plain == pytest.approx(0.4 * 0.5 / 2 * 2.0, rel=1e-13)


def test_incidence_rejects_bad_responses():
    with pytest.raises(ValueError):
        negloglik_incidence([1.2], np.ones((1, 1)), [0])


def _max_rel_fd_error(obj, points):
    worst = 0.0
    for x in points:
        g = obj.grad(x)
        fd = central_difference(obj.value, x)
        worst = max(worst, np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)))
    return worst


def test_incidence_gradient_finite_differences(rng):
    n = 60
    Z = np.hstack([np.ones((n, 1)), rng.standard_normal((n, 4))])
    obj = negloglik_incidence(rng.uniform(size=n), Z, np.r_[0, 1, 1, 1, 1], lam=0.3, alpha_enet=0.4)
    assert _max_rel_fd_error(obj, rng.standard_normal((20, 5))) < 1e-6


def test_latency_gradient_finite_differences(rng):
    n = 60
    X = rng.standard_normal((n, 4))
    obj = negloglik_latency(
        (rng.uniform(size=n) < 0.6).astype(float),
        rng.uniform(0.1, 3, n),
        rng.uniform(0, 2, n),
        X,
        np.r_[0, 0, 1, 1],
        lam=0.3,
        alpha_enet=0.4,
    )
    pts = np.hstack([rng.uniform(-1, 1, (20, 2)), 0.3 * rng.standard_normal((20, 4))])
    assert _max_rel_fd_error(obj, pts) < 1e-6


def test_latency_all_zero_offsets_diverge():
    with pytest.raises(DivergenceError):
        negloglik_latency([1.0, 1.0], [1.0, 2.0], [0.0, 0.0], np.zeros((2, 0)), [])


def test_latency_exponential_mle():
    obj = weibull_objective([1.0], [2.5], [1.0], np.zeros((1, 0)), log_gamma=0.0)
    res = solve_l1_smooth(obj, 0.0, 0.0, [0.0], tol=1e-12)
    assert np.exp(res.x[0]) == pytest.approx(1 / 2.5, rel=1e-10)


# ---------------------------------------------------------------------------
# theta
# ---------------------------------------------------------------------------


def test_theta_interior_root_matches_bisection():
    n = 10
    a = np.full(n, 1.2)
    b = np.zeros(n)
    res = maximize_theta(a, b, np.zeros(n))
    assert res.at_bound is None
    oracle = np.exp(bisect(lambda u: -1.2 + u + 1 - digamma(np.exp(u)), -9, 9, xtol=1e-15, rtol=1e-15))
    assert res.theta == pytest.approx(oracle, rel=1e-10)
    assert abs(theta_score(res.theta, a, b)) < 1e-8


def test_theta_unit_mean_gap_has_no_interior_root():
    # log(theta) + 1 - digamma(theta) = 1 would need log(theta) = digamma(theta),
    # but log(theta) - digamma(theta) > 1/(2 theta) > 0; the maximizer is the upper bound
    a = np.ones(5)
    res = maximize_theta(a, np.zeros(5), np.zeros(5))
    assert res.at_bound == "upper" and res.theta == 1e4
    th = np.geomspace(1e-4, 1e4, 400)
    assert np.all(np.log(th) - digamma(th) > 0)


def test_theta_equal_a_b_hits_upper_bound(rng):
    a = rng.uniform(0.5, 2.0, 8)
    res = maximize_theta(a, a, np.zeros(8))
    assert res.at_bound == "upper" and res.theta == 1e4


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_theta_bounds_respected(seed):
    rng = np.random.default_rng(seed)
    n = 12
    a = rng.uniform(0.01, 5, n)
    b = rng.normal(-1, 2, n)
    res = maximize_theta(a, b, np.zeros(n), bounds=(1e-4, 1e4))
    assert 1e-4 <= res.theta <= 1e4
    if res.at_bound is None:
        assert abs(res.stationarity) < 1e-8


# ---------------------------------------------------------------------------
# penalties and lambda path
# ---------------------------------------------------------------------------


def test_log_grid_construction():
    g = log_grid(3.7, 50, 0.01)
    assert g.size == 50
    assert g[0] == 3.7 and g[-1] == 3.7 * 0.01
    assert np.all(np.diff(g) < 0)
    np.testing.assert_allclose(np.diff(np.log(g)), np.log(0.01) / 49, rtol=1e-10)


def _null_state(rng, scale=1.0):
    ds = random_dataset(rng, n=80, p1p=4, p2p=5)
    p = random_params(rng, ds)
    p = p.with_(b_p=np.zeros(4), beta_p=np.zeros(5))
    if scale != 1.0:
        ds = make_dataset(ds.t, ds.delta, ds.Zu, scale * ds.Zp, ds.Xu, scale * ds.Xp)
    return ds, p, e_step(p, ds)


@pytest.mark.parametrize("alpha_enet", [1.0, 0.5])
def test_zero_solution_at_lambda_max(rng, alpha_enet):
    ds, p, cache = _null_state(rng)
    lmax = lambda_max(ds, p, cache, alpha_enet)
    inc = logistic_objective(cache.p, ds.Zp, p.b0 + ds.Zu @ p.b_u, lmax * (1 - alpha_enet))
    res = solve_l1_smooth(inc, 1.0, lmax * alpha_enet, np.full(4, 0.3), tol=1e-10)
    assert np.all(res.x == 0)
    lat = weibull_objective(
        ds.delta, ds.t, cache.c, ds.Xp, ds.Xu @ p.beta_u, lmax * (1 - alpha_enet),
        log_alpha=np.log(p.alpha), log_gamma=np.log(p.gamma),
    )
    res = solve_l1_smooth(lat, 1.0, lmax * alpha_enet, np.full(5, 0.3), tol=1e-10)
    assert np.all(res.x == 0)
    # slightly below lambda_max something enters
    res_b = solve_l1_smooth(inc, 1.0, 0.9 * lmax * alpha_enet, np.zeros(4), tol=1e-10)
    res_x = solve_l1_smooth(lat, 1.0, 0.9 * lmax * alpha_enet, np.zeros(5), tol=1e-10)
    assert np.any(res_b.x != 0) or np.any(res_x.x != 0)


def test_doubling_column_scale_doubles_lambda_path():
    a = _null_state(np.random.default_rng(3))
    b = _null_state(np.random.default_rng(3), scale=2.0)
    ga = lambda_path(*a, 1.0, 10, 0.05)
    gb = lambda_path(*b, 1.0, 10, 0.05)
    np.testing.assert_allclose(gb, 2 * ga, rtol=1e-13)


def test_pure_ridge_has_no_lambda_max(rng):
    ds, p, cache = _null_state(rng)
    with pytest.raises(ValueError):
        lambda_max(ds, p, cache, 0.0)


def test_adaptive_weights_cap():
    np.testing.assert_array_equal(adaptive_weights([0.0, 0.5, -2.0, 1e-9]), [1e6, 2.0, 0.5, 1e6])


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig([1.0, 2.0])
    with pytest.raises(ValueError):
        PenaltyConfig([])
    with pytest.raises(ValueError):
        PenaltyConfig([1.0], stages=3)
    with pytest.raises(ValueError):
        PenaltyConfig([1.0], weights_b=[2e6])
    assert PenaltyConfig([2.0, 1.0], lambda_grid_beta=[4.0, 3.0]).lambda_pair(1) == (1.0, 3.0)
