"""Smooth-plus-L1 solvers and the objectives of the penalized M-step.

The solver is an orthant-wise limited-memory quasi-Newton method (OWL-QN,
Andrew & Gao 2007): L-BFGS directions computed from the pseudo-gradient,
restricted to the current orthant, with a projected backtracking line
search. Coordinates whose L1 weight is zero are left unconstrained, so the
same routine doubles as plain L-BFGS for the unpenalized sub-problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .special import digamma, log_gamma, trigamma

THETA_BOUNDS = (1e-4, 1e4)


class SolverError(RuntimeError):
    """Line-search failure or non-finite objective inside a solve."""


class DivergenceError(SolverError):
    """The objective is unbounded below for the supplied data."""


@dataclass(frozen=True)
class SmoothObjective:
    """Value-and-gradient oracle for the differentiable part of an objective."""

    fun: Callable[[np.ndarray], tuple[float, np.ndarray]]
    size: int

    def __call__(self, x):
        return self.fun(np.asarray(x, dtype=float))

    def value(self, x) -> float:
        return self.fun(np.asarray(x, dtype=float))[0]

    def grad(self, x) -> np.ndarray:
        return self.fun(np.asarray(x, dtype=float))[1]


@dataclass
class SolveResult:
    x: np.ndarray
    fun: float
    converged: bool
    n_iter: int
    max_pseudo_grad: float
    message: str = ""


def soft_threshold(z, thresh):
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)


def pseudo_gradient(x: np.ndarray, g: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Minimum-norm subgradient of ``f(x) + sum r_j |x_j|``."""
    pg = g + r * np.sign(x)
    at0 = x == 0
    if np.any(at0):
        gp, gm = g[at0] + r[at0], g[at0] - r[at0]
        pg[at0] = np.where(gp < 0, gp, np.where(gm > 0, gm, 0.0))
    return pg


def _two_loop(q: np.ndarray, S: list, Y: list, rho: list) -> np.ndarray:
    q = q.copy()
    alphas = []
    for s, y, rh in zip(reversed(S), reversed(Y), reversed(rho)):
        a = rh * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rh), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = rh * (y @ q)
        q += (a - b) * s
    return q


def solve_l1_smooth(
    obj: SmoothObjective,
    l1_weights,
    l1_scale: float,
    x0,
    tol: float = 1e-8,
    max_iter: int = 2000,
    memory: int = 10,
    strict: bool = False,
) -> SolveResult:
    """Minimize ``obj(x) + l1_scale * sum_j w_j |x_j|``.

    Stops when the sup-norm of the pseudo-gradient is below ``tol``, which is
    exactly the subgradient optimality certificate: ``|grad_j + r_j sign(x_j)|
    < tol`` for nonzero ``x_j`` and ``|grad_j| <= r_j + tol`` at zero.

    Every accepted step decreases the composite objective, so the returned
    point is never worse than ``x0``. If the line search stalls the best point
    is returned with ``converged=False``; ``strict=True`` raises instead.
    """
    x = np.array(x0, dtype=float, copy=True)
    r = float(l1_scale) * np.broadcast_to(np.asarray(l1_weights, dtype=float), x.shape)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("L1 weights must be finite and non-negative")
    pen = r > 0
    f, g = obj(x)
    F = f + float(r @ np.abs(x))
    if not np.isfinite(F) or not np.all(np.isfinite(g)):
        raise SolverError("non-finite objective at the starting point")
    S: list = []
    Y: list = []
    rho: list = []
    pg = pseudo_gradient(x, g, r)
    pg_max = float(np.max(np.abs(pg))) if pg.size else 0.0
    it = 0
    stall = 0
    msg = ""
    while pg_max >= tol and it < max_iter:
        it += 1
        if S:
            d = -_two_loop(pg, S, Y, rho)
        else:
            d = -pg / max(1.0, float(np.sum(np.abs(pg))))
        # keep the direction inside the orthant selected by -pg
        bad = pen & (d * pg >= 0)
        d[bad] = 0.0
        if d @ pg >= 0:
            S.clear(), Y.clear(), rho.clear()
            d = -pg / max(1.0, float(np.sum(np.abs(pg))))
        xi = np.where(x != 0, np.sign(x), -np.sign(pg))
        step = 1.0
        accepted = False
        for _ in range(60):
            xn = x + step * d
            flip = pen & (np.sign(xn) != xi)
            xn[flip] = 0.0
            fn, gn = obj(xn)
            Fn = fn + float(r @ np.abs(xn))
            if np.isfinite(Fn) and Fn <= F + 1e-4 * float(pg @ (xn - x)):
                accepted = True
                break
            step *= 0.5
        if not accepted or Fn > F:
            if S:
                S.clear(), Y.clear(), rho.clear()
                continue
            msg = "line search failed"
            if strict:
                raise SolverError(f"{msg} (max pseudo-gradient {pg_max:.3e})")
            break
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12 * np.sqrt(float(s @ s) * float(y @ y)):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        # the gradient cannot be resolved below its rounding floor; stop once
        # several accepted steps in a row leave F unchanged to ~machine precision
        stall = stall + 1 if F - Fn <= 1e-14 * max(1.0, abs(F)) else 0
        x, f, g, F = xn, fn, gn, Fn
        pg = pseudo_gradient(x, g, r)
        pg_max = float(np.max(np.abs(pg))) if pg.size else 0.0
        if stall >= 5 and pg_max >= tol:
            msg = "no further decrease"
            break
    if not np.all(np.isfinite(x)):
        raise SolverError("solver produced non-finite coefficients")
    return SolveResult(x, F, pg_max < tol, it, pg_max, msg)


# ---------------------------------------------------------------------------
# elastic-net penalty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyConfig:
    """Adaptive elastic-net settings shared by the incidence and latency blocks."""

    lambda_grid: np.ndarray
    alpha_enet: float = 1.0
    stages: int = 2
    weights_b: np.ndarray | None = None
    weights_beta: np.ndarray | None = None
    weight_cap: float = 1e6
    lambda_grid_beta: np.ndarray | None = None

    def __post_init__(self):
        grid = np.atleast_1d(np.asarray(self.lambda_grid, dtype=float))
        object.__setattr__(self, "lambda_grid", grid)
        if grid.size == 0:
            raise ValueError("lambda grid is empty")
        if np.any(grid < 0) or not np.all(np.isfinite(grid)):
            raise ValueError("lambda grid must be finite and non-negative")
        if grid.size > 1 and np.any(np.diff(grid) >= 0):
            raise ValueError("lambda grid must be strictly descending")
        if self.lambda_grid_beta is not None:
            gb = np.atleast_1d(np.asarray(self.lambda_grid_beta, dtype=float))
            if gb.shape != grid.shape:
                raise ValueError("separate latency lambda grid must match the incidence grid length")
            object.__setattr__(self, "lambda_grid_beta", gb)
        if not 0 <= self.alpha_enet <= 1:
            raise ValueError("alpha_enet must lie in [0, 1]")
        if self.stages not in (1, 2):
            raise ValueError("stages must be 1 or 2")
        for name in ("weights_b", "weights_beta"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=float)
                if not np.all(np.isfinite(w)) or np.any(w <= 0) or np.any(w > self.weight_cap):
                    raise ValueError(f"{name} must be positive, finite and at most weight_cap")
                object.__setattr__(self, name, w)

    def lambda_pair(self, i: int) -> tuple[float, float]:
        lam_b = float(self.lambda_grid[i])
        lam_beta = lam_b if self.lambda_grid_beta is None else float(self.lambda_grid_beta[i])
        return lam_b, lam_beta


def enet_penalty(coef, lam: float, alpha_enet: float, weights=None) -> float:
    coef = np.asarray(coef, dtype=float)
    if coef.size == 0 or lam == 0:
        return 0.0
    w = 1.0 if weights is None else np.asarray(weights, dtype=float)
    return float(lam * (0.5 * (1 - alpha_enet) * coef @ coef + alpha_enet * np.sum(w * np.abs(coef))))


def adaptive_weights(coef, cap: float = 1e6) -> np.ndarray:
    """Next-stage weights ``1/|coef|``, capped at ``cap`` (zeros get the cap)."""
    a = np.abs(np.asarray(coef, dtype=float))
    with np.errstate(divide="ignore"):
        w = np.where(a > 0, 1.0 / a, cap)
    return np.minimum(w, cap)


# ---------------------------------------------------------------------------
# smooth objectives
# ---------------------------------------------------------------------------


def logistic_objective(p, D, offset=None, ridge: float = 0.0, ridge_mask=None) -> SmoothObjective:
    """``-(1/n) sum[p_i eta_i - log(1+e^eta_i)] + ridge/2 ||b[mask]||^2``, eta = offset + D b."""
    p = np.asarray(p, dtype=float)
    D = np.asarray(D, dtype=float)
    n, k = D.shape
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    mask = np.ones(k) if ridge_mask is None else np.asarray(ridge_mask, dtype=float)
    rm = ridge * mask

    def fun(b):
        eta = off + D @ b
        val = -np.mean(p * eta - np.logaddexp(0.0, eta)) + 0.5 * float(b @ (rm * b))
        grad = -(D.T @ (p - expit(eta))) / n + rm * b
        return float(val), grad

    return SmoothObjective(fun, k)


def negloglik_incidence(p, Z, penalized_mask, lam: float = 0.0, alpha_enet: float = 1.0) -> SmoothObjective:
    """Smooth part of the negative penalized incidence objective.

    ``Z`` is the full incidence design ``(1, Z_u, Z_p)`` and
    ``penalized_mask`` flags the ``Z_p`` columns, which carry the ridge term
    ``lam * (1 - alpha_enet) / 2 * sum b_p^2``. Responses ``p`` may be
    fractional.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("responses must lie in [0, 1]")
    return logistic_objective(p, Z, None, lam * (1 - alpha_enet), penalized_mask)


def weibull_objective(
    delta,
    t,
    c,
    X,
    offset=None,
    ridge: float = 0.0,
    ridge_mask=None,
    log_alpha: float | None = None,
    log_gamma: float | None = None,
) -> SmoothObjective:
    """Negative expected latency log-likelihood with frailty offset ``log c``.

    Variables are ``[log alpha][log gamma] + beta``; passing ``log_alpha`` or
    ``log_gamma`` holds that parameter fixed and drops it from the vector.
    """
    delta = np.asarray(delta, dtype=float)
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=float)
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    if np.any(c < 0):
        raise ValueError("frailty offsets c must be non-negative")
    if np.all(c == 0) and np.any(delta > 0) and log_alpha is None:
        raise DivergenceError("all offsets c are zero: latency objective is unbounded below in alpha")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    mask = np.ones(k) if ridge_mask is None else np.asarray(ridge_mask, dtype=float)
    rm = ridge * mask
    log_t = np.log(t)
    free_a = log_alpha is None
    free_g = log_gamma is None
    n_head = int(free_a) + int(free_g)
    sum_delta = float(delta.sum())
    delta_log_t = float(delta @ log_t)

    def fun(v):
        i = 0
        la = v[i] if free_a else log_alpha
        i += free_a
        lg = v[i] if free_g else log_gamma
        beta = v[n_head:]
        gam = np.exp(lg)
        eta = off + X @ beta
        log_h = la + gam * log_t + eta
        A = c * np.exp(log_h)
        val = -(sum_delta * (la + lg) + (gam - 1.0) * delta_log_t + delta @ eta - A.sum()) / n
        val += 0.5 * float(beta @ (rm * beta))
        resid = delta - A
        grad = np.empty(v.shape[0])
        j = 0
        if free_a:
            grad[j] = -resid.sum() / n
            j += 1
        if free_g:
            grad[j] = -(sum_delta + gam * (resid @ log_t)) / n
        grad[n_head:] = -(X.T @ resid) / n + rm * beta
        return float(val), grad

    return SmoothObjective(fun, n_head + k)


def negloglik_latency(delta, t, c, X, penalized_mask, lam: float = 0.0, alpha_enet: float = 1.0) -> SmoothObjective:
    """Smooth part of the negative penalized latency objective over ``(log alpha, log gamma, beta)``."""
    return weibull_objective(delta, t, c, X, None, lam * (1 - alpha_enet), penalized_mask)


# ---------------------------------------------------------------------------
# frailty precision
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaResult:
    theta: float
    at_bound: str | None  # "upper" / "lower" / None
    stationarity: float


def theta_objective(theta: float, a, b, delta) -> float:
    """Per-subject mean of the expected frailty log-likelihood component."""
    a, b, delta = (np.asarray(v, dtype=float) for v in (a, b, delta))
    return float(np.mean((delta + theta - 1.0) * b - a * theta) + theta * np.log(theta) - log_gamma(theta))


def theta_score(theta: float, a, b) -> float:
    """Derivative of :func:`theta_objective` in ``theta``."""
    return float(np.mean(np.asarray(b) - np.asarray(a)) + np.log(theta) + 1.0 - digamma(theta))


def maximize_theta(a, b, delta, bounds=THETA_BOUNDS, tol: float = 1e-12) -> ThetaResult:
    """Maximize the frailty component over ``theta`` within ``bounds``.

    The score ``mean(b - a) + log(theta) + 1 - digamma(theta)`` is strictly
    decreasing, so the maximizer is unique; it is located by Newton steps on
    ``log(theta)`` safeguarded by bisection. A maximizer outside the bounds is
    returned as the bound and flagged.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("posterior frailty means must be positive")
    d = float(np.mean(np.asarray(b, dtype=float) - a))
    lo, hi = np.log(bounds[0]), np.log(bounds[1])

    def h(u):
        th = np.exp(u)
        return d + u + 1.0 - digamma(th)

    h_hi = h(hi)
    if h_hi >= 0:
        return ThetaResult(float(bounds[1]), "upper", h_hi)
    h_lo = h(lo)
    if h_lo <= 0:
        return ThetaResult(float(bounds[0]), "lower", h_lo)
    u = min(max(0.0, lo), hi)
    for _ in range(200):
        hu = h(u)
        if hu > 0:
            lo = u
        else:
            hi = u
        if abs(hu) < tol:
            break
        th = np.exp(u)
        slope = 1.0 - th * trigamma(th)  # < 0
        u_new = u - hu / slope if slope < 0 else 0.5 * (lo + hi)
        if not lo < u_new < hi:
            u_new = 0.5 * (lo + hi)
        if abs(u_new - u) < 1e-15 * max(1.0, abs(u)):
            u = u_new
            break
        u = u_new
    return ThetaResult(float(np.exp(u)), None, h(u))


# ---------------------------------------------------------------------------
# lambda path
# ---------------------------------------------------------------------------


def zero_gradients(ds, params, cache) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the two smooth objectives in the penalized blocks at zero.

    Returns ``(grad_b_p, grad_beta_p)`` with the unpenalized coefficients of
    ``params`` held fixed.
    """
    n = ds.n
    eta_z = params.b0 + ds.Zu @ params.b_u
    g_b = -(ds.Zp.T @ (cache.p - expit(eta_z))) / n
    H0 = params.alpha * np.power(ds.t, params.gamma) * np.exp(ds.Xu @ params.beta_u)
    g_beta = -(ds.Xp.T @ (ds.delta - cache.c * H0)) / n
    return g_b, g_beta


def lambda_max(ds, params, cache, alpha_enet: float) -> float:
    if not alpha_enet > 0:
        raise ValueError("alpha_enet must be positive: a pure ridge penalty has no finite lambda_max")
    g_b, g_beta = zero_gradients(ds, params, cache)
    m = max(np.max(np.abs(g_b), initial=0.0), np.max(np.abs(g_beta), initial=0.0))
    return float(m / alpha_enet)


def lambda_path(ds, params, cache, alpha_enet: float, n_values: int = 50, min_ratio: float = 0.01) -> np.ndarray:
    """Log-spaced descending grid from ``lambda_max`` down to ``min_ratio * lambda_max``."""
    lmax = lambda_max(ds, params, cache, alpha_enet)
    if not lmax > 0:
        raise ValueError("lambda_max is zero: penalized columns carry no gradient at zero")
    return log_grid(lmax, n_values, min_ratio)


def log_grid(lmax: float, n_values: int, min_ratio: float) -> np.ndarray:
    if n_values < 1:
        raise ValueError("n_values must be positive")
    if n_values == 1:
        return np.array([lmax])
    grid = np.exp(np.linspace(np.log(lmax), np.log(lmax * min_ratio), n_values))
    grid[0], grid[-1] = lmax, lmax * min_ratio
    return grid
