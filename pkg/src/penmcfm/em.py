"""EM fitting of the penalized mixture cure frailty model.

Each iteration computes the posterior expectations ``p = E[Y]``,
``a = E[W]``, ``b = E[log W]`` and ``c = E[WY]`` (E-step), then updates in
order: ``b_p`` (penalized logistic with fractional responses), ``beta_p``
(penalized Weibull regression with offset ``log c``), ``(b0, b_u)``,
``(alpha, gamma, beta_u)`` and finally ``theta``. Iteration stops when the
three expected-log-likelihood components (per subject) all change by less
than ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .data import SurvivalDataset
from .model import NonFiniteError, ParamSet, loglik_rows, observed_log_likelihood, row_terms
from .optim import (
    THETA_BOUNDS,
    PenaltyConfig,
    SolverError,
    adaptive_weights,
    enet_penalty,
    lambda_path,
    logistic_objective,
    maximize_theta,
    solve_l1_smooth,
    theta_objective,
    weibull_objective,
)
from .special import digamma, log_gamma

SUPPORT_EPS = 1e-12
DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 500
SOLVER_TOL = 1e-8
SOLVER_MAX_ITER = 2000
THETA_STEPS = ("expected", "observed")


class MStepError(RuntimeError):
    def __init__(self, substep: str, cause: Exception):
        super().__init__(f"M-step sub-step '{substep}' failed: {cause}")
        self.substep = substep


@dataclass(frozen=True)
class EStepCache:
    p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("p", "a", "b", "c")}


def e_step(params: ParamSet, ds: SurvivalDataset, terms=None) -> EStepCache:
    """Posterior expectations of ``Y``, ``W``, ``log W`` and ``WY`` per subject.

    In no-frailty mode ``W = 1`` so ``a = 1``, ``b = 0`` and ``c = p``.
    """
    r = terms if terms is not None else row_terms(params, ds)
    delta = ds.delta
    p = r.post
    if params.frailty_enabled:
        th = params.theta
        shape = delta + th
        c = shape / (th + r.H) * p
        a = c + shape / th * (1.0 - p)
        # psi(delta+theta) - log(theta) - p*log(1 + H/theta)
        b = digamma(shape) - np.log(th) - p * np.log1p(r.H / th)
    else:
        c = p.copy()
        a = np.ones_like(p)
        b = np.zeros_like(p)
    for name, arr in (("p", p), ("a", a), ("b", b), ("c", c)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteError(f"non-finite E-step expectation {name} at row {bad[0]}", row=int(bad[0]))
    return EStepCache(p, a, b, c)


@dataclass(frozen=True)
class PenaltyLevel:
    """One point of the penalty path: lambdas, mixing and adaptive weights."""

    lam_b: float
    lam_beta: float
    alpha_enet: float = 1.0
    weights_b: np.ndarray | None = None
    weights_beta: np.ndarray | None = None

    def pen_b(self, b_p) -> float:
        return enet_penalty(b_p, self.lam_b, self.alpha_enet, self.weights_b)

    def pen_beta(self, beta_p) -> float:
        return enet_penalty(beta_p, self.lam_beta, self.alpha_enet, self.weights_beta)

    def total(self, params: ParamSet) -> float:
        return self.pen_b(params.b_p) + self.pen_beta(params.beta_p)


UNPENALIZED = PenaltyLevel(0.0, 0.0)


def expected_components(params: ParamSet, ds: SurvivalDataset, cache: EStepCache, penalty: PenaltyLevel):
    """Per-subject penalized expected components ``(El_c1, El_c2, El_c3)``."""
    eta_z = params.b0 + ds.Zu @ params.b_u + ds.Zp @ params.b_p
    c1 = float(np.mean(cache.p * eta_z - np.logaddexp(0.0, eta_z))) - penalty.pen_b(params.b_p)
    eta_x = ds.Xu @ params.beta_u + ds.Xp @ params.beta_p
    log_t = np.log(ds.t)
    H = params.alpha * np.exp(params.gamma * log_t + eta_x)
    c2 = float(
        np.mean(ds.delta * (np.log(params.alpha * params.gamma) + (params.gamma - 1.0) * log_t + eta_x) - cache.c * H)
    ) - penalty.pen_beta(params.beta_p)
    c3 = theta_objective(params.theta, cache.a, cache.b, ds.delta) if params.frailty_enabled else 0.0
    return c1, c2, c3


def penalized_objective(params: ParamSet, ds: SurvivalDataset, penalty: PenaltyLevel) -> float:
    """Per-subject observed log-likelihood minus the elastic-net penalties."""
    return observed_log_likelihood(params, ds) / ds.n - penalty.total(params)


@dataclass
class SubStep:
    name: str
    before: float
    after: float


def _solve(name, obj, weights, scale, x0, tol, max_iter):
    try:
        return solve_l1_smooth(obj, weights, scale, x0, tol=tol, max_iter=max_iter)
    except SolverError as exc:
        raise MStepError(name, exc) from exc


def m_step_detailed(
    params: ParamSet,
    cache: EStepCache,
    penalty: PenaltyLevel,
    ds: SurvivalDataset,
    solver_tol: float = SOLVER_TOL,
    fix_penalized: bool = False,
    theta_step: str = "expected",
    solver_max_iter: int = SOLVER_MAX_ITER,
) -> tuple[ParamSet, list[SubStep], str | None]:
    """One conditional-maximization M-step; also returns per-sub-step values.

    ``theta_step="expected"`` maximizes the frailty component of the expected
    complete-data log-likelihood (plain EM). ``"observed"`` instead maximizes
    the observed log-likelihood over ``theta`` with everything else fixed,
    an ECME step that still never decreases the observed objective and
    usually needs far fewer iterations. The recorded values for that
    sub-step are then per-subject observed log-likelihoods.

    A small ``solver_max_iter`` gives a generalized EM step: each block is
    improved rather than fully maximized.
    """
    if theta_step not in THETA_STEPS:
        raise ValueError(f"theta_step must be one of {THETA_STEPS}")
    steps: list[SubStep] = []
    a_en = penalty.alpha_enet
    ones_n = np.ones((ds.n, 1))

    def comp(pr, k):
        return expected_components(pr, ds, cache, penalty)[k]

    # 1. b_p
    if ds.Zp.shape[1] and not fix_penalized:
        before = comp(params, 0)
        offset = params.b0 + ds.Zu @ params.b_u
        obj = logistic_objective(cache.p, ds.Zp, offset, penalty.lam_b * (1 - a_en))
        w = np.ones(ds.Zp.shape[1]) if penalty.weights_b is None else penalty.weights_b
        res = _solve("b_p", obj, w, penalty.lam_b * a_en, params.b_p, solver_tol, solver_max_iter)
        params = params.with_(b_p=res.x)
        steps.append(SubStep("b_p", before, comp(params, 0)))

    # 2. beta_p
    if ds.Xp.shape[1] and not fix_penalized:
        before = comp(params, 1)
        offset = ds.Xu @ params.beta_u
        try:
            obj = weibull_objective(
                ds.delta,
                ds.t,
                cache.c,
                ds.Xp,
                offset,
                penalty.lam_beta * (1 - a_en),
                log_alpha=np.log(params.alpha),
                log_gamma=np.log(params.gamma),
            )
        except SolverError as exc:
            raise MStepError("beta_p", exc) from exc
        w = np.ones(ds.Xp.shape[1]) if penalty.weights_beta is None else penalty.weights_beta
        res = _solve("beta_p", obj, w, penalty.lam_beta * a_en, params.beta_p, solver_tol, solver_max_iter)
        params = params.with_(beta_p=res.x)
        steps.append(SubStep("beta_p", before, comp(params, 1)))

    # 3. (b0, b_u) given b_p
    before = comp(params, 0)
    D = np.hstack([ones_n, ds.Zu])
    obj = logistic_objective(cache.p, D, ds.Zp @ params.b_p)
    x0 = np.concatenate(([params.b0], params.b_u))
    res = _solve("b0,b_u", obj, 0.0, 0.0, x0, solver_tol, solver_max_iter)
    params = params.with_(b0=res.x[0], b_u=res.x[1:])
    steps.append(SubStep("b0,b_u", before, comp(params, 0)))

    # 4. (alpha, gamma, beta_u) given c and beta_p
    before = comp(params, 1)
    try:
        obj = weibull_objective(ds.delta, ds.t, cache.c, ds.Xu, ds.Xp @ params.beta_p)
    except SolverError as exc:
        raise MStepError("alpha,gamma,beta_u", exc) from exc
    x0 = np.concatenate(([np.log(params.alpha), np.log(params.gamma)], params.beta_u))
    res = _solve("alpha,gamma,beta_u", obj, 0.0, 0.0, x0, solver_tol, solver_max_iter)
    params = params.with_(alpha=float(np.exp(res.x[0])), gamma=float(np.exp(res.x[1])), beta_u=res.x[2:])
    steps.append(SubStep("alpha,gamma,beta_u", before, comp(params, 1)))

    # 5. theta
    flag = None
    if params.frailty_enabled and theta_step == "observed":
        params, step, flag = _theta_observed(params, ds)
        steps.append(step)
    elif params.frailty_enabled:
        before = comp(params, 2)
        th = maximize_theta(cache.a, cache.b, ds.delta)
        cand = params.with_(theta=th.theta)
        after = comp(cand, 2)
        if after >= before:
            params = cand
            flag = th.at_bound
        else:
            after = before
        steps.append(SubStep("theta", before, after))
    return params, steps, flag


def _theta_observed(params: ParamSet, ds: SurvivalDataset):
    eta_z = params.b0 + ds.Zu @ params.b_u + ds.Zp @ params.b_p
    eta_x = ds.Xu @ params.beta_u + ds.Xp @ params.beta_p

    def negll(u):
        pr = params.with_(theta=float(np.exp(u)))
        return -float(np.sum(loglik_rows(pr, ds, row_terms(pr, ds, eta_z, eta_x)))) / ds.n

    lo, hi = np.log(THETA_BOUNDS[0]), np.log(THETA_BOUNDS[1])
    before = -negll(np.log(params.theta))
    res = minimize_scalar(negll, bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    if -res.fun > before:
        params = params.with_(theta=float(np.exp(res.x)))
        after = -float(res.fun)
    else:
        after = before
    u = np.log(params.theta)
    flag = "upper" if u > hi - 1e-6 else "lower" if u < lo + 1e-6 else None
    return params, SubStep("theta", before, after), flag


def m_step(
    params,
    cache,
    penalty,
    ds,
    solver_tol: float = SOLVER_TOL,
    fix_penalized: bool = False,
    theta_step: str = "expected",
    solver_max_iter: int = SOLVER_MAX_ITER,
) -> ParamSet:
    return m_step_detailed(params, cache, penalty, ds, solver_tol, fix_penalized, theta_step, solver_max_iter)[0]


def support(coef, eps: float = SUPPORT_EPS) -> np.ndarray:
    return np.flatnonzero(np.abs(np.asarray(coef)) > eps)


@dataclass
class FitResult:
    params: ParamSet
    estep: EStepCache
    iterations: int
    objective_trace: list[tuple[float, float, float]]
    converged: bool
    selected_support_beta: np.ndarray
    selected_support_b: np.ndarray
    penalty: PenaltyLevel | None = None
    theta_at_bound: str | None = None
    observed_trace: list[float] | None = None
    substeps: list[list[SubStep]] | None = None

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "estep": self.estep.to_dict(),
            "iterations": self.iterations,
            "objective_trace": [list(row) for row in self.objective_trace],
            "converged": self.converged,
            "selected_support_beta": [int(i) for i in self.selected_support_beta],
            "selected_support_b": [int(i) for i in self.selected_support_b],
        }

    @property
    def notes(self) -> list[str]:
        out = []
        if self.theta_at_bound == "upper":
            out.append("theta at upper bound: frailty variance ~ 0")
        elif self.theta_at_bound == "lower":
            out.append("theta at lower bound")
        if not self.converged:
            out.append("EM reached max_iter before convergence")
        return out


def fit_em(
    ds: SurvivalDataset,
    penalty: PenaltyLevel,
    init: ParamSet,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    solver_tol: float = SOLVER_TOL,
    fix_penalized: bool = False,
    record: bool = False,
    theta_step: str = "expected",
    solver_max_iter: int = SOLVER_MAX_ITER,
) -> FitResult:
    """Iterate E- and M-steps at a fixed penalty level.

    Convergence requires every component of :func:`expected_components` to
    change by less than ``tol`` between successive iterations (the first
    iteration is compared with the components at ``init``). Hitting
    ``max_iter`` returns ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    init.check(ds)
    params = init
    cache = e_step(params, ds)
    prev = expected_components(params, ds, cache, penalty)
    trace: list[tuple[float, float, float]] = []
    observed = [penalized_objective(params, ds, penalty)] if record else None
    subs: list[list[SubStep]] | None = [] if record else None
    converged = False
    flag = None
    it = 0
    while it < max_iter:
        it += 1
        if it > 1:
            cache = e_step(params, ds)
        params, steps, flag = m_step_detailed(
            params, cache, penalty, ds, solver_tol, fix_penalized, theta_step, solver_max_iter
        )
        cur = expected_components(params, ds, cache, penalty)
        trace.append(cur)
        if record:
            observed.append(penalized_objective(params, ds, penalty))
            subs.append(steps)
        if all(abs(x - y) < tol for x, y in zip(cur, prev)):
            converged = True
            break
        prev = cur
    final = e_step(params, ds)
    return FitResult(
        params=params,
        estep=final,
        iterations=it,
        objective_trace=trace,
        converged=converged,
        selected_support_beta=support(params.beta_p),
        selected_support_b=support(params.b_p),
        penalty=penalty,
        theta_at_bound=flag,
        observed_trace=observed,
        substeps=subs,
    )


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def weibull_moments(times) -> tuple[float, float]:
    """Method-of-moments ``(alpha, gamma)`` for ``S(t) = exp(-alpha t^gamma)``.

    Falls back to the exponential ``(1/mean, 1)`` when the sample has no
    spread or its coefficient of variation is outside the solvable range.
    """
    t = np.asarray(times, dtype=float)
    m = float(t.mean())
    v = float(t.var(ddof=1)) if t.size > 1 else 0.0
    cv2 = v / (m * m)

    def gap(lg):
        g = np.exp(lg)
        return np.exp(log_gamma(1 + 2 / g) - 2 * log_gamma(1 + 1 / g)) - 1.0 - cv2

    lo, hi = np.log(0.05), np.log(500.0)
    if not cv2 > 0 or not gap(lo) > 0 > gap(hi):
        return 1.0 / m, 1.0
    g = float(np.exp(brentq(gap, lo, hi, xtol=1e-12)))
    alpha = float(np.exp(g * (log_gamma(1 + 1 / g) - np.log(m))))
    return alpha, g


def initialize(ds: SurvivalDataset, frailty_enabled: bool = True) -> ParamSet:
    """Starting values: moment estimates for ``(alpha, gamma)``, ``theta = 1``,
    zero incidence and penalized latency coefficients, and ``beta_u`` from an
    unpenalized Weibull regression on the uncensored rows."""
    ev = ds.delta == 1
    if ev.sum() < 2:
        raise ValueError("at least two events are required to initialize")
    alpha, gamma = weibull_moments(ds.t[ev])
    base = ParamSet.zeros(ds, alpha, gamma, 1.0, frailty_enabled)
    if ds.Xu.shape[1] == 0:
        return base
    te, Xe = ds.t[ev], ds.Xu[ev]
    obj = weibull_objective(np.ones(te.size), te, np.ones(te.size), Xe)
    x0 = np.concatenate(([np.log(alpha), np.log(gamma)], np.zeros(Xe.shape[1])))
    res = solve_l1_smooth(obj, 0.0, 0.0, x0, tol=1e-9)
    return base.with_(beta_u=res.x[2:])


# ---------------------------------------------------------------------------
# penalty path
# ---------------------------------------------------------------------------


@dataclass
class PathEntry:
    index: int
    lam: float
    lam_beta: float
    stage: int
    fit: FitResult


@dataclass
class PathResult:
    entries: list[PathEntry]
    config: PenaltyConfig

    def fit_at(self, index: int, stage: int | None = None) -> FitResult:
        stage = self.config.stages if stage is None else stage
        for e in self.entries:
            if e.index == index and e.stage == stage:
                return e.fit
        raise KeyError((index, stage))

    def final_fits(self) -> list[FitResult]:
        """Fits of the last stage, one per grid point, in grid order."""
        return [self.fit_at(i) for i in range(self.config.lambda_grid.size)]

    def to_dict(self) -> dict:
        return {
            "config": {
                "lambda_grid": self.config.lambda_grid.tolist(),
                "alpha_enet": self.config.alpha_enet,
                "stages": self.config.stages,
                "weight_cap": self.config.weight_cap,
            },
            "entries": [
                {"index": e.index, "lambda": e.lam, "lambda_beta": e.lam_beta, "stage": e.stage, "fit": e.fit.to_dict()}
                for e in self.entries
            ],
        }


def fit_path(
    ds: SurvivalDataset,
    config: PenaltyConfig,
    init: ParamSet,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    solver_tol: float = SOLVER_TOL,
    warm_start: bool = True,
    stop_index: int | None = None,
    theta_step: str = "expected",
    solver_max_iter: int = SOLVER_MAX_ITER,
) -> PathResult:
    """Fit every grid point; stage 2 re-fits with weights ``1/|stage-1 coef|``.

    Adaptive weights are recomputed at every lambda from that lambda's
    stage-1 solution. Stage-1 fits are warm-started from the previous
    lambda, stage-2 fits from the stage-1 fit at the same lambda.
    ``stop_index`` truncates the path after that grid index.
    """
    grid = config.lambda_grid
    last = grid.size - 1 if stop_index is None else min(stop_index, grid.size - 1)
    wb1 = np.ones(ds.Zp.shape[1]) if config.weights_b is None else config.weights_b
    wbeta1 = np.ones(ds.Xp.shape[1]) if config.weights_beta is None else config.weights_beta
    entries: list[PathEntry] = []
    start = init
    for i in range(last + 1):
        lam_b, lam_beta = config.lambda_pair(i)
        lvl1 = PenaltyLevel(lam_b, lam_beta, config.alpha_enet, wb1, wbeta1)
        fit1 = fit_em(ds, lvl1, start if warm_start else init, tol, max_iter, solver_tol, theta_step=theta_step, solver_max_iter=solver_max_iter)
        entries.append(PathEntry(i, lam_b, lam_beta, 1, fit1))
        if config.stages == 2:
            lvl2 = PenaltyLevel(
                lam_b,
                lam_beta,
                config.alpha_enet,
                adaptive_weights(fit1.params.b_p, config.weight_cap),
                adaptive_weights(fit1.params.beta_p, config.weight_cap),
            )
            fit2 = fit_em(ds, lvl2, fit1.params, tol, max_iter, solver_tol, theta_step=theta_step, solver_max_iter=solver_max_iter)
            entries.append(PathEntry(i, lam_b, lam_beta, 2, fit2))
        start = fit1.params
    return PathResult(entries, config)


def null_fit(
    ds: SurvivalDataset,
    init: ParamSet,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    theta_step: str = "expected",
    solver_max_iter: int = SOLVER_MAX_ITER,
) -> FitResult:
    """EM fit with every penalized coefficient held at zero."""
    zero = init.with_(b_p=np.zeros_like(init.b_p), beta_p=np.zeros_like(init.beta_p))
    return fit_em(
        ds, UNPENALIZED, zero, tol, max_iter, fix_penalized=True, theta_step=theta_step, solver_max_iter=solver_max_iter
    )


def default_lambda_grid(
    ds: SurvivalDataset,
    alpha_enet: float,
    init: ParamSet | None = None,
    n_values: int = 50,
    min_ratio: float = 0.01,
    null: FitResult | None = None,
    theta_step: str = "expected",
) -> tuple[np.ndarray, FitResult]:
    """Grid anchored at ``lambda_max`` of the null (all-penalized-zero) EM fit."""
    if null is None:
        null = null_fit(ds, init if init is not None else initialize(ds), theta_step=theta_step)
    grid = lambda_path(ds, null.params, null.estep, alpha_enet, n_values, min_ratio)
    return grid, null
