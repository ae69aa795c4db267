"""Generalized monotone incremental forward stagewise (GMIFS) fitting.

Every penalized coefficient is split into non-negative parts ``pos - neg``.
Each step adds ``epsilon`` to the single expanded coordinate along which the
negative observed log-likelihood decreases fastest, so every expanded
coordinate is non-decreasing along the path. Every ``refresh_every`` steps the
unpenalized parameters are re-maximized with L-BFGS-B. The reported model is
the step with the smallest AIC.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .data import SurvivalDataset
from .em import initialize
from .model import NonFiniteError, ParamSet, loglik_rows, observed_gradient, row_terms
from .optim import THETA_BOUNDS

DEFAULT_EPSILON = 1e-3
DEFAULT_REFRESH = 10
CYCLE_TOL = 1e-8


@dataclass
class StagewiseState:
    """Path state: expanded coefficients, unpenalized parameters and traces.

    ``moves[k]`` records the increment of step ``k + 1`` as
    ``(block, index, sign)`` with block 0 for ``b_p`` and 1 for ``beta_p``.
    ``unpen_trace[k]`` holds the unpenalized parameters in effect at step ``k``.
    """

    epsilon: float
    pos_b: np.ndarray
    neg_b: np.ndarray
    pos_beta: np.ndarray
    neg_beta: np.ndarray
    params: ParamSet
    step: int = 0
    loglik_trace: list[float] = field(default_factory=list)
    moves: list[tuple[int, int, int]] = field(default_factory=list)
    unpen_trace: list[ParamSet] = field(default_factory=list)
    cycle_loglik: list[float] = field(default_factory=list)
    stop_reason: str = ""

    def n_unpenalized(self) -> int:
        p = self.params
        return 2 + int(p.frailty_enabled) + p.beta_u.size + 1 + p.b_u.size


@dataclass
class GmifsResult:
    state: StagewiseState
    selected_step: int
    params: ParamSet
    aic: np.ndarray

    @property
    def selected_support_b(self) -> np.ndarray:
        return np.flatnonzero(self.params.b_p != 0)

    @property
    def selected_support_beta(self) -> np.ndarray:
        return np.flatnonzero(self.params.beta_p != 0)


# unpenalized parameter vector: [log a, log g, (log theta), beta_u, b0, b_u]


def _pack(p: ParamSet) -> np.ndarray:
    head = [np.log(p.alpha), np.log(p.gamma)] + ([np.log(p.theta)] if p.frailty_enabled else [])
    return np.concatenate([head, p.beta_u, [p.b0], p.b_u])


def _unpack(v: np.ndarray, p: ParamSet) -> ParamSet:
    k = 3 if p.frailty_enabled else 2
    nu = p.beta_u.size
    return p.with_(
        alpha=float(np.exp(v[0])),
        gamma=float(np.exp(v[1])),
        theta=float(np.exp(v[2])) if p.frailty_enabled else p.theta,
        beta_u=v[k : k + nu],
        b0=float(v[k + nu]),
        b_u=v[k + nu + 1 :],
    )


def refresh_unpenalized(params: ParamSet, ds: SurvivalDataset) -> ParamSet:
    """Maximize the observed log-likelihood over the unpenalized parameters."""
    n = ds.n
    eta_zp = ds.Zp @ params.b_p
    eta_xp = ds.Xp @ params.beta_p

    def fun(v):
        p = _unpack(v, params)
        eta_z = p.b0 + ds.Zu @ p.b_u + eta_zp
        eta_x = ds.Xu @ p.beta_u + eta_xp
        with np.errstate(over="ignore", invalid="ignore"):
            r = row_terms(p, ds, eta_z, eta_x)
            ll = float(np.sum(loglik_rows(p, ds, r)))
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(v)
        with np.errstate(over="ignore", invalid="ignore"):
            g = observed_gradient(p, ds, r)
        head = [g.log_alpha, g.log_gamma] + ([g.log_theta] if p.frailty_enabled else [])
        grad = np.concatenate([head, g.beta_u, [g.b0], g.b_u])
        if not np.all(np.isfinite(grad)):
            return np.inf, np.zeros_like(v)
        return -ll / n, -grad / n

    v0 = _pack(params)
    bounds = [(None, None)] * v0.size
    if params.frailty_enabled:
        bounds[2] = (np.log(THETA_BOUNDS[0]), np.log(THETA_BOUNDS[1]))
        v0[2] = np.clip(v0[2], *bounds[2])
    f0 = fun(v0)[0]
    res = minimize(fun, v0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": 500, "ftol": 1e-13, "gtol": 1e-9})
    if np.isfinite(res.fun) and res.fun <= f0 and np.all(np.isfinite(res.x)):
        try:
            return _unpack(res.x, params)
        except ValueError:  # exp overflow in a scale parameter
            pass
    return params


def _loglik(params: ParamSet, ds: SurvivalDataset, eta_z, eta_x):
    r = row_terms(params, ds, eta_z, eta_x)
    return float(np.sum(loglik_rows(params, ds, r))), r


def gmifs_fit(
    ds: SurvivalDataset,
    epsilon: float = DEFAULT_EPSILON,
    max_steps: int = 5000,
    frailty_enabled: bool = True,
    refresh_every: int = DEFAULT_REFRESH,
    init: ParamSet | None = None,
) -> GmifsResult:
    """Run GMIFS on the observed log-likelihood and select the minimum-AIC step.

    Stops after ``max_steps`` increments or when a refresh cycle improves the
    log-likelihood by less than ``1e-8``; such a cycle is discarded, so the
    log-likelihood at cycle boundaries never decreases.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if refresh_every < 1 or max_steps < 0:
        raise ValueError("refresh_every must be >= 1 and max_steps >= 0")
    if init is None:
        init = initialize(ds, frailty_enabled)
    start = init.with_(
        b_p=np.zeros(ds.Zp.shape[1]),
        beta_p=np.zeros(ds.Xp.shape[1]),
        frailty_enabled=frailty_enabled,
        theta=init.theta if frailty_enabled else 1.0,
    )
    params = refresh_unpenalized(start, ds)
    eta_z = params.b0 + ds.Zu @ params.b_u
    eta_x = ds.Xu @ params.beta_u
    ll, terms = _loglik(params, ds, eta_z, eta_x)
    if not np.isfinite(ll):
        raise NonFiniteError("non-finite log-likelihood at step 0")
    p1, p2 = ds.Zp.shape[1], ds.Xp.shape[1]
    st = StagewiseState(epsilon, np.zeros(p1), np.zeros(p1), np.zeros(p2), np.zeros(p2), params)
    st.loglik_trace.append(ll)
    st.unpen_trace.append(params)
    st.cycle_loglik.append(ll)
    if p1 + p2 == 0:
        st.stop_reason = "no penalized coordinates"
        return _select(st, ds)

    b_p = np.zeros(p1)
    beta_p = np.zeros(p2)
    saved = None
    while st.step < max_steps:
        if st.step % refresh_every == 0:
            saved = (b_p.copy(), beta_p.copy(), eta_z.copy(), eta_x.copy(), params, len(st.moves))
        g = observed_gradient(params, ds, terms)
        grads = np.concatenate([g.b_p, g.beta_p])
        j = int(np.argmax(np.abs(grads)))
        if grads[j] == 0:
            st.stop_reason = "zero gradient"
            break
        sign = 1 if grads[j] > 0 else -1
        if j < p1:
            block, idx = 0, j
            b_p[idx] += sign * epsilon
            eta_z = eta_z + sign * epsilon * ds.Zp[:, idx]
            (st.pos_b if sign > 0 else st.neg_b)[idx] += epsilon
        else:
            block, idx = 1, j - p1
            beta_p[idx] += sign * epsilon
            eta_x = eta_x + sign * epsilon * ds.Xp[:, idx]
            (st.pos_beta if sign > 0 else st.neg_beta)[idx] += epsilon
        st.moves.append((block, idx, sign))
        st.step += 1
        params = params.with_(b_p=b_p.copy(), beta_p=beta_p.copy())
        if st.step % refresh_every == 0:
            params = refresh_unpenalized(params, ds)
            eta_z = params.b0 + ds.Zu @ params.b_u + ds.Zp @ b_p
            eta_x = ds.Xu @ params.beta_u + ds.Xp @ beta_p
        ll, terms = _loglik(params, ds, eta_z, eta_x)
        if not np.isfinite(ll):
            raise NonFiniteError(f"non-finite log-likelihood at step {st.step}")
        st.loglik_trace.append(ll)
        st.unpen_trace.append(params)
        if st.step % refresh_every == 0:
            if ll - st.cycle_loglik[-1] < CYCLE_TOL:
                _revert(st, saved, refresh_every)
                st.stop_reason = "refresh cycle improved the log-likelihood by less than 1e-8"
                break
            st.cycle_loglik.append(ll)
    else:
        st.stop_reason = "max_steps reached"
    st.params = st.unpen_trace[-1].with_(b_p=st.pos_b - st.neg_b, beta_p=st.pos_beta - st.neg_beta)
    return _select(st, ds)


def _revert(st: StagewiseState, saved, refresh_every: int) -> None:
    n_moves = saved[5]
    for block, idx, sign in st.moves[n_moves:]:
        if block == 0:
            (st.pos_b if sign > 0 else st.neg_b)[idx] -= st.epsilon
        else:
            (st.pos_beta if sign > 0 else st.neg_beta)[idx] -= st.epsilon
    del st.moves[n_moves:]
    del st.loglik_trace[n_moves + 1 :]
    del st.unpen_trace[n_moves + 1 :]
    st.step = n_moves
    # undo rounding drift from the subtraction
    for arr in (st.pos_b, st.neg_b, st.pos_beta, st.neg_beta):
        np.maximum(arr, 0.0, out=arr)
        arr[arr < 0.5 * st.epsilon] = 0.0


def gmifs_path_coefficients(state: StagewiseState, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Effective ``(b_p, beta_p)`` after ``step`` increments."""
    if not 0 <= step <= state.step:
        raise ValueError(f"step {step} outside [0, {state.step}]")
    p1, p2 = state.pos_b.size, state.pos_beta.size
    counts = np.zeros((2, 2, max(p1, p2, 1)), dtype=np.int64)
    for block, idx, sign in state.moves[:step]:
        counts[block, 0 if sign > 0 else 1, idx] += 1
    b = (counts[0, 0, :p1] - counts[0, 1, :p1]) * state.epsilon
    beta = (counts[1, 0, :p2] - counts[1, 1, :p2]) * state.epsilon
    return b.astype(float), beta.astype(float)


def _expanded_arrays(state: StagewiseState) -> np.ndarray:
    """Expanded coordinates at every step, shape ``(steps + 1, 2 * (p1 + p2))``.

    Column order is ``pos_b, neg_b, pos_beta, neg_beta``; every column is
    non-decreasing by construction.
    """
    p1, p2 = state.pos_b.size, state.pos_beta.size
    offsets = {(0, 1): 0, (0, -1): p1, (1, 1): 2 * p1, (1, -1): 2 * p1 + p2}
    out = np.zeros((state.step + 1, 2 * (p1 + p2)))
    cur = np.zeros(2 * (p1 + p2), dtype=np.int64)
    for k, (block, idx, sign) in enumerate(state.moves[: state.step], start=1):
        cur[offsets[block, sign] + idx] += 1
        out[k] = cur
    return out * state.epsilon


def _path_arrays(state: StagewiseState):
    """Effective coefficients at every step, shape ``(steps + 1, p1 + p2)``."""
    p1, p2 = state.pos_b.size, state.pos_beta.size
    e = _expanded_arrays(state)
    return np.hstack([e[:, :p1] - e[:, p1 : 2 * p1], e[:, 2 * p1 : 2 * p1 + p2] - e[:, 2 * p1 + p2 :]])


def _select(st: StagewiseState, ds: SurvivalDataset) -> GmifsResult:
    path = _path_arrays(st)
    df = np.count_nonzero(path, axis=1) + st.n_unpenalized()
    ll = np.asarray(st.loglik_trace[: st.step + 1])
    aic = -2.0 * ll + 2.0 * df
    best = int(np.argmin(aic))
    p1 = st.pos_b.size
    b, beta = path[best, :p1], path[best, p1:]
    params = st.unpen_trace[best].with_(b_p=b.copy(), beta_p=beta.copy())
    return GmifsResult(st, best, params, aic)


def write_path_csv(result: GmifsResult, path, names_b=None, names_beta=None, every: int = 1) -> None:
    """CSV with ``step, loglik, aic``, the expanded coordinates, then the signed coefficients.

    Expanded columns are named ``b_p+:<name>``, ``b_p-:<name>``,
    ``beta_p+:<name>`` and ``beta_p-:<name>``; signed ones ``b_p:<name>`` and
    ``beta_p:<name>``.
    """
    st = result.state
    p1, p2 = st.pos_b.size, st.pos_beta.size
    names_b = list(names_b) if names_b else [f"b_p[{j}]" for j in range(p1)]
    names_beta = list(names_beta) if names_beta else [f"beta_p[{j}]" for j in range(p2)]
    expanded = _expanded_arrays(st)
    coefs = _path_arrays(st)
    head = ["step", "loglik", "aic"]
    head += [f"b_p+:{x}" for x in names_b] + [f"b_p-:{x}" for x in names_b]
    head += [f"beta_p+:{x}" for x in names_beta] + [f"beta_p-:{x}" for x in names_beta]
    head += [f"b_p:{x}" for x in names_b] + [f"beta_p:{x}" for x in names_beta]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for k in range(0, st.step + 1):
            if k % every and k != st.step:
                continue
            vals = [repr(float(v)) for v in expanded[k]] + [repr(float(v)) for v in coefs[k]]
            w.writerow([k, repr(st.loglik_trace[k]), repr(float(result.aic[k]))] + vals)
