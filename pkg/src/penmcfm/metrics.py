"""Evaluation metrics: concordance, support recovery, estimation error,
uncured-probability accuracy, prognostic risk scores and the log-rank test."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import chi2

from .data import SurvivalDataset, make_dataset
from .em import DEFAULT_MAX_ITER, DEFAULT_TOL, UNPENALIZED, FitResult, fit_em, initialize
from .simulate import SigmaSpec

NONZERO_EPS = 1e-12
_CHUNK = 512


class MetricError(ValueError):
    pass


def _pair_sums(scores, t, delta, weight_j=None) -> tuple[float, float]:
    """Weighted numerator/denominator over ordered comparable pairs ``(i, j)``.

    Pair ``(i, j)`` is comparable when ``i`` has the event and either
    ``t_i < t_j`` or ``t_i == t_j`` with ``j`` censored; it is concordant
    when ``score_i > score_j``.
    """
    s = np.asarray(scores, dtype=float)
    t = np.asarray(t, dtype=float)
    d = np.asarray(delta, dtype=float)
    w = np.ones_like(t) if weight_j is None else np.asarray(weight_j, dtype=float)
    num = den = 0.0
    events = np.flatnonzero(d == 1)
    for lo in range(0, events.size, _CHUNK):
        i = events[lo : lo + _CHUNK]
        ti = t[i][:, None]
        comp = (ti < t[None, :]) | ((ti == t[None, :]) & (d[None, :] == 0))
        cw = comp * w[None, :]
        den += float(cw.sum())
        num += float((cw * (s[i][:, None] > s[None, :])).sum())
    return num, den


def c_statistic(scores, t, delta) -> float:
    """Harrell's concordance index; tied scores count as discordant."""
    if len(t) < 2:
        raise MetricError("need at least two subjects")
    num, den = _pair_sums(scores, t, delta)
    if den == 0:
        raise MetricError("no comparable pairs")
    return num / den


def observed_cure_status(delta) -> np.ndarray:
    """Known cure status from data alone: 1 for events, NaN (unknown) otherwise."""
    d = np.asarray(delta, dtype=float)
    return np.where(d == 1, 1.0, np.nan)


def cure_weights(pi_hat, known_y) -> np.ndarray:
    """``y_j`` where cure status is known, ``pi_hat_j`` where it is not (NaN)."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    y = np.asarray(known_y, dtype=float)
    if np.any((pi_hat < 0) | (pi_hat > 1)):
        raise MetricError("pi_hat must lie in [0, 1]")
    known = ~np.isnan(y)
    if np.any(~np.isin(y[known], (0.0, 1.0))):
        raise MetricError("known cure status must be 0, 1 or NaN")
    return np.where(known, np.nan_to_num(y), pi_hat)


def c_statistic_cure(scores, pi_hat, t, delta, known_y=None) -> float:
    """Concordance with cure-status weights on the later subject ``j``.

    ``known_y`` holds 1 (uncured), 0 (cured) or NaN (unknown); by default it is
    taken from the data via :func:`observed_cure_status`.
    """
    if known_y is None:
        known_y = observed_cure_status(delta)
    w = cure_weights(pi_hat, known_y)
    num, den = _pair_sums(scores, t, delta, w)
    if den == 0:
        raise MetricError("zero denominator: no comparable pairs carry positive weight")
    return num / den


# ---------------------------------------------------------------------------
# support recovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionMetrics:
    sensitivity: float
    specificity: float
    fpr: float
    tp: int
    fp: int
    tn: int
    fn: int
    flag: str | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("sensitivity", "specificity", "fpr", "tp", "fp", "tn", "fn", "flag")}


def selection_metrics(true_coefs, est_coefs, eps: float = NONZERO_EPS) -> SelectionMetrics:
    """Sensitivity, specificity and false-positive rate of the estimated support."""
    tc = np.asarray(true_coefs, dtype=float)
    ec = np.asarray(est_coefs, dtype=float)
    if tc.shape != ec.shape:
        raise MetricError("coefficient vectors differ in length")
    t_nz = np.abs(tc) > eps
    e_nz = np.abs(ec) > eps
    tp = int(np.sum(t_nz & e_nz))
    fn = int(np.sum(t_nz & ~e_nz))
    fp = int(np.sum(~t_nz & e_nz))
    tn = int(np.sum(~t_nz & ~e_nz))
    flag = None
    if tp + fn == 0:
        sens = float("nan")
        flag = "no true signals: sensitivity undefined"
    else:
        sens = tp / (tp + fn)
    if fp + tn == 0:
        spec = float("nan")
        flag = "no true zeros: specificity undefined"
    else:
        spec = tn / (fp + tn)
    return SelectionMetrics(sens, spec, 1.0 - spec, tp, fp, tn, fn, flag)


# ---------------------------------------------------------------------------
# estimation error
# ---------------------------------------------------------------------------


@dataclass
class OracleFit:
    beta_p: np.ndarray
    b_p: np.ndarray
    fit: FitResult


def fit_oracle(
    ds: SurvivalDataset,
    support_beta,
    support_b=None,
    frailty_enabled: bool = True,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    theta_step: str = "expected",
) -> OracleFit:
    """Unpenalized fit with the penalized blocks restricted to the true support.

    ``support_b`` defaults to ``support_beta``. Coefficients outside the
    support are zero. Non-convergence is reported through ``fit.converged``.
    """
    sb = np.asarray(support_beta, dtype=int)
    sz = sb if support_b is None else np.asarray(support_b, dtype=int)
    if max(sb.size, sz.size) >= ds.n:
        raise MetricError("support must be smaller than the sample size")
    shared = ds.shared_penalized and np.array_equal(sb, sz)
    sub = make_dataset(
        ds.t,
        ds.delta,
        Zu=ds.Zu,
        Zp=ds.Zp[:, sz],
        Xu=ds.Xu,
        Xp=None if shared else ds.Xp[:, sb],
        shared_penalized=shared,
    )
    fit = fit_em(sub, UNPENALIZED, initialize(sub, frailty_enabled), tol, max_iter, theta_step=theta_step)
    beta = np.zeros(ds.Xp.shape[1])
    beta[sb] = fit.params.beta_p
    b = np.zeros(ds.Zp.shape[1])
    b[sz] = fit.params.b_p
    return OracleFit(beta, b, fit)


@dataclass(frozen=True)
class ErrorMetrics:
    rme: float
    err: float
    oracle: np.ndarray
    flag: str | None = None


def rme_err(est, truth, sigma: SigmaSpec | None, oracle) -> ErrorMetrics:
    """Model error and estimation error relative to the oracle estimate."""
    est, truth, oracle = (np.asarray(v, dtype=float) for v in (est, truth, oracle))
    if not est.shape == truth.shape == oracle.shape:
        raise MetricError("coefficient vectors differ in length")
    sigma = sigma or SigmaSpec()
    d, d0 = est - truth, oracle - truth
    num_s, den_s = sigma.quad(d), sigma.quad(d0)
    num_i, den_i = float(d @ d), float(d0 @ d0)
    flag = None
    if den_s == 0 or den_i == 0:
        flag = "oracle error is zero: relative error infinite"

    def ratio(a, b):
        if b == 0:
            return 0.0 if a == 0 else float("inf")
        return a / b

    return ErrorMetrics(ratio(num_s, den_s), ratio(num_i, den_i), oracle, flag)


def uncured_bias_mse(pairs: Iterable[tuple[Sequence[float], Sequence[float]]]) -> tuple[float, float]:
    """Average over replications of the per-subject mean error and squared error."""
    bias, mse = [], []
    for pi_hat, pi_true in pairs:
        e = np.asarray(pi_hat, dtype=float) - np.asarray(pi_true, dtype=float)
        bias.append(float(e.mean()))
        mse.append(float(np.mean(e * e)))
    if not bias:
        raise MetricError("no replications")
    return float(np.mean(bias)), float(np.mean(mse))


# ---------------------------------------------------------------------------
# prognostic risk score
# ---------------------------------------------------------------------------


@dataclass
class RiskScore:
    scores: np.ndarray
    high: np.ndarray  # boolean; ties at the median go to the low group
    flag: str | None = None


def prognostic_risk_score(avg_coefs, X) -> RiskScore:
    """Linear score ``X @ coefs`` dichotomized at its median."""
    coefs = np.asarray(avg_coefs, dtype=float)
    if coefs.size == 0:
        raise MetricError("empty selection")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != coefs.size:
        raise MetricError("expression matrix must have one column per selected gene")
    scores = X @ coefs
    high = scores > np.median(scores)
    flag = None
    if high.all() or not high.any():
        flag = "degenerate median split: one group is empty"
    return RiskScore(scores, high, flag)


def logrank_test(groups, t, delta) -> tuple[float, float]:
    """Two-sample log-rank chi-square statistic (1 df) and its p-value."""
    g = np.asarray(groups).astype(bool)
    t = np.asarray(t, dtype=float)
    d = np.asarray(delta, dtype=float)
    if g.all() or not g.any():
        raise MetricError("both groups must contain at least one subject")
    if not np.any(d == 1):
        raise MetricError("no events")
    o_minus_e = 0.0
    var = 0.0
    for tk in np.unique(t[d == 1]):
        at_risk = t >= tk
        n = float(at_risk.sum())
        n1 = float((at_risk & g).sum())
        dk = float(np.sum((t == tk) & (d == 1)))
        d1 = float(np.sum((t == tk) & (d == 1) & g))
        o_minus_e += d1 - dk * n1 / n
        if n > 1:
            var += dk * (n1 / n) * (1 - n1 / n) * (n - dk) / (n - 1)
    if var == 0:
        raise MetricError("zero variance: groups are not comparable at any event time")
    stat = o_minus_e**2 / var
    return float(stat), float(chi2.sf(stat, 1))
