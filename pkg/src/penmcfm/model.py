"""Weibull mixture cure model with gamma frailty.

Incidence is logistic, ``pi(z) = 1 / (1 + exp(-z'b))``; latency is Weibull
with cumulative baseline hazard ``H0(t) = alpha * t**gamma`` and a gamma
frailty of mean 1 and variance ``1/theta`` acting multiplicatively on the
hazard. With ``frailty_enabled=False`` the frailty is degenerate at 1 and the
latency survival is ``exp(-H)``.

All likelihood arithmetic is carried out on the log scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from .data import ScalingInfo, SurvivalDataset


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A likelihood quantity evaluated to a non-finite value."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


def _vec(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True).ravel()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParamSet:
    """Model parameters ``(alpha, gamma, theta, beta, b)``.

    ``beta = (beta_u, beta_p)`` act on the latency covariates,
    ``b = (b0, b_u, b_p)`` on the incidence covariates.
    """

    alpha: float
    gamma: float
    theta: float
    beta_u: np.ndarray
    beta_p: np.ndarray
    b0: float
    b_u: np.ndarray
    b_p: np.ndarray
    frailty_enabled: bool = True

    def __post_init__(self):
        for name in ("alpha", "gamma", "theta"):
            val = float(getattr(self, name))
            if not (val > 0 and np.isfinite(val)):
                raise ValueError(f"{name} must be positive and finite, got {val}")
            object.__setattr__(self, name, val)
        object.__setattr__(self, "b0", float(self.b0))
        for name in ("beta_u", "beta_p", "b_u", "b_p"):
            object.__setattr__(self, name, _vec(getattr(self, name)))

    @classmethod
    def zeros(cls, ds: SurvivalDataset, alpha=1.0, gamma=1.0, theta=1.0, frailty_enabled=True) -> "ParamSet":
        w = ds.widths
        return cls(
            alpha,
            gamma,
            theta,
            np.zeros(w["Xu"]),
            np.zeros(w["Xp"]),
            0.0,
            np.zeros(w["Zu"]),
            np.zeros(w["Zp"]),
            frailty_enabled,
        )

    @property
    def b(self) -> np.ndarray:
        return np.concatenate(([self.b0], self.b_u, self.b_p))

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate((self.beta_u, self.beta_p))

    def with_(self, **kw) -> "ParamSet":
        return replace(self, **kw)

    def check(self, ds: SurvivalDataset) -> None:
        w = ds.widths
        for name, block in (("beta_u", "Xu"), ("beta_p", "Xp"), ("b_u", "Zu"), ("b_p", "Zp")):
            if getattr(self, name).shape[0] != w[block]:
                raise DimensionError(
                    f"{name} has length {getattr(self, name).shape[0]} but block {block} has {w[block]} columns"
                )

    def to_dict(self) -> dict:
        out = {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "theta": self.theta,
            "beta_u": self.beta_u.tolist(),
            "beta_p": self.beta_p.tolist(),
            "b0": self.b0,
            "b_u": self.b_u.tolist(),
            "b_p": self.b_p.tolist(),
            "frailty_enabled": self.frailty_enabled,
        }
        if not self.frailty_enabled:
            del out["theta"]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSet":
        return cls(
            d["alpha"],
            d["gamma"],
            d.get("theta", 1.0),
            d["beta_u"],
            d["beta_p"],
            d["b0"],
            d["b_u"],
            d["b_p"],
            d.get("frailty_enabled", True),
        )


# ---------------------------------------------------------------------------
# scalar/row-level functions
# ---------------------------------------------------------------------------


def _split_z(params: ParamSet, z_row):
    z = np.asarray(z_row, dtype=float)
    k = 1 + params.b_u.size + params.b_p.size
    if z.shape[-1] != k:
        raise DimensionError(f"z_row has length {z.shape[-1]}, expected 1 + {params.b_u.size} + {params.b_p.size}")
    return z


def _split_x(params: ParamSet, x_row):
    x = np.asarray(x_row, dtype=float)
    k = params.beta_u.size + params.beta_p.size
    if x.shape[-1] != k:
        raise DimensionError(f"x_row has length {x.shape[-1]}, expected {k}")
    return x


def uncured_probability(params: ParamSet, z_row):
    """pi(z) for ``z_row = (1, z_u, z_p)``; vectorized over leading axes."""
    z = _split_z(params, z_row)
    return expit(z @ params.b)


def frailty_laplace(s, theta: float, frailty_enabled: bool = True):
    """Laplace transform ``E[exp(-W s)]`` of the mean-one gamma frailty."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("Laplace transform argument must be non-negative")
    if not theta > 0:
        raise ValueError("theta must be positive")
    return np.exp(_log_laplace(s, theta, frailty_enabled))


def _log_laplace(s, theta, frailty_enabled):
    if frailty_enabled:
        return -theta * np.log1p(s / theta)
    return -s


def _cum_hazard(params: ParamSet, eta_x, t):
    return params.alpha * np.power(t, params.gamma) * np.exp(eta_x)


def latency_survival(params: ParamSet, x_row, t):
    """Marginal survival of the uncured, ``L_W(exp(x'beta) H0(t))``."""
    x = _split_x(params, x_row)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    H = _cum_hazard(params, x @ params.beta, t)
    return np.exp(_log_laplace(H, params.theta, params.frailty_enabled))


def population_survival(params: ParamSet, x_row, z_row, t):
    """``S_pop(t | x, z) = 1 - pi(z) + pi(z) S_u(t | x)``."""
    x = _split_x(params, x_row)
    z = _split_z(params, z_row)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    eta_z = z @ params.b
    H = _cum_hazard(params, x @ params.beta, t)
    return np.exp(_log_spop(eta_z, _log_laplace(H, params.theta, params.frailty_enabled)))


def _log_spop(eta_z, log_su):
    # log(1 - pi + pi*Su) = log(1-pi) + log1p(exp(eta_z) * Su)
    return log_expit(-eta_z) + np.logaddexp(0.0, eta_z + log_su)


def population_cdf(params: ParamSet, x_row, z_row, t):
    """``F_pop = pi(z) * (1 - S_u(t))``, accurate for small t."""
    x = _split_x(params, x_row)
    z = _split_z(params, z_row)
    H = _cum_hazard(params, x @ params.beta, np.asarray(t, dtype=float))
    log_su = _log_laplace(H, params.theta, params.frailty_enabled)
    return expit(z @ params.b) * -np.expm1(log_su)


# ---------------------------------------------------------------------------
# dataset-level quantities
# ---------------------------------------------------------------------------


def incidence_predictor(params: ParamSet, ds: SurvivalDataset) -> np.ndarray:
    return params.b0 + ds.Zu @ params.b_u + ds.Zp @ params.b_p


def latency_predictor(params: ParamSet, ds: SurvivalDataset) -> np.ndarray:
    return ds.Xu @ params.beta_u + ds.Xp @ params.beta_p


@dataclass(frozen=True)
class RowTerms:
    """Per-row building blocks shared by the likelihood, E-step and gradient."""

    eta_z: np.ndarray
    eta_x: np.ndarray
    H: np.ndarray
    log_su: np.ndarray
    log_pi: np.ndarray
    log_1mpi: np.ndarray
    post: np.ndarray = field(repr=False)  # P(Y=1 | data)


def row_terms(params: ParamSet, ds: SurvivalDataset, eta_z=None, eta_x=None) -> RowTerms:
    if eta_z is None:
        eta_z = incidence_predictor(params, ds)
    if eta_x is None:
        eta_x = latency_predictor(params, ds)
    log_H = np.log(params.alpha) + params.gamma * np.log(ds.t) + eta_x
    H = np.exp(log_H)
    log_su = _log_laplace(H, params.theta, params.frailty_enabled)
    post = np.where(ds.delta == 1, 1.0, expit(eta_z + log_su))
    return RowTerms(eta_z, eta_x, H, log_su, log_expit(eta_z), log_expit(-eta_z), post)


def loglik_rows(params: ParamSet, ds: SurvivalDataset, terms: RowTerms | None = None) -> np.ndarray:
    """Per-row log-likelihood contributions of the observed data."""
    params.check(ds)
    r = terms if terms is not None else row_terms(params, ds)
    th = params.theta
    if params.frailty_enabled:
        log_dens_tail = -(th + 1.0) * np.log1p(r.H / th)
    else:
        log_dens_tail = -r.H
    log_f = (
        r.log_pi
        + np.log(params.alpha * params.gamma)
        + (params.gamma - 1.0) * np.log(ds.t)
        + r.eta_x
        + log_dens_tail
    )
    log_s = np.logaddexp(r.log_1mpi, r.log_pi + r.log_su)
    return np.where(ds.delta == 1, log_f, log_s)


def observed_log_likelihood(params: ParamSet, ds: SurvivalDataset, terms: RowTerms | None = None) -> float:
    """Log of the observed-data likelihood of right-censored mixture cure data."""
    rows = loglik_rows(params, ds, terms)
    bad = np.flatnonzero(~np.isfinite(rows))
    if bad.size:
        raise NonFiniteError(f"non-finite log-likelihood contribution at row {bad[0]}", row=int(bad[0]))
    return float(np.sum(rows))


@dataclass(frozen=True)
class LoglikGradient:
    """Gradient of the observed log-likelihood.

    Scalar parameters are differentiated on the log scale
    (``log_alpha``, ``log_gamma``, ``log_theta``).
    """

    log_alpha: float
    log_gamma: float
    log_theta: float
    beta_u: np.ndarray
    beta_p: np.ndarray
    b0: float
    b_u: np.ndarray
    b_p: np.ndarray


def observed_gradient(params: ParamSet, ds: SurvivalDataset, terms: RowTerms | None = None) -> LoglikGradient:
    """Analytic gradient of :func:`observed_log_likelihood`.

    d/d eta_z_i = p_i - pi_i and d/d log H_i = delta_i - c_i H_i, where p_i and
    c_i are the posterior means of Y_i and W_i Y_i.
    """
    r = terms if terms is not None else row_terms(params, ds)
    th = params.theta
    p = r.post
    pi = np.exp(r.log_pi)
    g_eta_z = p - pi
    if params.frailty_enabled:
        c = (ds.delta + th) / (th + r.H) * p
        tail = -np.log1p(r.H / th) + r.H / (th + r.H)
        g_log_theta = float(th * np.sum(p * tail + ds.delta * r.H / (th * (th + r.H))))
    else:
        c = p
        g_log_theta = 0.0
    g_log_h = ds.delta - c * r.H
    log_t = np.log(ds.t)
    return LoglikGradient(
        log_alpha=float(np.sum(g_log_h)),
        log_gamma=float(np.sum(ds.delta + g_log_h * params.gamma * log_t)),
        log_theta=g_log_theta,
        beta_u=ds.Xu.T @ g_log_h,
        beta_p=ds.Xp.T @ g_log_h,
        b0=float(np.sum(g_eta_z)),
        b_u=ds.Zu.T @ g_eta_z,
        b_p=ds.Zp.T @ g_eta_z,
    )


def uncured_probabilities(params: ParamSet, ds: SurvivalDataset) -> np.ndarray:
    return expit(incidence_predictor(params, ds))


# ---------------------------------------------------------------------------
# scale handling
# ---------------------------------------------------------------------------


def unscale_params(params: ParamSet, info: ScalingInfo) -> ParamSet:
    """Map coefficients fitted on standardized penalized columns to the raw scale."""
    b_p = params.b_p / info.std_z
    beta_p = params.beta_p / info.std_x
    b0 = params.b0 - float(info.mean_z @ b_p)
    log_alpha = np.log(params.alpha) - float(info.mean_x @ beta_p)
    return params.with_(b_p=b_p, beta_p=beta_p, b0=b0, alpha=float(np.exp(log_alpha)))


def scale_params(params: ParamSet, info: ScalingInfo) -> ParamSet:
    """Inverse of :func:`unscale_params`."""
    b0 = params.b0 + float(info.mean_z @ params.b_p)
    log_alpha = np.log(params.alpha) + float(info.mean_x @ params.beta_p)
    return params.with_(
        b_p=params.b_p * info.std_z,
        beta_p=params.beta_p * info.std_x,
        b0=b0,
        alpha=float(np.exp(log_alpha)),
    )
