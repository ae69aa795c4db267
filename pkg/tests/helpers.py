"""Shared builders and independent oracles for the test suite."""

import numpy as np
from scipy import integrate
from scipy.special import expit, gammaln

from penmcfm.data import make_dataset
from penmcfm.model import ParamSet


def random_dataset(rng, n=40, p1u=2, p1p=3, p2u=2, p2p=3, event_rate=0.5, shared=False):
    t = rng.uniform(0.1, 3.0, size=n)
    delta = (rng.uniform(size=n) < event_rate).astype(float)
    delta[0], delta[-1] = 1.0, 0.0
    Zu = rng.standard_normal((n, p1u))
    Zp = rng.standard_normal((n, p1p))
    Xu = rng.standard_normal((n, p2u))
    Xp = Zp if shared else rng.standard_normal((n, p2p))
    return make_dataset(t, delta, Zu, Zp, Xu, Xp, shared_penalized=shared)


def random_params(rng, ds, frailty=True, scale=0.5):
    w = ds.widths
    return ParamSet(
        alpha=float(rng.uniform(0.3, 2.0)),
        gamma=float(rng.uniform(0.5, 3.0)),
        theta=float(rng.uniform(0.2, 5.0)),
        beta_u=scale * rng.standard_normal(w["Xu"]),
        beta_p=scale * rng.standard_normal(w["Xp"]),
        b0=float(rng.normal(0, 0.5)),
        b_u=scale * rng.standard_normal(w["Zu"]),
        b_p=scale * rng.standard_normal(w["Zp"]),
        frailty_enabled=frailty,
    )


# ---------------------------------------------------------------------------
# quadrature over the gamma frailty
# ---------------------------------------------------------------------------


def _frailty_expectation(log_g, theta):
    """E[exp(log_g(u, W))] for W ~ Gamma(theta, rate theta), integrating over u = log w."""

    def integrand(u):
        w = np.exp(min(u, 700.0))
        log_dens = theta * np.log(theta) - gammaln(theta) + theta * u - theta * w
        return np.exp(log_g(u, w) + log_dens)

    # the log-density peaks at u = 0; split there for a robust adaptive rule
    kw = dict(epsabs=0.0, epsrel=1e-13, limit=500)
    left = integrate.quad(integrand, -np.inf, 0.0, **kw)[0]
    right = integrate.quad(integrand, 0.0, np.inf, **kw)[0]
    return left + right


def laplace_quad(s, theta):
    return _frailty_expectation(lambda u, w: -w * s, theta)


def marginal_likelihood_quad(params, ds):
    """Observed-data likelihood by explicit integration over W and summing over Y."""
    eta_z = params.b0 + ds.Zu @ params.b_u + ds.Zp @ params.b_p
    eta_x = ds.Xu @ params.beta_u + ds.Xp @ params.beta_p
    total = 1.0
    for i in range(ds.n):
        pi = expit(eta_z[i])
        H = params.alpha * ds.t[i] ** params.gamma * np.exp(eta_x[i])
        h = params.alpha * params.gamma * ds.t[i] ** (params.gamma - 1) * np.exp(eta_x[i])
        if params.frailty_enabled:
            if ds.delta[i] == 1:
                val = pi * _frailty_expectation(lambda u, w: u + np.log(h) - w * H, params.theta)
            else:
                val = 1 - pi + pi * _frailty_expectation(lambda u, w: -w * H, params.theta)
        else:
            val = pi * h * np.exp(-H) if ds.delta[i] == 1 else 1 - pi + pi * np.exp(-H)
        total *= val
    return total


# ---------------------------------------------------------------------------
# other oracles
# ---------------------------------------------------------------------------


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def cd_penalized_logistic(p, D, lam, penalized, tol=1e-14, max_sweeps=200000):
    """Cyclic coordinate descent with the 1/4 curvature bound.

    Minimizes ``-(1/n) sum[p eta - log(1+e^eta)] + lam * sum_{j penalized} |b_j|``.
    """
    n, k = D.shape
    b = np.zeros(k)
    eta = np.zeros(n)
    L = (D**2).sum(axis=0) / (4 * n)
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(k):
            g = -(D[:, j] @ (p - expit(eta))) / n
            z = b[j] - g / L[j]
            thr = lam / L[j] if penalized[j] else 0.0
            new = np.sign(z) * max(abs(z) - thr, 0.0)
            if new != b[j]:
                eta += D[:, j] * (new - b[j])
                biggest = max(biggest, abs(new - b[j]))
                b[j] = new
        if biggest < tol:
            return b
    raise RuntimeError("coordinate descent did not converge")


def brute_force_c(scores, t, delta, weight_j=None):
    """O(n^2) double loop over ordered pairs with strict score comparison.

    Pair (i, j) is comparable if delta_i = 1 and t_i < t_j, or t_i = t_j with
    delta_j = 0.
    """
    n = len(t)
    w = np.ones(n) if weight_j is None else weight_j
    num = den = 0.0
    for i in range(n):
        if delta[i] != 1:
            continue
        for j in range(n):
            if t[i] < t[j] or (t[i] == t[j] and delta[j] == 0):
                den += w[j]
                if scores[i] > scores[j]:
                    num += w[j]
    return num / den


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report(k, ok, detail):
    line = f"ACCEPTANCE {k:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
