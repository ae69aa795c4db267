"""Data generation for the Weibull mixture cure frailty model.

Outcomes are drawn by inverting the population CDF, which ranges over
``[0, pi(z))``: a uniform draw ``u < pi(z)`` marks an uncured subject and is
mapped to an event time, while ``u >= pi(z)`` marks a cured subject whose
observed time is its censoring time.

Random streams use numpy's counter-based Philox generator. Each stream is
seeded from ``(seed, label...)`` through a SHA-256 digest, so adding a new
stream never shifts existing ones.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .data import SurvivalDataset, make_dataset
from .model import ParamSet


def derive_seed(seed, *labels) -> int:
    """64-bit seed for a labeled sub-stream of ``seed``."""
    key = "/".join([str(int(seed))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def make_rng(seed, *labels) -> np.random.Generator:
    if isinstance(seed, np.random.Generator) and not labels:
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(derive_seed(seed, *labels))))


@dataclass(frozen=True)
class SimulationScenario:
    n: int = 500
    P: int = 1000
    s: int = 20
    v: float = 2.5
    rho: float = 0.0
    block_size: int = 50
    alpha: float = 1.25
    gamma: float = 2.5
    theta: float = 0.5
    b0: float = -2.0
    b_u: tuple[float, ...] = (-1.0, 1.0)
    beta_u_range: tuple[float, float] = (-3.0, 3.0)
    lambda_c: float = 0.5
    categorical_weights: tuple[float, ...] = (0.4, 0.35, 0.25)
    P2u: int = 10
    seed: int = 2024
    frailty_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "b_u", tuple(float(x) for x in self.b_u))
        object.__setattr__(self, "beta_u_range", tuple(float(x) for x in self.beta_u_range))
        object.__setattr__(self, "categorical_weights", tuple(float(x) for x in self.categorical_weights))
        if self.n < 1 or self.P < 0 or self.P2u < 0:
            raise ValueError("n must be positive and widths non-negative")
        if not 0 <= self.s <= self.P:
            raise ValueError(f"s={self.s} must lie in [0, P={self.P}]")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.block_size < 1 or self.P % self.block_size:
            raise ValueError(f"block_size={self.block_size} must divide P={self.P}")
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be positive")
        w = self.categorical_weights
        if len(w) < 1 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("categorical_weights must be a probability vector")
        if len(self.b_u) != len(w) - 1:
            raise ValueError("b_u needs one entry per non-reference category")
        lo, hi = self.beta_u_range
        if lo > hi:
            raise ValueError("beta_u_range must be (low, high)")
        if min(self.alpha, self.gamma, self.theta) <= 0:
            raise ValueError("alpha, gamma and theta must be positive")

    def with_(self, **kw) -> "SimulationScenario":
        d = asdict(self)
        d.update(kw)
        return SimulationScenario(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("b_u", "beta_u_range", "categorical_weights"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationScenario":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "SimulationScenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SigmaSpec:
    """Block-diagonal AR(1) correlation ``rho^|i-j|`` within blocks."""

    rho: float = 0.0
    block_size: int = 1

    def quad(self, d) -> float:
        """``d' Sigma d`` without forming Sigma."""
        from scipy.signal import lfilter

        d = np.asarray(d, dtype=float)
        if self.rho == 0 or d.size == 0:
            return float(d @ d)
        if d.size % self.block_size:
            raise ValueError("vector length is not a multiple of the block size")
        blocks = d.reshape(-1, self.block_size)
        fwd = lfilter([1.0], [1.0, -self.rho], blocks, axis=1)
        bwd = lfilter([1.0], [1.0, -self.rho], blocks[:, ::-1], axis=1)[:, ::-1]
        return float(np.sum(blocks * (fwd + bwd - blocks)))


@dataclass(frozen=True)
class GeneratedTruth:
    params: ParamSet
    dataset: SurvivalDataset
    sigma: SigmaSpec
    signal_beta: np.ndarray
    signal_b: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        ds = self.dataset
        return {
            "params": self.params.to_dict(),
            "signal_indices_beta": [int(i) for i in self.signal_beta],
            "signal_indices_b": [int(i) for i in self.signal_b],
            "rho": self.sigma.rho,
            "block_size": self.sigma.block_size,
            "seed": self.seed,
            "y_true": [int(v) for v in ds.y_true],
            "pi_true": [float(v) for v in ds.pi_true],
        }


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def inverse_pop_cdf(params: ParamSet, x_row, z_row, u):
    """Event time solving ``F_pop(t) = u`` for ``0 <= u < pi(z)``.

    ``z_row`` includes the leading intercept 1, as in :func:`uncured_probability`.
    """
    x_row = np.asarray(x_row, dtype=float)
    z_row = np.asarray(z_row, dtype=float)
    pi = expit(z_row @ params.b)
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= pi):
        raise ValueError(f"u must lie in [0, pi(z)={float(pi):.6g})")
    return _inverse_times(params, x_row @ params.beta, u / pi)


def _inverse_times(params: ParamSet, eta_x, q):
    # q = u / pi in [0, 1): latency survival 1 - q
    log_s = np.log1p(-q)
    if params.frailty_enabled:
        H = params.theta * np.expm1(-log_s / params.theta)
    else:
        H = -log_s
    return np.power(H / (params.alpha * np.exp(eta_x)), 1.0 / params.gamma)


def _ar1_cholesky(rho: float, size: int) -> np.ndarray:
    idx = np.arange(size)
    corr = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(corr)


def generate_covariates(scenario: SimulationScenario, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(Z_u, Z_p, X_u)``; the penalized latency block equals ``Z_p``.

    ``Z_u`` dummy-codes a categorical variable against its first level.
    """
    sc = scenario
    n = sc.n
    levels = make_rng(seed, "categorical").choice(len(sc.categorical_weights), size=n, p=sc.categorical_weights)
    Zu = (levels[:, None] == np.arange(1, len(sc.categorical_weights))[None, :]).astype(float)
    Z = make_rng(seed, "penalized").standard_normal((n, sc.P))
    if sc.rho > 0 and sc.P:
        L = _ar1_cholesky(sc.rho, sc.block_size)
        Z = (Z.reshape(n, -1, sc.block_size) @ L.T).reshape(n, sc.P)
    Xu = make_rng(seed, "latency-unpenalized").standard_normal((n, sc.P2u))
    return Zu, Z, Xu


def signal_indices(P: int, s: int) -> np.ndarray:
    """``s`` equally spaced 0-based indices, at the midpoints of ``s`` equal segments."""
    if s > P:
        raise ValueError(f"s={s} exceeds P={P}")
    return np.floor((np.arange(s) + 0.5) * P / s).astype(int) if s else np.zeros(0, dtype=int)


def generate_coefficients(scenario: SimulationScenario) -> ParamSet:
    """True parameters; ``beta_u`` is drawn once from the scenario seed."""
    sc = scenario
    idx = signal_indices(sc.P, sc.s)
    coef = np.zeros(sc.P)
    coef[idx] = sc.v
    lo, hi = sc.beta_u_range
    beta_u = make_rng(sc.seed, "beta_u").uniform(lo, hi, size=sc.P2u)
    return ParamSet(
        alpha=sc.alpha,
        gamma=sc.gamma,
        theta=sc.theta,
        beta_u=beta_u,
        beta_p=coef.copy(),
        b0=sc.b0,
        b_u=np.array(sc.b_u),
        b_p=coef.copy(),
        frailty_enabled=sc.frailty_enabled,
    )


def generate_outcomes(params: ParamSet, covariates, lambda_c: float, seed):
    """Draw ``(t, delta, y_true, pi_true)`` given covariate blocks ``(Z_u, Z_p, X_u, X_p)``."""
    Zu, Zp, Xu, Xp = covariates
    n = Zu.shape[0]
    pi = expit(params.b0 + Zu @ params.b_u + Zp @ params.b_p)
    u = make_rng(seed, "u").uniform(size=n)
    cens = make_rng(seed, "censoring").exponential(1.0 / lambda_c, size=n)
    y = u < pi
    t_star = np.full(n, np.inf)
    if y.any():
        eta_x = Xu[y] @ params.beta_u + Xp[y] @ params.beta_p
        t_star[y] = _inverse_times(params, eta_x, u[y] / pi[y])
    delta = (t_star <= cens).astype(float)
    t = np.minimum(t_star, cens)
    # a zero event time (u == 0) would violate t > 0
    t = np.maximum(t, np.finfo(float).tiny)
    return t, delta, y.astype(float), pi


def simulate(scenario: SimulationScenario, seed=None) -> GeneratedTruth:
    """One dataset from ``scenario``; ``seed`` defaults to the scenario seed."""
    seed = scenario.seed if seed is None else seed
    params = generate_coefficients(scenario)
    Zu, Zp, Xu = generate_covariates(scenario, seed)
    t, delta, y, pi = generate_outcomes(params, (Zu, Zp, Xu, Zp), scenario.lambda_c, seed)
    ds = make_dataset(t, delta, Zu=Zu, Zp=Zp, Xu=Xu, Xp=Zp, y_true=y, pi_true=pi, shared_penalized=True)
    idx = signal_indices(scenario.P, scenario.s) if scenario.v != 0 else np.zeros(0, dtype=int)
    sigma = SigmaSpec(scenario.rho, scenario.block_size)
    return GeneratedTruth(params, ds, sigma, idx, idx.copy(), int(seed))


def replication_seed(scenario: SimulationScenario, r: int) -> int:
    return derive_seed(scenario.seed, "replication", r)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class Replication:
    """One simulated dataset handed to every method of a Monte Carlo run."""

    index: int
    seed: int
    truth: GeneratedTruth
    context: object = None


MethodFn = Callable[[Replication], Mapping[str, float]]


@dataclass
class MonteCarloReport:
    """Per-method metric summaries over replications.

    ``values[method][metric]`` holds the per-replication values in order;
    failed replications are counted in ``failures`` and leave no values.
    """

    scenario: SimulationScenario
    M: int
    values: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    failures: dict[str, list[str]] = field(default_factory=dict)

    def summary(self) -> list[dict]:
        rows = []
        for method, metrics in self.values.items():
            for metric, vals in metrics.items():
                arr = [v for v in vals if math.isfinite(v)]
                rows.append(
                    {
                        "method": method,
                        "metric": metric,
                        "mean": statistics.fmean(arr) if arr else float("nan"),
                        "sd": statistics.stdev(arr) if len(arr) > 1 else None,
                        "n": len(arr),
                        "failures": len(self.failures.get(method, [])),
                    }
                )
        return rows

    def mean(self, method: str, metric: str) -> float:
        vals = [v for v in self.values[method].get(metric, []) if math.isfinite(v)]
        return statistics.fmean(vals) if vals else float("nan")

    def to_csv(self, path) -> None:
        lines = ["method,metric,mean,sd,n,failures"]
        for r in self.summary():
            sd = "" if r["sd"] is None else repr(r["sd"])
            lines.append(f"{r['method']},{r['metric']},{r['mean']!r},{sd},{r['n']},{r['failures']}")
        Path(path).write_text("\n".join(lines) + "\n")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "M": self.M,
            "summary": self.summary(),
            "failures": self.failures,
        }


def _run_replication(scenario, r, methods, prepare):
    seed = replication_seed(scenario, r)
    rep = Replication(r, seed, simulate(scenario, seed))
    out: dict[str, dict | str] = {}
    try:
        rep.context = prepare(rep) if prepare is not None else None
    except Exception as exc:  # every method fails with the shared preparation
        msg = f"replication {r}: preparation failed: {type(exc).__name__}: {exc}"
        return {name: msg for name in methods}
    for name, fn in methods.items():
        try:
            out[name] = {k: float(v) for k, v in fn(rep).items()}
        except Exception as exc:  # recorded, not fatal
            out[name] = f"replication {r}: {type(exc).__name__}: {exc}"
    return out


def _single_blas_thread() -> None:
    from threadpoolctl import threadpool_limits

    # kept alive for the worker's lifetime
    global _BLAS_LIMIT
    _BLAS_LIMIT = threadpool_limits(1)


def run_monte_carlo(
    scenario: SimulationScenario,
    M: int,
    methods: Mapping[str, MethodFn],
    prepare: Callable[[Replication], object] | None = None,
    workers: int = 1,
) -> MonteCarloReport:
    """Apply every method to ``M`` independently simulated datasets.

    Replication ``r`` uses the seed :func:`replication_seed` ``(scenario, r)``.
    ``prepare`` computes shared per-replication state (stored in
    ``Replication.context``). Exceptions are recorded per method and
    replication. With ``workers > 1`` replications run in separate processes
    (methods must then be picklable) with single-threaded BLAS; results are
    merged in replication order, so the report does not depend on ``workers``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    args = [(scenario, r, dict(methods), prepare) for r in range(M)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers, initializer=_single_blas_thread) as pool:
            results = list(pool.map(_run_replication, *zip(*args)))
    else:
        results = [_run_replication(*a) for a in args]
    report = MonteCarloReport(scenario, M, {m: {} for m in methods}, {m: [] for m in methods})
    for res in results:
        for name in methods:
            val = res[name]
            if isinstance(val, str):
                report.failures[name].append(val)
                continue
            for metric, v in val.items():
                report.values[name].setdefault(metric, []).append(v)
    return report


def censoring_and_cure_rates(scenario: SimulationScenario, reps: int) -> tuple[float, float]:
    """Mean censoring and cure proportions over ``reps`` simulated datasets."""
    cens, cure = [], []
    for r in range(reps):
        ds = simulate(scenario, replication_seed(scenario, r)).dataset
        cens.append(1.0 - ds.delta.mean())
        cure.append(1.0 - ds.y_true.mean())
    return float(np.mean(cens)), float(np.mean(cure))
