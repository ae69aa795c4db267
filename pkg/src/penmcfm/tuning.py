"""Cross-validated tuning, repeated-split stability selection and the
simulation benchmark.

Penalized columns are standardized on each training set and the fitted
coefficients are mapped back to the raw scale before scoring. Cross-validation
uses a *relative* lambda grid (multiples of each training fold's own
``lambda_max``), so held-out outcomes never influence a training fit.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import SurvivalDataset, kfold_partition, split_indices, standardize_penalized
from .em import FitResult, PathResult, fit_path, initialize, null_fit
from .gmifs import gmifs_fit
from .metrics import (
    MetricError,
    c_statistic_cure,
    fit_oracle,
    rme_err,
    selection_metrics,
)
from .model import ParamSet, latency_predictor, uncured_probabilities, unscale_params
from .optim import PenaltyConfig, lambda_max, log_grid
from .simulate import (
    GeneratedTruth,
    MonteCarloReport,
    Replication,
    SimulationScenario,
    derive_seed,
    run_monte_carlo,
)

SIM_ALPHA_GRID = (0.1, 0.5, 0.9, 1.0)
APP_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


@dataclass(frozen=True)
class FitSettings:
    """EM path settings shared by tuning and benchmarking."""

    frailty_enabled: bool = True
    stages: int = 2
    n_lambda: int = 50
    min_ratio: float = 0.01
    tol: float = 1e-5
    max_iter: int = 500
    theta_step: str = "observed"
    solver_max_iter: int = 10
    weight_cap: float = 1e6
    standardize: bool = True

    def ratios(self) -> np.ndarray:
        return log_grid(1.0, self.n_lambda, self.min_ratio)


@dataclass
class TrainedPath:
    """EM path fitted on (optionally standardized) training data."""

    path: PathResult
    lam_max: float
    scaling: object

    def raw_params(self, index: int) -> ParamSet:
        p = self.path.fit_at(index).params
        return unscale_params(p, self.scaling) if self.scaling is not None else p

    def fit(self, index: int) -> FitResult:
        return self.path.fit_at(index)


def train_path(
    ds: SurvivalDataset,
    alpha_enet: float,
    settings: FitSettings,
    ratios=None,
    stop_index: int | None = None,
) -> TrainedPath:
    """Fit the EM path at ``ratios * lambda_max(ds)``, warm-started from the null fit."""
    ratios = settings.ratios() if ratios is None else np.asarray(ratios, dtype=float)
    scaled, info = standardize_penalized(ds) if settings.standardize else (ds, None)
    init = initialize(scaled, settings.frailty_enabled)
    null = null_fit(scaled, init, settings.tol, settings.max_iter, settings.theta_step, settings.solver_max_iter)
    lmax = lambda_max(scaled, null.params, null.estep, alpha_enet)
    if not lmax > 0:
        raise ValueError("lambda_max is zero")
    cfg = PenaltyConfig(ratios * lmax, alpha_enet, settings.stages, weight_cap=settings.weight_cap)
    path = fit_path(
        scaled,
        cfg,
        null.params,
        settings.tol,
        settings.max_iter,
        stop_index=stop_index,
        theta_step=settings.theta_step,
        solver_max_iter=settings.solver_max_iter,
    )
    return TrainedPath(path, lmax, info)


def cure_concordance(params: ParamSet, ds: SurvivalDataset) -> float:
    """Held-out C_cure with latency score ``x' beta`` and weights from ``pi(z)``."""
    return c_statistic_cure(latency_predictor(params, ds), uncured_probabilities(params, ds), ds.t, ds.delta)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CvTable:
    """Held-out scores indexed ``[alpha, lambda, fold]`` (NaN marks a failed fold)."""

    alphas: np.ndarray
    ratios: np.ndarray
    scores: np.ndarray
    failures: list[str] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            cnt = np.sum(~np.isnan(self.scores), axis=2)
            tot = np.nansum(self.scores, axis=2)
            return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)

    @property
    def sd(self) -> np.ndarray:
        out = np.full(self.mean.shape, np.nan)
        for idx in np.ndindex(out.shape):
            v = self.scores[idx][~np.isnan(self.scores[idx])]
            if v.size > 1:
                out[idx] = float(np.std(v, ddof=1))
        return out

    def best(self) -> tuple[int, int]:
        """Cell with the largest mean score; ties go to larger lambda, then larger alpha."""
        m = self.mean
        if np.all(np.isnan(m)):
            raise RuntimeError("every cross-validation fit failed")
        cells = [(ia, il) for ia in range(m.shape[0]) for il in range(m.shape[1]) if not np.isnan(m[ia, il])]
        return max(cells, key=lambda c: (m[c], self.ratios[c[1]], self.alphas[c[0]]))

    def rows(self) -> list[dict]:
        m, s = self.mean, self.sd
        out = []
        for ia, a in enumerate(self.alphas):
            for il, r in enumerate(self.ratios):
                for f in range(self.scores.shape[2]):
                    out.append(
                        {
                            "alpha_enet": float(a),
                            "lambda_ratio": float(r),
                            "fold": f,
                            "score": float(self.scores[ia, il, f]),
                            "mean": float(m[ia, il]),
                            "sd": float(s[ia, il]),
                        }
                    )
        return out

    def to_csv(self, path) -> None:
        lines = ["alpha_enet,lambda_ratio,fold,score,mean,sd"]
        for r in self.rows():
            lines.append(f"{r['alpha_enet']!r},{r['lambda_ratio']!r},{r['fold']},{r['score']!r},{r['mean']!r},{r['sd']!r}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class CvResult:
    table: CvTable
    best_alpha: float
    best_ratio: float
    best_index: int
    params: ParamSet | None
    fit: FitResult | None
    lam: float | None

    def to_dict(self) -> dict:
        return {
            "best_alpha_enet": self.best_alpha,
            "best_lambda_ratio": self.best_ratio,
            "best_lambda": self.lam,
            "fold_failures": self.table.failures,
            "params": None if self.params is None else self.params.to_dict(),
        }


def cross_validate(
    ds: SurvivalDataset,
    alpha_grid: Sequence[float] = (1.0,),
    k: int = 4,
    seed: int = 0,
    settings: FitSettings = FitSettings(),
    ratios=None,
    refit: bool = True,
) -> CvResult:
    """k-fold selection of ``(alpha_enet, lambda)`` by held-out C_cure.

    ``ratios`` are multiples of each training set's ``lambda_max``
    (descending; default from ``settings``). With ``refit`` the selected cell
    is refitted on the whole of ``ds`` and returned on the raw scale.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    alphas = np.asarray(alpha_grid, dtype=float)
    ratios = settings.ratios() if ratios is None else np.asarray(ratios, dtype=float)
    if alphas.size == 0 or ratios.size == 0:
        raise ValueError("grids must be non-empty")
    folds = kfold_partition(ds.n, k, seed)
    scores = np.full((alphas.size, ratios.size, k), np.nan)
    failures: list[str] = []
    for ia, a in enumerate(alphas):
        for f, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(ds.n), test_idx)
            train, test = ds.subset(train_idx), ds.subset(test_idx)
            try:
                tp = train_path(train, float(a), settings, ratios)
            except Exception as exc:
                failures.append(f"alpha={a} fold={f}: {type(exc).__name__}: {exc}")
                continue
            for il in range(ratios.size):
                try:
                    scores[ia, il, f] = cure_concordance(tp.raw_params(il), test)
                except MetricError as exc:
                    failures.append(f"alpha={a} fold={f} lambda#{il}: {exc}")
    table = CvTable(alphas, ratios, scores, failures)
    ia, il = table.best()
    params = fit = lam = None
    if refit:
        tp = train_path(ds, float(alphas[ia]), settings, ratios, stop_index=il)
        params, fit = tp.raw_params(il), tp.fit(il)
        lam = float(ratios[il] * tp.lam_max)
    return CvResult(table, float(alphas[ia]), float(ratios[il]), il, params, fit, lam)


def tune(
    train: SurvivalDataset,
    alpha_grid: Sequence[float],
    k: int,
    seed: int,
    settings: FitSettings,
    test: SurvivalDataset | None = None,
    alpha_on_test: bool = False,
) -> CvResult:
    """Nested tuning on ``train``; optionally pick ``alpha_enet`` on ``test``.

    With ``alpha_on_test`` lambda is cross-validated separately for every
    alpha and the alpha whose refitted model scores best on ``test`` wins.
    """
    if not alpha_on_test:
        return cross_validate(train, alpha_grid, k, seed, settings)
    if test is None:
        raise ValueError("alpha_on_test requires a test set")
    best = None
    for a in alpha_grid:
        res = cross_validate(train, (a,), k, seed, settings)
        score = cure_concordance(res.params, test)
        if best is None or score > best[0]:
            best = (score, res)
    return best[1]


# ---------------------------------------------------------------------------
# repeated splits
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    R: int
    freq_beta: np.ndarray
    freq_b: np.ndarray
    avg_beta: np.ndarray
    avg_b: np.ndarray
    splits: list[dict]
    failures: list[str]

    @property
    def union_beta(self) -> np.ndarray:
        return np.flatnonzero(self.freq_beta > 0)

    @property
    def union_b(self) -> np.ndarray:
        return np.flatnonzero(self.freq_b > 0)

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "freq_beta": self.freq_beta.tolist(),
            "freq_b": self.freq_b.tolist(),
            "union_beta": self.union_beta.tolist(),
            "union_b": self.union_b.tolist(),
            "avg_beta": self.avg_beta.tolist(),
            "avg_b": self.avg_b.tolist(),
            "splits": self.splits,
            "failures": self.failures,
        }


def repeated_split_selection(
    ds: SurvivalDataset,
    R: int = 20,
    test_fraction: float = 0.2,
    alpha_grid: Sequence[float] = APP_ALPHA_GRID,
    k: int = 4,
    seed: int = 0,
    settings: FitSettings = FitSettings(),
    alpha_on_test: bool = False,
) -> StabilityReport:
    """Tune and fit on ``R`` random train/test splits; count selections per covariate."""
    if R < 1:
        raise ValueError("R must be at least 1")
    p1, p2 = ds.Zp.shape[1], ds.Xp.shape[1]
    freq_b, freq_beta = np.zeros(p1, dtype=int), np.zeros(p2, dtype=int)
    sum_b, sum_beta = np.zeros(p1), np.zeros(p2)
    splits, failures = [], []
    for r in range(R):
        tr_idx, te_idx = split_indices(ds.n, test_fraction, derive_seed(seed, "split", r))
        train, test = ds.subset(tr_idx), ds.subset(te_idx)
        try:
            res = tune(train, alpha_grid, k, derive_seed(seed, "folds", r), settings, test, alpha_on_test)
            c_test = cure_concordance(res.params, test)
        except Exception as exc:
            failures.append(f"split {r}: {type(exc).__name__}: {exc}")
            continue
        p = res.params
        freq_b += p.b_p != 0
        freq_beta += p.beta_p != 0
        sum_b += p.b_p
        sum_beta += p.beta_p
        splits.append({"split": r, "alpha_enet": res.best_alpha, "lambda": res.lam, "c_cure_test": c_test})
    ok = max(len(splits), 1)
    return StabilityReport(R, freq_beta, freq_b, sum_beta / ok, sum_b / ok, splits, failures)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchSettings:
    fit: FitSettings = FitSettings()
    alpha_grid: tuple[float, ...] = SIM_ALPHA_GRID
    k: int = 4
    test_fraction: float = 0.2
    alpha_on_test: bool = False
    gmifs_epsilon: float = 0.01
    gmifs_max_steps: int = 5000
    gmifs_refresh: int = 10
    oracle_max_iter: int = 2000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_grid"] = list(self.alpha_grid)
        return d


@dataclass
class BenchContext:
    train: SurvivalDataset
    test: SurvivalDataset
    oracle_beta: np.ndarray
    oracle_b: np.ndarray


def prepare_replication(rep: Replication, settings: BenchSettings) -> BenchContext:
    """Train/test split and the oracle fit shared by all methods of a replication."""
    ds = rep.truth.dataset
    tr_idx, te_idx = split_indices(ds.n, settings.test_fraction, derive_seed(rep.seed, "split"))
    train = ds.subset(tr_idx)
    truth = rep.truth
    orc = fit_oracle(
        train,
        truth.signal_beta,
        truth.signal_b,
        truth.params.frailty_enabled,
        settings.fit.tol,
        settings.oracle_max_iter,
        settings.fit.theta_step,
    )
    return BenchContext(train, ds.subset(te_idx), orc.beta_p, orc.b_p)


def evaluate_params(params: ParamSet, truth: GeneratedTruth, ctx: BenchContext) -> dict[str, float]:
    """Table-style metrics of a raw-scale parameter set."""
    out: dict[str, float] = {}
    tp = truth.params
    for name, est, true, orc in (
        ("beta", params.beta_p, tp.beta_p, ctx.oracle_beta),
        ("b", params.b_p, tp.b_p, ctx.oracle_b),
    ):
        e = rme_err(est, true, truth.sigma, orc)
        sm = selection_metrics(true, est)
        out[f"{name}_rme"] = e.rme
        out[f"{name}_err"] = e.err
        out[f"{name}_sensitivity"] = sm.sensitivity
        out[f"{name}_specificity"] = sm.specificity
        out[f"{name}_fpr"] = sm.fpr
        out[f"{name}_nonzero"] = float(sm.tp + sm.fp)
    ds = truth.dataset
    err = uncured_probabilities(params, ds) - ds.pi_true
    out["bias_pi"] = float(np.mean(err))
    out["mse_pi"] = float(np.mean(err * err))
    for label, part in (("train", ctx.train), ("test", ctx.test)):
        try:
            out[f"c_cure_{label}"] = cure_concordance(params, part)
        except MetricError:
            out[f"c_cure_{label}"] = float("nan")
    return out


def method_em(rep: Replication, settings: BenchSettings, alpha_grid: tuple[float, ...]) -> dict[str, float]:
    ctx: BenchContext = rep.context
    res = tune(
        ctx.train,
        alpha_grid,
        settings.k,
        derive_seed(rep.seed, "folds"),
        settings.fit,
        ctx.test,
        settings.alpha_on_test,
    )
    out = evaluate_params(res.params, rep.truth, ctx)
    out["alpha_enet"] = res.best_alpha
    out["lambda_ratio"] = res.best_ratio
    return out


def method_gmifs(rep: Replication, settings: BenchSettings, frailty_enabled: bool) -> dict[str, float]:
    ctx: BenchContext = rep.context
    scaled, info = standardize_penalized(ctx.train)
    res = gmifs_fit(
        scaled,
        settings.gmifs_epsilon,
        settings.gmifs_max_steps,
        frailty_enabled,
        settings.gmifs_refresh,
    )
    out = evaluate_params(unscale_params(res.params, info), rep.truth, ctx)
    out["steps"] = float(res.state.step)
    out["selected_step"] = float(res.selected_step)
    return out


def method_oracle(rep: Replication, settings: BenchSettings) -> dict[str, float]:
    ctx: BenchContext = rep.context
    truth = rep.truth
    params = truth.params.with_(beta_p=ctx.oracle_beta, b_p=ctx.oracle_b)
    out = evaluate_params(params, truth, ctx)
    return {k: v for k, v in out.items() if k.endswith(("_rme", "_err"))}


METHOD_NAMES = ("penMCFM-EM", "penMCFM-GMIFS", "MCM-GMIFS", "oracle")


def build_methods(names: Sequence[str], settings: BenchSettings, per_alpha: bool = False) -> dict:
    """Method callables keyed by report label.

    ``per_alpha`` splits penMCFM-EM into one method per alpha in the grid
    (labels ``penMCFM-EM(alpha=...)``); otherwise alpha is tuned jointly.
    """
    methods = {}
    for name in names:
        if name == "penMCFM-EM":
            if per_alpha:
                for a in settings.alpha_grid:
                    methods[f"penMCFM-EM(alpha={a:g})"] = partial(method_em, settings=settings, alpha_grid=(a,))
            else:
                methods[name] = partial(method_em, settings=settings, alpha_grid=tuple(settings.alpha_grid))
        elif name == "penMCFM-GMIFS":
            methods[name] = partial(method_gmifs, settings=settings, frailty_enabled=True)
        elif name == "MCM-GMIFS":
            methods[name] = partial(method_gmifs, settings=settings, frailty_enabled=False)
        elif name == "oracle":
            methods[name] = partial(method_oracle, settings=settings)
        else:
            raise ValueError(f"unknown method {name!r}; choose from {METHOD_NAMES}")
    return methods


@dataclass
class BenchmarkReport:
    settings: BenchSettings
    reports: list[MonteCarloReport]

    def columns(self) -> list[str]:
        metrics: list[str] = []
        for rep in self.reports:
            for mvals in rep.values.values():
                for m in mvals:
                    if m not in metrics:
                        metrics.append(m)
        return metrics

    def to_csv(self, path) -> None:
        """One row per scenario and method; ``<metric>_mean`` / ``<metric>_sd`` columns."""
        metrics = self.columns()
        head = ["scenario", "v", "rho", "n", "P", "method", "failures"]
        for m in metrics:
            head += [f"{m}_mean", f"{m}_sd"]
        head.append("pencox_1se")
        lines = [",".join(head)]
        for si, rep in enumerate(self.reports):
            sc = rep.scenario
            for method, mvals in rep.values.items():
                row = [str(si), repr(sc.v), repr(sc.rho), str(sc.n), str(sc.P), method, str(len(rep.failures[method]))]
                for m in metrics:
                    vals = [v for v in mvals.get(m, []) if math.isfinite(v)]
                    mean = statistics.fmean(vals) if vals else float("nan")
                    sd = statistics.stdev(vals) if len(vals) > 1 else float("nan")
                    row += ["" if math.isnan(mean) else repr(mean), "" if math.isnan(sd) else repr(sd)]
                row.append("absent")
                lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    def manifest(self, seeds: Sequence[int]) -> dict:
        import platform

        import numpy
        import scipy

        from . import __version__

        return {
            "scenarios": [r.scenario.to_dict() for r in self.reports],
            "settings": self.settings.to_dict(),
            "seeds": list(seeds),
            "failures": [r.failures for r in self.reports],
            "versions": {
                "penmcfm": __version__,
                "numpy": numpy.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }

    def write(self, out_dir, seeds: Sequence[int], timestamp: str | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / "benchmark.csv")
        man = self.manifest(seeds)
        if timestamp is not None:
            man["timestamp"] = timestamp
        (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def benchmark(
    scenarios: Sequence[SimulationScenario],
    methods: Sequence[str] = METHOD_NAMES,
    M: int = 100,
    settings: BenchSettings = BenchSettings(),
    workers: int = 1,
    per_alpha: bool = False,
) -> BenchmarkReport:
    """Monte Carlo comparison of the fitting methods on each scenario."""
    fns = build_methods(methods, settings, per_alpha)
    prep = partial(prepare_replication, settings=settings)
    reports = [run_monte_carlo(sc, M, fns, prep, workers) for sc in scenarios]
    return BenchmarkReport(settings, reports)


def method_summary(report: MonteCarloReport) -> Mapping[str, Mapping[str, float]]:
    """``{method: {metric: mean}}`` over successful replications."""
    return {m: {k: report.mean(m, k) for k in vals} for m, vals in report.values.items()}
