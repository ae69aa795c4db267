"""Command-line interface: ``penmcfm {simulate,fit,cv,bench,metrics,prs}``.

Settings are resolved per flag as command line > ``--config`` JSON file >
built-in default. Exit codes: 0 success, 1 input or solver error, 2 a fit
stopped at its iteration limit.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .data import ColumnRoles, DataValidationError, SurvivalDataset, load_csv, standardize_penalized
from .em import MStepError, fit_path, initialize, null_fit
from .gmifs import DEFAULT_REFRESH, gmifs_fit, write_path_csv
from .metrics import (
    MetricError,
    c_statistic,
    c_statistic_cure,
    fit_oracle,
    logrank_test,
    prognostic_risk_score,
    rme_err,
    selection_metrics,
)
from .model import (
    DimensionError,
    NonFiniteError,
    ParamSet,
    latency_predictor,
    observed_log_likelihood,
    uncured_probabilities,
    unscale_params,
)
from .optim import PenaltyConfig, SolverError, lambda_max, log_grid
from .simulate import SigmaSpec, SimulationScenario, simulate
from .tuning import (
    APP_ALPHA_GRID,
    METHOD_NAMES,
    SIM_ALPHA_GRID,
    BenchSettings,
    FitSettings,
    benchmark,
    cross_validate,
    repeated_split_selection,
)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

# flag defaults; a --config file may override any of them
DEFAULTS: dict[str, Any] = {
    "data": None,
    "roles": None,
    "out": ".",
    "seed": 2024,
    "threads": 1,
    "frailty": "on",
    "method": "em",
    "alpha_enet": 1.0,
    "lambda": "auto",
    "k_stages": 2,
    "tol": 1e-5,
    "max_iter": 500,
    "n_lambda": 50,
    "min_ratio": 0.01,
    "folds": 4,
    "alpha_grid": None,
    "epsilon": 1e-3,
    "max_steps": 5000,
    "scenario": None,
    "M": 100,
    "methods": ",".join(METHOD_NAMES),
    "per_alpha": False,
    "repeats": 0,
    "test_fraction": 0.2,
    "alpha_on_test": False,
    "truth": None,
    "fit": None,
    "coefs": None,
}


class CliError(Exception):
    pass


def _add_shared(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file of flag values (keys use underscores)")
    p.add_argument("--data", default=S, help="input CSV")
    p.add_argument("--roles", default=S, help="column-roles JSON")
    p.add_argument("--out", default=S, help="output directory (default: .)")
    p.add_argument("--seed", type=int, default=S, help="master seed (default: 2024)")
    p.add_argument("--threads", type=int, default=S, help="worker processes (default: 1)")
    p.add_argument("--frailty", choices=("on", "off"), default=S, help="gamma frailty term (default: on)")
    p.add_argument("--method", choices=("em", "gmifs"), default=S, help="fitting method (default: em)")
    p.add_argument("--alpha-enet", type=float, default=S, help="elastic-net mixing (default: 1.0)")
    p.add_argument(
        "--lambda",
        dest="lambda",
        default=S,
        help="'auto' (cross-validated), 'path' (whole grid), 'max' or a number on the "
        "standardized scale (default: auto)",
    )
    p.add_argument("--k-stages", type=int, choices=(1, 2), default=S, help="1 = elastic net, 2 = adaptive (default: 2)")
    p.add_argument("--tol", type=float, default=S, help="EM tolerance (default: 1e-5)")
    p.add_argument("--max-iter", type=int, default=S, help="EM iteration limit; bench oracle fits get 4x (default: 500)")
    p.add_argument("--n-lambda", type=int, default=S, help="grid size (default: 50)")
    p.add_argument("--min-ratio", type=float, default=S, help="smallest lambda / lambda_max (default: 0.01)")
    p.add_argument("--folds", type=int, default=S, help="cross-validation folds (default: 4)")
    p.add_argument("--alpha-grid", default=S, help="comma-separated alpha_enet values")
    p.add_argument("--epsilon", type=float, default=S, help="GMIFS step size (default: 1e-3)")
    p.add_argument("--max-steps", type=int, default=S, help="GMIFS step limit (default: 5000)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="penmcfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("simulate", help="draw a dataset: data.csv, roles.json, truth.json")
    _add_shared(p)
    p.add_argument("--scenario", default=S, help="scenario JSON (default: built-in scenario)")

    p = sub.add_parser("fit", help="fit one model: fit.json (+ path.csv)")
    _add_shared(p)

    p = sub.add_parser("cv", help="cross-validate (alpha_enet, lambda); optional repeated splits")
    _add_shared(p)
    p.add_argument("--repeats", type=int, default=S, help="repeated train/test splits (default: 0 = none)")
    p.add_argument("--test-fraction", type=float, default=S, help="test share per split (default: 0.2)")
    p.add_argument("--alpha-on-test", action="store_true", default=S, help="choose alpha_enet on the test split")

    p = sub.add_parser("bench", help="Monte Carlo benchmark: benchmark.csv, manifest.json")
    _add_shared(p)
    p.add_argument("--scenario", action="append", default=S, help="scenario JSON (repeatable)")
    p.add_argument("--M", type=int, default=S, help="replications per scenario (default: 100)")
    p.add_argument("--methods", default=S, help=f"comma-separated subset of {','.join(METHOD_NAMES)}")
    p.add_argument("--per-alpha", action="store_true", default=S, help="one EM row per alpha_enet")

    p = sub.add_parser("metrics", help="compare fit.json with truth.json: metrics.json")
    _add_shared(p)
    p.add_argument("--truth", default=S, help="truth.json from simulate")
    p.add_argument("--fit", default=S, help="fit.json from fit or cv")

    p = sub.add_parser("prs", help="prognostic risk score and log-rank test: prs.csv, prs.json")
    _add_shared(p)
    p.add_argument("--coefs", default=S, help="fit.json or stability.json supplying latency coefficients")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge command line, config file and defaults (in that order of priority)."""
    cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise CliError(f"{args.config}: config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise CliError(f"{args.config}: unknown settings {sorted(unknown)}")
    out = dict(DEFAULTS)
    out.update(cfg)
    out.update({k: v for k, v in vars(args).items() if k not in ("config", "command")})
    out["command"] = args.command
    # settings given explicitly (e.g. --seed overrides a scenario's own seed)
    out["_explicit"] = set(cfg) | set(vars(args))
    if out["threads"] < 1:
        raise CliError("--threads must be at least 1")
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_json(path) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"{out}: cannot create output directory ({exc.strerror})") from None
    return out


def _load(cfg) -> tuple[SurvivalDataset, ColumnRoles]:
    if not cfg["data"] or not cfg["roles"]:
        raise CliError("--data and --roles are required")
    for key in ("data", "roles"):
        if not Path(cfg[key]).is_file():
            raise CliError(f"{cfg[key]}: no such file")
    try:
        roles = ColumnRoles.from_mapping(_read_json(cfg["roles"]))
        return load_csv(cfg["data"], roles), roles
    except DataValidationError as exc:
        raise CliError(f"{cfg['data']}: {exc}") from None


def _scenario(path, cfg) -> SimulationScenario:
    if path is None:
        sc = SimulationScenario()
    elif isinstance(path, dict):
        sc = SimulationScenario.from_dict(path)
    else:
        try:
            sc = SimulationScenario.from_dict(_read_json(path))
        except (TypeError, ValueError) as exc:
            raise CliError(f"{path}: {exc}") from None
    kw = {"frailty_enabled": cfg["frailty"] == "on"}
    if "seed" in cfg["_explicit"]:
        kw["seed"] = cfg["seed"]
    return sc.with_(**kw)


def _alpha_grid(cfg, fallback) -> tuple[float, ...]:
    g = cfg["alpha_grid"]
    if g is None:
        return tuple(fallback)
    if isinstance(g, str):
        try:
            g = [float(x) for x in g.split(",") if x.strip()]
        except ValueError:
            raise CliError(f"--alpha-grid: cannot parse {cfg['alpha_grid']!r}") from None
    if not g:
        raise CliError("--alpha-grid is empty")
    return tuple(float(x) for x in g)


def _fit_settings(cfg) -> FitSettings:
    return FitSettings(
        frailty_enabled=cfg["frailty"] == "on",
        stages=int(cfg["k_stages"]),
        n_lambda=int(cfg["n_lambda"]),
        min_ratio=float(cfg["min_ratio"]),
        tol=float(cfg["tol"]),
        max_iter=int(cfg["max_iter"]),
    )


def _names(ds: SurvivalDataset, block: str) -> list[str]:
    return list(ds.column_names(block))


def _named(values, names) -> dict[str, float]:
    return {n: float(v) for n, v in zip(names, values)}


def _params_report(params: ParamSet, ds: SurvivalDataset) -> dict:
    d = params.to_dict()
    d["support_beta"] = [n for n, v in zip(_names(ds, "Xp"), params.beta_p) if v != 0]
    d["support_b"] = [n for n, v in zip(_names(ds, "Zp"), params.b_p) if v != 0]
    return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg) -> int:
    sc = _scenario(cfg["scenario"], cfg)
    truth = simulate(sc)
    ds = truth.dataset
    out = _out_dir(cfg)
    zu = [f"zu{j + 1}" for j in range(ds.Zu.shape[1])]
    genes = [f"g{j + 1}" for j in range(ds.Zp.shape[1])]
    xu = [f"xu{j + 1}" for j in range(ds.Xu.shape[1])]
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "status"] + zu + genes + xu)
        for i in range(ds.n):
            row = [repr(float(ds.t[i])), str(int(ds.delta[i]))]
            row += [repr(float(v)) for v in ds.Zu[i]]
            row += [repr(float(v)) for v in ds.Zp[i]]
            row += [repr(float(v)) for v in ds.Xu[i]]
            w.writerow(row)
    roles = ColumnRoles("time", "status", tuple(zu), tuple(genes), tuple(xu), tuple(genes), shared_penalized=True)
    _write_json(out / "roles.json", roles.to_mapping())
    doc = truth.to_dict()
    doc["scenario"] = sc.to_dict()
    doc["names_beta"] = genes
    doc["names_b"] = genes
    _write_json(out / "truth.json", doc)
    return EXIT_OK


def _null_and_lmax(ds: SurvivalDataset, settings: FitSettings, alpha_enet: float):
    init = initialize(ds, settings.frailty_enabled)
    null = null_fit(ds, init, settings.tol, settings.max_iter, settings.theta_step, settings.solver_max_iter)
    return null, lambda_max(ds, null.params, null.estep, alpha_enet)


def _fit_em(cfg, ds: SurvivalDataset, out: Path) -> int:
    settings = _fit_settings(cfg)
    alpha_enet = float(cfg["alpha_enet"])
    lam_arg = str(cfg["lambda"])
    if lam_arg == "auto":
        res = cross_validate(ds, (alpha_enet,), int(cfg["folds"]), cfg["seed"], settings)
        res.table.to_csv(out / "cv.csv")
        doc = {"mode": "auto", **res.to_dict(), "params": _params_report(res.params, ds)}
        doc["converged"] = res.fit.converged
        doc["iterations"] = res.fit.iterations
        _write_json(out / "fit.json", doc)
        return EXIT_OK if res.fit.converged else EXIT_NOT_CONVERGED

    scaled, info = standardize_penalized(ds) if settings.standardize else (ds, None)
    null, lmax = _null_and_lmax(scaled, settings, alpha_enet)

    def raw(p):
        return unscale_params(p, info) if info is not None else p

    if lam_arg == "path":
        grid = log_grid(lmax, settings.n_lambda, settings.min_ratio)
        cfgp = PenaltyConfig(grid, alpha_enet, settings.stages, weight_cap=settings.weight_cap)
        path = fit_path(
            scaled,
            cfgp,
            null.params,
            settings.tol,
            settings.max_iter,
            theta_step=settings.theta_step,
            solver_max_iter=settings.solver_max_iter,
        )
        names_b, names_beta = _names(ds, "Zp"), _names(ds, "Xp")
        entries = []
        with open(out / "path.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["index", "stage", "lambda", "converged", "iterations", "loglik"]
                + [f"b_p:{x}" for x in names_b]
                + [f"beta_p:{x}" for x in names_beta]
            )
            for e in path.entries:
                p = raw(e.fit.params)
                ll = observed_log_likelihood(p, ds)
                w.writerow(
                    [e.index, e.stage, repr(e.lam), int(e.fit.converged), e.fit.iterations, repr(ll)]
                    + [repr(float(v)) for v in p.b_p]
                    + [repr(float(v)) for v in p.beta_p]
                )
                entries.append(
                    {
                        "index": e.index,
                        "stage": e.stage,
                        "lambda": e.lam,
                        "converged": e.fit.converged,
                        "iterations": e.fit.iterations,
                        "params": _params_report(p, ds),
                    }
                )
        doc = {"mode": "path", "lambda_max": lmax, "alpha_enet": alpha_enet, "standardized": info is not None}
        doc["entries"] = entries
        _write_json(out / "fit.json", doc)
        ok = all(e.fit.converged for e in path.entries)
        return EXIT_OK if ok else EXIT_NOT_CONVERGED

    if lam_arg == "max":
        lam = lmax
    else:
        try:
            lam = float(lam_arg)
        except ValueError:
            raise CliError(f"--lambda must be auto, path, max or a number, got {lam_arg!r}") from None
        if not lam >= 0:
            raise CliError("--lambda must be non-negative")
    cfgp = PenaltyConfig([lam], alpha_enet, settings.stages, weight_cap=settings.weight_cap)
    path = fit_path(
        scaled,
        cfgp,
        null.params,
        settings.tol,
        settings.max_iter,
        theta_step=settings.theta_step,
        solver_max_iter=settings.solver_max_iter,
    )
    fits = [e.fit for e in path.entries]
    fit = path.fit_at(0)
    p = raw(fit.params)
    doc = {
        "mode": "value",
        "lambda": lam,
        "lambda_max": lmax,
        "alpha_enet": alpha_enet,
        "stages": settings.stages,
        "standardized": info is not None,
        "converged": all(f.converged for f in fits),
        "iterations": fit.iterations,
        "objective_trace": [list(r) for r in fit.objective_trace],
        "params": _params_report(p, ds),
        "notes": fit.notes,
    }
    _write_json(out / "fit.json", doc)
    return EXIT_OK if doc["converged"] else EXIT_NOT_CONVERGED


def _fit_gmifs(cfg, ds: SurvivalDataset, out: Path) -> int:
    scaled, info = standardize_penalized(ds)
    res = gmifs_fit(scaled, float(cfg["epsilon"]), int(cfg["max_steps"]), cfg["frailty"] == "on", DEFAULT_REFRESH)
    params = unscale_params(res.params, info)
    # path.csv stays on the standardized scale, where the step size applies
    write_path_csv(res, out / "path.csv", _names(ds, "Zp"), _names(ds, "Xp"))
    st = res.state
    doc = {
        "mode": "gmifs",
        "epsilon": st.epsilon,
        "steps": st.step,
        "selected_step": res.selected_step,
        "stop_reason": st.stop_reason,
        "aic": float(res.aic[res.selected_step]),
        "standardized_path": True,
        "params": _params_report(params, ds),
    }
    _write_json(out / "fit.json", doc)
    return EXIT_NOT_CONVERGED if st.stop_reason == "max_steps reached" else EXIT_OK


def cmd_fit(cfg) -> int:
    ds, _ = _load(cfg)
    out = _out_dir(cfg)
    if cfg["method"] == "gmifs":
        return _fit_gmifs(cfg, ds, out)
    return _fit_em(cfg, ds, out)


def cmd_cv(cfg) -> int:
    ds, _ = _load(cfg)
    out = _out_dir(cfg)
    settings = _fit_settings(cfg)
    alphas = _alpha_grid(cfg, APP_ALPHA_GRID)
    if int(cfg["repeats"]) > 0:
        rep = repeated_split_selection(
            ds,
            int(cfg["repeats"]),
            float(cfg["test_fraction"]),
            alphas,
            int(cfg["folds"]),
            cfg["seed"],
            settings,
            bool(cfg["alpha_on_test"]),
        )
        doc = rep.to_dict()
        doc["names_beta"] = _names(ds, "Xp")
        doc["names_b"] = _names(ds, "Zp")
        doc["avg_beta_named"] = _named(rep.avg_beta, doc["names_beta"])
        _write_json(out / "stability.json", doc)
        return EXIT_OK
    res = cross_validate(ds, alphas, int(cfg["folds"]), cfg["seed"], settings)
    res.table.to_csv(out / "cv.csv")
    doc = {"mode": "auto", **res.to_dict(), "params": _params_report(res.params, ds)}
    doc["converged"] = res.fit.converged
    _write_json(out / "fit.json", doc)
    return EXIT_OK if res.fit.converged else EXIT_NOT_CONVERGED


def cmd_bench(cfg) -> int:
    paths = cfg["scenario"]
    if paths is None:
        paths = [None]
    elif isinstance(paths, (str, dict)):
        paths = [paths]
    scenarios = [_scenario(p, cfg) for p in paths]
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in METHOD_NAMES]
    if bad or not methods:
        raise CliError(f"--methods: unknown {bad}; choose from {','.join(METHOD_NAMES)}")
    settings = BenchSettings(
        fit=replace(_fit_settings(cfg), frailty_enabled=True),
        alpha_grid=_alpha_grid(cfg, SIM_ALPHA_GRID),
        k=int(cfg["folds"]),
        test_fraction=float(cfg["test_fraction"]),
        alpha_on_test=bool(cfg["alpha_on_test"]),
        gmifs_epsilon=float(cfg["epsilon"]),
        gmifs_max_steps=int(cfg["max_steps"]),
        oracle_max_iter=4 * int(cfg["max_iter"]),
    )
    report = benchmark(scenarios, methods, int(cfg["M"]), settings, int(cfg["threads"]), bool(cfg["per_alpha"]))
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    report.write(_out_dir(cfg), [sc.seed for sc in scenarios], timestamp=stamp)
    return EXIT_OK


def _fit_params(doc) -> ParamSet:
    if "params" not in doc:
        raise CliError("fit.json holds no single model (a path?); refit with --lambda auto or a value")
    return ParamSet.from_dict(doc["params"])


def cmd_metrics(cfg) -> int:
    if not cfg["truth"] or not cfg["fit"]:
        raise CliError("--truth and --fit are required")
    truth = _read_json(cfg["truth"])
    fit = _fit_params(_read_json(cfg["fit"]))
    tp = ParamSet.from_dict(truth["params"])
    doc: dict[str, Any] = {
        "selection_beta": selection_metrics(tp.beta_p, fit.beta_p).to_dict(),
        "selection_b": selection_metrics(tp.b_p, fit.b_p).to_dict(),
    }
    if cfg["data"]:
        ds, _ = _load(cfg)
        sig_beta = np.asarray(truth["signal_indices_beta"], dtype=int)
        sig_b = np.asarray(truth["signal_indices_b"], dtype=int)
        orc = fit_oracle(ds, sig_beta, sig_b, tp.frailty_enabled, float(cfg["tol"]), max(int(cfg["max_iter"]), 2000))
        sigma = SigmaSpec(truth.get("rho", 0.0), truth.get("block_size", 1))
        for name, est, tru, o in (("beta", fit.beta_p, tp.beta_p, orc.beta_p), ("b", fit.b_p, tp.b_p, orc.b_p)):
            e = rme_err(est, tru, sigma, o)
            doc[f"rme_{name}"], doc[f"err_{name}"] = e.rme, e.err
        pi_hat = uncured_probabilities(fit, ds)
        score = latency_predictor(fit, ds)
        doc["c"] = c_statistic(score, ds.t, ds.delta)
        doc["c_cure"] = c_statistic_cure(score, pi_hat, ds.t, ds.delta)
        if "pi_true" in truth:
            err = pi_hat - np.asarray(truth["pi_true"], dtype=float)
            doc["bias_pi"], doc["mse_pi"] = float(err.mean()), float(np.mean(err * err))
    _write_json(_out_dir(cfg) / "metrics.json", doc)
    return EXIT_OK


def _latency_coefs(doc, ds: SurvivalDataset) -> np.ndarray:
    names = _names(ds, "Xp")
    if "avg_beta_named" in doc:
        named = doc["avg_beta_named"]
    elif "params" in doc:
        named = dict(zip(names, doc["params"]["beta_p"]))
    else:
        raise CliError("--coefs must be a fit.json or stability.json")
    missing = [k for k in named if k not in names]
    if missing:
        raise CliError(f"coefficients name genes absent from the data: {missing[:5]}")
    return np.array([float(named.get(n, 0.0)) for n in names])


def cmd_prs(cfg) -> int:
    if not cfg["coefs"]:
        raise CliError("--coefs is required")
    ds, _ = _load(cfg)
    coefs = _latency_coefs(_read_json(cfg["coefs"]), ds)
    sel = np.flatnonzero(coefs != 0)
    risk = prognostic_risk_score(coefs[sel], ds.Xp[:, sel])
    stat, pval = logrank_test(risk.high, ds.t, ds.delta)
    out = _out_dir(cfg)
    with open(out / "prs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "score", "group"])
        for i, (s, h) in enumerate(zip(risk.scores, risk.high)):
            w.writerow([i, repr(float(s)), "high" if h else "low"])
    names = _names(ds, "Xp")
    doc = {
        "genes": [names[j] for j in sel],
        "coefficients": [float(coefs[j]) for j in sel],
        "n_high": int(risk.high.sum()),
        "n_low": int((~risk.high).sum()),
        "prs_logrank_stat": stat,
        "prs_logrank_p": pval,
        "flag": risk.flag,
    }
    _write_json(out / "prs.json", doc)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "cv": cmd_cv,
    "bench": cmd_bench,
    "metrics": cmd_metrics,
    "prs": cmd_prs,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        with threadpool_limits(1):
            return COMMANDS[args.command](cfg)
    except (
        CliError,
        DataValidationError,
        MetricError,
        SolverError,
        MStepError,
        NonFiniteError,
        DimensionError,
        KeyError,
        ValueError,
        OSError,
    ) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing field {exc}"
        print(f"penmcfm {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
