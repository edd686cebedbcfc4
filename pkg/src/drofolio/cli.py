"""Command-line interface: reproducible runs from CSV or simulation to files.

Subcommands: ``estimate`` (factor fit and covariance), ``calibrate-uncertainty``
(radius and floor), ``allocate`` (robust weights), ``backtest`` (rolling
windows), and ``simulate`` (experiment tables). Every artifact embeds the
resolved configuration hash, seed, and tool version, so identical invocations
produce identical files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 infeasible
allocation, 1 internal failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback

from . import __version__
from .backtest import (
    StrategySpec,
    calibrate_window,
    poet_model,
    rolling_backtest,
    write_report,
)
from .dro_solver import DroProblem, check_feasibility, solve_hd_dro
from .panel import ReturnPanel, load_returns_csv
from .simulation import EXPERIMENT_KINDS, ExperimentConfig, run_experiment


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class InfeasibleError(Exception):
    def __init__(self, rho: float, g_bar: float):
        super().__init__(
            f"allocation infeasible: requested floor rho={rho!r} exceeds the "
            f"largest feasible value g_bar={g_bar!r}"
        )
        self.rho = rho
        self.g_bar = g_bar


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _config_hash(args: dict) -> str:
    # Paths identify where artifacts live, not what was computed; leave them
    # out so identical runs hash identically wherever they are written.
    scientific = {k: v for k, v in args.items() if k not in ("out", "input", "config")}
    canonical = json.dumps(scientific, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _provenance(command: str, args: dict) -> dict:
    return {
        "tool": "drofolio",
        "version": __version__,
        "command": command,
        "seed": args.get("seed", 0),
        "config_hash": _config_hash(args),
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, columns, rows, provenance: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(provenance):
            fh.write(f"# {key}={provenance[key]}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[col]) for col in columns) + "\n")


# ---------------------------------------------------------------------------
# Argument plumbing

_CONFIG_TYPES = {
    "input": str,
    "out": str,
    "target_return": float,
    "delta_level": float,
    "rho_level": float,
    "window": int,
    "holding": int,
    "k": int,
    "max_k": int,
    "seed": int,
    "strategies": str,
    "threshold_rule": str,
    "threshold_c": float,
    "threshold_cv": lambda v: str(v).lower() in ("1", "true", "yes"),
    "fixed_delta": float,
    "fixed_rho": float,
    "kind": str,
    "p": str,
    "reps": int,
    "t": int,
    "test_t": int,
    "levels": str,
    "j_list": str,
    "draws": int,
}


def _load_config_file(path) -> dict:
    """One ``key = value`` pair per line; '#' starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {line_no}: expected key = value")
                key, _, value = line.partition("=")
                key = key.strip().replace("-", "_")
                value = value.strip().strip("\"'")
                if key not in _CONFIG_TYPES:
                    raise ConfigError(f"{path}: line {line_no}: unknown key {key!r}")
                try:
                    values[key] = _CONFIG_TYPES[key](value)
                except ValueError:
                    raise ConfigError(f"{path}: line {line_no}: bad value for {key!r}")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    return values


def _add_common(parser, *, with_input=True):
    if with_input:
        parser.add_argument("--input", help="path to the returns CSV (header of asset ids; "
                            "first column period label; values per-period decimal excess returns)")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--config", help="key = value config file; flags override it")
    parser.add_argument("--seed", type=int, default=None, help="master random seed (integer)")


def _add_model_flags(parser):
    parser.add_argument("--k", type=int, default=None,
                        help="fixed number of factors (count); omit to select automatically")
    parser.add_argument("--max-k", dest="max_k", type=int, default=None,
                        help="upper bound for automatic factor selection (count, default 8)")
    parser.add_argument("--threshold-rule", dest="threshold_rule", choices=("soft", "hard"),
                        default=None, help="residual covariance shrinkage rule (default soft)")
    parser.add_argument("--threshold-c", dest="threshold_c", type=float, default=None,
                        help="fixed residual threshold constant (dimensionless, default 0.5)")
    parser.add_argument("--threshold-cv", dest="threshold_cv", action="store_true", default=None,
                        help="choose the threshold constant by cross-validation instead")


def _add_uncertainty_flags(parser):
    parser.add_argument("--target-return", dest="target_return", type=float, default=None,
                        help="target per-period excess return (decimal, default 0.0005)")
    parser.add_argument("--delta-level", dest="delta_level", type=float, default=None,
                        help="confidence level for the ambiguity radius in (0,1), default 0.95")
    parser.add_argument("--rho-level", dest="rho_level", type=float, default=None,
                        help="confidence level for the return floor in (0,1), default 0.95")
    parser.add_argument("--fixed-delta", dest="fixed_delta", type=float, default=None,
                        help="override: ambiguity radius (squared return units)")
    parser.add_argument("--fixed-rho", dest="fixed_rho", type=float, default=None,
                        help="override: worst-case return floor (per-period decimal)")
    parser.add_argument("--draws", type=int, default=None,
                        help="Monte Carlo draws for quantiles (count, default 200000)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drofolio",
        description="Distributionally robust mean-variance portfolios on latent factor models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit the factor model and covariance from a CSV panel")
    _add_common(est)
    _add_model_flags(est)

    cal = sub.add_parser("calibrate-uncertainty",
                         help="calibrate the ambiguity radius and return floor")
    _add_common(cal)
    _add_model_flags(cal)
    _add_uncertainty_flags(cal)

    alloc = sub.add_parser("allocate", help="solve the robust allocation on a CSV panel")
    _add_common(alloc)
    _add_model_flags(alloc)
    _add_uncertainty_flags(alloc)

    back = sub.add_parser("backtest", help="rolling-window evaluation of strategies")
    _add_common(back)
    _add_model_flags(back)
    _add_uncertainty_flags(back)
    back.add_argument("--window", type=int, default=None, help="training window length (periods)")
    back.add_argument("--holding", type=int, default=None, help="holding block length (periods)")
    back.add_argument("--strategies", default=None,
                      help="comma list from hd_dro,bcz_dro,equal_weight,mv_sample,mv_poet "
                           "(default hd_dro,equal_weight)")

    sim = sub.add_parser("simulate", help="run a seeded synthetic experiment table")
    _add_common(sim, with_input=False)
    sim.add_argument("--kind", choices=EXPERIMENT_KINDS, default=None,
                     help="which experiment table to produce")
    sim.add_argument("--p", default=None, help="comma list of cross-section sizes (counts)")
    sim.add_argument("--reps", type=int, default=None, help="replications per cell (count)")
    sim.add_argument("--t", type=int, default=None, help="training panel length (periods)")
    sim.add_argument("--test-t", dest="test_t", type=int, default=None,
                     help="test panel length for portfolio tables (periods)")
    sim.add_argument("--levels", default=None,
                     help="comma list of confidence levels in (0,1), default 0.9,0.95,0.99")
    sim.add_argument("--j-list", dest="j_list", default=None,
                     help="comma list of persistence multipliers for the uncertainty curve")
    sim.add_argument("--draws", type=int, default=None,
                     help="Monte Carlo draws for quantiles (count, default 200000)")
    sim.add_argument("--target-return", dest="target_return", type=float, default=None,
                     help="target per-period excess return (decimal, default 0.0005)")
    sim.add_argument("--threshold-rule", dest="threshold_rule", choices=("soft", "hard"),
                     default=None, help="residual covariance shrinkage rule (default soft)")
    sim.add_argument("--threshold-c", dest="threshold_c", type=float, default=None,
                     help="fixed residual threshold constant (dimensionless, default 0.5)")
    return parser


_DEFAULTS = {
    "seed": 0,
    "target_return": 5e-4,
    "delta_level": 0.95,
    "rho_level": 0.95,
    "max_k": 8,
    "threshold_rule": "soft",
    "threshold_c": 0.5,
    "threshold_cv": False,
    "strategies": "hd_dro,equal_weight",
    "draws": 200_000,
    "reps": 500,
    "t": 200,
    "test_t": 200,
    "levels": "0.9,0.95,0.99",
    "p": "30,50,80,100",
    "j_list": "1,2,3,4,5,6",
}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge flag values over config-file values over defaults."""
    resolved = dict(_DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(_load_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            resolved[key] = value
    return resolved


def _require(resolved: dict, *keys):
    for key in keys:
        if resolved.get(key) in (None, ""):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _load_panel(resolved: dict) -> ReturnPanel:
    path = resolved["input"]
    if not os.path.exists(path):
        raise ConfigError(f"input path does not exist: {path}")
    try:
        return load_returns_csv(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc))


def _strategy_spec(kind: str, resolved: dict) -> StrategySpec:
    try:
        return StrategySpec(
            kind=kind,
            target_return=resolved["target_return"],
            delta_level=resolved["delta_level"],
            rho_level=resolved["rho_level"],
            fixed_delta=resolved.get("fixed_delta"),
            fixed_rho=resolved.get("fixed_rho"),
            k=resolved.get("k"),
            max_k=resolved["max_k"],
            threshold_c=resolved["threshold_c"],
            threshold_cv=resolved["threshold_cv"],
            threshold_rule=resolved["threshold_rule"],
            draws=resolved["draws"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _cmd_estimate(resolved: dict) -> int:
    _require(resolved, "input", "out")
    panel = _load_panel(resolved)
    spec = _strategy_spec("mv_poet", resolved)
    fit, cov_model, events = poet_model(panel, spec, seed=resolved["seed"])
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    prov = _provenance("estimate", resolved)

    _write_csv(
        os.path.join(out, "loadings.csv"),
        ["asset_id"] + [f"factor_{j + 1}" for j in range(fit.k)],
        [
            {"asset_id": asset, **{f"factor_{j + 1}": fit.loadings[i, j] for j in range(fit.k)}}
            for i, asset in enumerate(panel.asset_ids)
        ],
        prov,
    )
    _write_csv(
        os.path.join(out, "factors.csv"),
        ["time"] + [f"factor_{j + 1}" for j in range(fit.k)],
        [
            {"time": label, **{f"factor_{j + 1}": fit.factors[j, i] for j in range(fit.k)}}
            for i, label in enumerate(panel.time_index)
        ],
        prov,
    )
    _write_csv(
        os.path.join(out, "covariance.csv"),
        ["asset_id"] + list(panel.asset_ids),
        [
            {"asset_id": asset, **dict(zip(panel.asset_ids, cov_model.sigma_r[i]))}
            for i, asset in enumerate(panel.asset_ids)
        ],
        prov,
    )
    _write_json(
        os.path.join(out, "summary.json"),
        {
            "provenance": prov,
            "k": fit.k,
            "factor_mean": [float(v) for v in fit.factor_mean],
            "threshold_constant": cov_model.residual_cov.threshold_constant,
            "threshold_rule": cov_model.residual_cov.rule,
            "residual_zero_fraction": cov_model.residual_cov.zero_fraction,
            "events": events,
        },
    )
    print(f"estimated {fit.k} factors over {panel.n_assets} assets; artifacts in {out}")
    return 0


def _calibration(resolved: dict, panel: ReturnPanel):
    spec = _strategy_spec("hd_dro", resolved)
    fit, cov_model, events = poet_model(panel, spec, seed=resolved["seed"])
    params = calibrate_window(fit, cov_model, spec, seed=resolved["seed"])
    return spec, fit, cov_model, params, events


def _cmd_calibrate(resolved: dict) -> int:
    _require(resolved, "input", "out")
    panel = _load_panel(resolved)
    _, fit, cov_model, params, events = _calibration(resolved, panel)
    problem = DroProblem(
        loadings=fit.loadings,
        factor_cov=cov_model.factor_cov,
        factor_mean=fit.factor_mean,
        residual_cov=cov_model.residual_cov.matrix,
        delta=params.delta,
        rho=params.rho,
    )
    feas = check_feasibility(problem)
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(
        os.path.join(out, "uncertainty.json"),
        {
            "provenance": _provenance("calibrate-uncertainty", resolved),
            **params.as_dict(),
            "g_bar": feas.g_bar,
            "feasible": feas.feasible,
            "k": fit.k,
            "events": events,
        },
    )
    print(f"delta={params.delta:.6e} rho={params.rho:.6e} (g_bar={feas.g_bar:.6e})")
    return 0


def _cmd_allocate(resolved: dict) -> int:
    _require(resolved, "input", "out")
    panel = _load_panel(resolved)
    _, fit, cov_model, params, events = _calibration(resolved, panel)
    delta, rho = params.delta, params.rho
    problem = DroProblem(
        loadings=fit.loadings,
        factor_cov=cov_model.factor_cov,
        factor_mean=fit.factor_mean,
        residual_cov=cov_model.residual_cov.matrix,
        delta=delta,
        rho=rho,
    )
    feas = check_feasibility(problem)
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    prov = _provenance("allocate", resolved)
    if not feas.feasible:
        _write_json(
            os.path.join(out, "solution.json"),
            {"provenance": prov, "status": "infeasible", "rho": rho, "g_bar": feas.g_bar,
             "delta": delta},
        )
        raise InfeasibleError(rho, feas.g_bar)

    solution = solve_hd_dro(problem)
    if solution.weights is None:
        raise InfeasibleError(rho, feas.g_bar)
    _write_csv(
        os.path.join(out, "weights.csv"),
        ["asset_id", "weight"],
        [
            {"asset_id": asset, "weight": float(w)}
            for asset, w in zip(panel.asset_ids, solution.weights)
        ],
        prov,
    )
    _write_json(
        os.path.join(out, "solution.json"),
        {
            "provenance": prov,
            "status": solution.status,
            "objective": solution.objective,
            "budget_residual": solution.budget_residual,
            "return_slack": solution.return_slack,
            "iterations": solution.iterations,
            "delta": delta,
            "rho": rho,
            "g_bar": feas.g_bar,
            "events": events,
        },
    )
    print(f"status={solution.status} objective={solution.objective:.6e}; artifacts in {out}")
    return 0


def _cmd_backtest(resolved: dict) -> int:
    _require(resolved, "input", "out", "window", "holding")
    panel = _load_panel(resolved)
    kinds = [k.strip() for k in str(resolved["strategies"]).split(",") if k.strip()]
    if not kinds:
        raise ConfigError("no strategies given")
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    prov = _provenance("backtest", resolved)
    summary_rows = []
    for kind in kinds:
        spec = _strategy_spec(kind, resolved)
        try:
            report = rolling_backtest(
                panel, spec, resolved["window"], resolved["holding"], seed=resolved["seed"]
            )
        except ValueError as exc:
            raise DataError(f"strategy {kind}: {exc}")
        write_report(report, os.path.join(out, kind), {**prov, "strategy": kind})
        summary_rows.append({"strategy": kind, **report.metrics.as_dict()})
        print(
            f"{kind}: cr={report.metrics.cr:.6f} risk={report.metrics.risk:.6f} "
            f"sr={report.metrics.sr:.4f} mdd={report.metrics.mdd:.6f}"
        )
    _write_csv(
        os.path.join(out, "summary.csv"),
        ["strategy", "cr", "risk", "sr", "mdd"],
        summary_rows,
        prov,
    )
    return 0


def _parse_float_list(raw: str) -> tuple:
    return tuple(float(v) for v in str(raw).split(",") if v.strip())


def _parse_int_list(raw: str) -> tuple:
    return tuple(int(v) for v in str(raw).split(",") if v.strip())


def _cmd_simulate(resolved: dict) -> int:
    _require(resolved, "kind", "out")
    try:
        config = ExperimentConfig(
            p_list=_parse_int_list(resolved["p"]),
            t=resolved["t"],
            test_t=resolved["test_t"],
            reps=resolved["reps"],
            levels=_parse_float_list(resolved["levels"]),
            target_return=resolved["target_return"],
            threshold_c=resolved["threshold_c"],
            threshold_rule=resolved["threshold_rule"],
            draws=resolved["draws"],
            j_list=_parse_int_list(resolved["j_list"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))
    table = run_experiment(resolved["kind"], config, resolved["seed"])
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    prov = _provenance("simulate", resolved)
    _write_csv(os.path.join(out, f"{table.kind}.csv"), table.columns, table.rows, prov)
    _write_json(
        os.path.join(out, f"{table.kind}_config.json"),
        {"provenance": prov, "kind": table.kind, "seed": table.seed, "config": table.config},
    )
    print(f"{table.kind}: {len(table.rows)} rows; artifacts in {out}")
    return 0


_COMMANDS = {
    "estimate": _cmd_estimate,
    "calibrate-uncertainty": _cmd_calibrate,
    "allocate": _cmd_allocate,
    "backtest": _cmd_backtest,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        resolved = _resolve(args)
        return _COMMANDS[args.command](resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InfeasibleError as exc:
        print(str(exc), file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
