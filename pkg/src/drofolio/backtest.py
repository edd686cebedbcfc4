"""Rolling-window evaluation of allocation strategies.

At each decision point a strategy sees only the trailing window of returns,
produces weights, and holds them for the next block of periods; the realized
series is scored by cumulative return, risk, Sharpe ratio, and maximum
drawdown. Reports round-trip through CSV without losing a bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .dro_solver import DroProblem, solve_bcz_dro, solve_hd_dro
from .factor_model import (
    assemble_return_cov,
    estimate_factors,
    select_num_factors,
    select_threshold_constant,
    threshold_residual_cov,
)
from .longrun import default_bandwidth, hac_long_run_cov
from .panel import ReturnPanel
from .uncertainty import (
    UncertaintyParams,
    mv_closed_form,
    select_delta,
    select_rho,
)

STRATEGY_KINDS = ("hd_dro", "bcz_dro", "equal_weight", "mv_sample", "mv_poet")


@dataclass(frozen=True)
class Metrics:
    """Out-of-sample performance summary.

    ``cr`` is the sum of realized returns, ``risk`` their sample standard
    deviation, ``sr`` the ratio ``cr / (n * risk)``, and ``mdd`` the largest
    cumulative loss over any contiguous stretch, floored at zero.
    """

    cr: float
    risk: float
    sr: float
    mdd: float

    def as_dict(self) -> dict:
        return {"cr": self.cr, "risk": self.risk, "sr": self.sr, "mdd": self.mdd}


def metrics(returns) -> Metrics:
    """Score a realized return series; needs at least two observations."""
    r = np.asarray(returns, dtype=float)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need a 1-d series of length >= 2")
    n = r.shape[0]
    cr = float(np.sum(r))
    risk = float(np.sqrt(np.sum((r - cr / n) ** 2) / (n - 1)))
    if risk == 0.0:
        sr = math.inf if cr > 0 else -math.inf if cr < 0 else 0.0
    else:
        sr = cr / (n * risk)
    cum = np.concatenate([[0.0], np.cumsum(r)])
    peaks = np.maximum.accumulate(cum)[:-1]
    mdd = max(float(np.max(peaks - cum[1:])), 0.0)
    return Metrics(cr=cr, risk=risk, sr=sr, mdd=mdd)


@dataclass(frozen=True)
class StrategySpec:
    """How to build weights at each rebalance.

    ``kind`` picks the strategy. The robust kinds are governed either by
    confidence levels (``delta_level``, ``rho_level``) or by explicitly fixed
    values (``fixed_delta``, ``fixed_rho``); a fixed value, when given, takes
    precedence, and the whole-return-vector benchmark requires both fixed
    values since its own tuning rule is out of scope. ``k`` pins the factor
    count; leave it ``None`` to select by the information criterion up to
    ``max_k``. The residual threshold constant is either ``threshold_c`` or,
    when ``threshold_cv`` is set, chosen by cross-validation each window.
    """

    kind: str
    target_return: float = 5e-4
    delta_level: float = 0.95
    rho_level: float = 0.95
    fixed_delta: float | None = None
    fixed_rho: float | None = None
    k: int | None = None
    max_k: int = 8
    threshold_c: float = 0.5
    threshold_cv: bool = False
    threshold_rule: str = "soft"
    cv_folds: int = 5
    draws: int = 200_000

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGY_KINDS}")
        for name, level in (("delta_level", self.delta_level), ("rho_level", self.rho_level)):
            if not 0.0 < level < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {level}")
        if self.kind == "bcz_dro" and (self.fixed_delta is None or self.fixed_rho is None):
            raise ValueError("bcz_dro requires fixed_delta and fixed_rho")
        if self.fixed_delta is not None and self.fixed_delta < 0:
            raise ValueError("fixed_delta must be >= 0")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1 when given")
        if self.threshold_rule not in ("soft", "hard"):
            raise ValueError("threshold_rule must be 'soft' or 'hard'")

    @property
    def k_bound(self) -> int:
        return self.k if self.k is not None else self.max_k


@dataclass(frozen=True)
class WindowDiagnostics:
    """What happened inside one rebalance."""

    params: UncertaintyParams | None
    solver_status: str
    fallback: bool
    messages: tuple = ()


@dataclass(frozen=True, eq=False)
class BacktestReport:
    portfolio_returns: np.ndarray
    weights_history: tuple  # ((rebalance_time, weights array), ...)
    metrics: Metrics
    per_window_diagnostics: tuple
    asset_ids: tuple
    time_index: tuple
    events: tuple = ()


def _gmv_weights(cov: np.ndarray) -> np.ndarray:
    inv = np.linalg.solve(cov, np.ones(cov.shape[0]))
    return inv / inv.sum()


def _choose_k(panel: ReturnPanel, spec: StrategySpec) -> tuple[int, list[str]]:
    if spec.k is not None:
        return spec.k, []
    max_k = min(spec.max_k, min(panel.n_assets, panel.n_periods) - 1)
    k = select_num_factors(panel, max_k)
    if k == 0:
        return 1, ["factor selection returned 0; floored at 1"]
    return k, []


def poet_model(panel: ReturnPanel, spec: StrategySpec, seed):
    events: list[str] = []
    k, k_events = _choose_k(panel, spec)
    events.extend(k_events)
    fit = estimate_factors(panel, k)
    if spec.threshold_cv:
        c = select_threshold_constant(
            fit.residuals, folds=spec.cv_folds, seed=seed, rule=spec.threshold_rule
        )
    else:
        c = spec.threshold_c
    residual = threshold_residual_cov(fit.residuals, c, spec.threshold_rule)
    return fit, assemble_return_cov(fit, residual), events


def calibrate_window(panel_fit, cov_model, spec: StrategySpec, seed=0) -> UncertaintyParams:
    """Radius and floor for one window, honoring any fixed overrides.

    A fixed radius replaces the calibrated one before the floor is computed,
    because the floor backs off the target by the radius-scaled penalty; a
    fixed floor then replaces the calibrated floor. The returned record
    carries the values actually used.
    """
    q_t = default_bandwidth(panel_fit.n_periods, panel_fit.n_assets, 5.0)
    longrun = hac_long_run_cov(panel_fit.factors, panel_fit.factor_mean, q_t)
    if spec.fixed_delta is not None:
        delta = spec.fixed_delta
    else:
        delta = select_delta(panel_fit, longrun, spec.delta_level, spec.draws, seed)
    w_mv = mv_closed_form(cov_model.mean, cov_model.sigma_r, spec.target_return)
    params = select_rho(
        delta, panel_fit, longrun, w_mv, spec.target_return, 1.0 - spec.rho_level,
        delta_level=spec.delta_level,
    )
    if spec.fixed_rho is not None and spec.fixed_rho != params.rho:
        params = dataclasses.replace(params, rho=spec.fixed_rho)
    return params


def build_weights(panel_window: ReturnPanel, spec: StrategySpec, seed: int = 0):
    """Weights for one window under a strategy spec.

    Returns ``(weights, diagnostics)``. An infeasible robust program falls
    back to the minimum-variance allocation on the same covariance model and
    records the event instead of aborting the backtest.
    """
    p = panel_window.n_assets
    if spec.kind == "equal_weight":
        return np.full(p, 1.0 / p), WindowDiagnostics(None, "closed_form", False)

    if spec.kind == "mv_sample":
        if p >= panel_window.n_periods:
            raise ValueError(
                f"sample covariance is singular with p={p} >= window="
                f"{panel_window.n_periods}; use the mv_poet strategy"
            )
        mean = panel_window.returns.mean(axis=1)
        cov = np.cov(panel_window.returns, ddof=1)
        try:
            w = mv_closed_form(mean, cov, spec.target_return)
        except ValueError as exc:
            raise ValueError(f"mean-variance solve failed: {exc}; use the mv_poet strategy")
        return w, WindowDiagnostics(None, "closed_form", False)

    if spec.kind == "bcz_dro":
        mean = panel_window.returns.mean(axis=1)
        cov = np.cov(panel_window.returns, ddof=1)
        solution = solve_bcz_dro(mean, cov, spec.fixed_delta, spec.fixed_rho)
        if solution.weights is None:
            return _gmv_weights(cov), WindowDiagnostics(
                None, solution.status, True, ("infeasible; fell back to minimum variance",)
            )
        return solution.weights, WindowDiagnostics(None, solution.status, False)

    fit, cov_model, events = poet_model(panel_window, spec, seed)

    if spec.kind == "mv_poet":
        w = mv_closed_form(cov_model.mean, cov_model.sigma_r, spec.target_return)
        return w, WindowDiagnostics(None, "closed_form", False, tuple(events))

    # hd_dro: calibrate the radius and floor, then solve the dual program.
    params = calibrate_window(fit, cov_model, spec, seed)
    problem = DroProblem(
        loadings=fit.loadings,
        factor_cov=cov_model.factor_cov,
        factor_mean=fit.factor_mean,
        residual_cov=cov_model.residual_cov.matrix,
        delta=params.delta,
        rho=params.rho,
    )
    solution = solve_hd_dro(problem)
    if solution.weights is None:
        events.append("robust program infeasible; fell back to minimum variance")
        return _gmv_weights(cov_model.sigma_r), WindowDiagnostics(
            params, solution.status, True, tuple(events)
        )
    return solution.weights, WindowDiagnostics(params, solution.status, False, tuple(events))


def rolling_backtest(
    panel: ReturnPanel,
    spec: StrategySpec,
    window: int,
    holding: int,
    seed: int = 0,
) -> BacktestReport:
    """Walk the panel: fit on the trailing window, hold for the next block.

    Decision points are ``window, window + holding, ...``; the final block
    is truncated at the end of the panel rather than skipped. Weights at a
    decision point depend only on columns before it.
    """
    t = panel.n_periods
    if window + holding > t:
        raise ValueError(f"window {window} + holding {holding} exceeds panel length {t}")
    if holding < 1:
        raise ValueError("holding must be >= 1")
    if window < 2 * spec.k_bound:
        raise ValueError(f"window {window} too short for up to {spec.k_bound} factors")

    realized: list[np.ndarray] = []
    history = []
    diagnostics = []
    events: list[str] = []
    for index, t_c in enumerate(range(window, t, holding)):
        sub = panel.window(t_c - window, t_c)
        window_seed = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
        try:
            weights, diag = build_weights(sub, spec, seed=window_seed)
        except ValueError as exc:
            raise ValueError(f"window {index} (decision point {t_c}): {exc}") from exc
        stop = min(t_c + holding, t)
        realized.append(weights @ panel.returns[:, t_c:stop])
        history.append((panel.time_index[t_c], weights))
        diagnostics.append(diag.params)
        for message in diag.messages:
            events.append(f"window {index}: {message}")

    returns = np.concatenate(realized)
    return BacktestReport(
        portfolio_returns=returns,
        weights_history=tuple(history),
        metrics=metrics(returns),
        per_window_diagnostics=tuple(diagnostics),
        asset_ids=panel.asset_ids,
        time_index=panel.time_index[window:t],
        events=tuple(events),
    )


# ---------------------------------------------------------------------------
# Report files: one JSON with everything, two CSVs that round-trip exactly.


def _fmt(value: float) -> str:
    return repr(float(value))


def write_report(report: BacktestReport, out_dir, provenance: dict | None = None) -> dict:
    """Write report.json, equity.csv, and weights.csv under ``out_dir``.

    Floats go through ``repr`` so re-reading the CSVs recovers the exact
    binary values; recomputing metrics from the equity curve reproduces the
    stored metrics bit for bit.
    """
    os.makedirs(out_dir, exist_ok=True)
    provenance = provenance or {}
    header_lines = [f"# {key}={value}" for key, value in sorted(provenance.items())]

    equity_path = os.path.join(out_dir, "equity.csv")
    with open(equity_path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("time,portfolio_return,cumulative_return\n")
        cum = 0.0
        for label, value in zip(report.time_index, report.portfolio_returns):
            cum += float(value)
            fh.write(f"{label},{_fmt(value)},{_fmt(cum)}\n")

    weights_path = os.path.join(out_dir, "weights.csv")
    with open(weights_path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("rebalance_time,asset_id,weight\n")
        for label, weights in report.weights_history:
            for asset, weight in zip(report.asset_ids, weights):
                fh.write(f"{label},{asset},{_fmt(weight)}\n")

    payload = {
        "provenance": provenance,
        "metrics": report.metrics.as_dict(),
        "portfolio_returns": [float(v) for v in report.portfolio_returns],
        "time_index": list(report.time_index),
        "weights_history": [
            {"rebalance_time": label, "weights": dict(zip(report.asset_ids, map(float, w)))}
            for label, w in report.weights_history
        ],
        "per_window_diagnostics": [
            params.as_dict() if params is not None else None
            for params in report.per_window_diagnostics
        ],
        "events": list(report.events),
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return {"report": report_path, "equity": equity_path, "weights": weights_path}


def read_equity_csv(path) -> tuple[list, np.ndarray, np.ndarray]:
    """Parse an equity curve written by ``write_report``."""
    times, rets, cums = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("time,"):
                continue
            label, ret, cum = line.split(",")
            times.append(label)
            rets.append(float(ret))
            cums.append(float(cum))
    return times, np.array(rets), np.array(cums)
