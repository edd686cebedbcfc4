"""Distributionally robust mean-variance portfolios on latent factor models."""

__version__ = "0.1.0"

from .backtest import (
    BacktestReport,
    Metrics,
    StrategySpec,
    build_weights,
    calibrate_window,
    metrics,
    rolling_backtest,
    write_report,
)
from .dro_solver import (
    DroProblem,
    PortfolioWeights,
    check_feasibility,
    kkt_residual,
    solve_bcz_dro,
    solve_hd_dro,
)
from .factor_model import (
    CovModel,
    FactorFit,
    SparseResidualCov,
    assemble_return_cov,
    cross_validate_threshold,
    estimate_factors,
    select_num_factors,
    threshold_residual_cov,
)
from .longrun import LongRunCov, autocov, default_bandwidth, hac_long_run_cov, iid_long_run_cov
from .panel import ReturnPanel, load_returns_csv
from .simulation import (
    DgpParams,
    ExperimentConfig,
    calibrate_dgp,
    default_dgp_params,
    oracle_delta,
    run_experiment,
    simulate_panel,
)
from .uncertainty import (
    UncertaintyParams,
    calibrate_uncertainty,
    max_feasible_rho,
    mv_closed_form,
    quadform_quantile,
    select_delta,
    select_rho,
)

__all__ = [
    "BacktestReport",
    "CovModel",
    "DgpParams",
    "DroProblem",
    "ExperimentConfig",
    "FactorFit",
    "LongRunCov",
    "Metrics",
    "PortfolioWeights",
    "ReturnPanel",
    "SparseResidualCov",
    "StrategySpec",
    "UncertaintyParams",
    "assemble_return_cov",
    "autocov",
    "build_weights",
    "calibrate_dgp",
    "calibrate_uncertainty",
    "calibrate_window",
    "check_feasibility",
    "cross_validate_threshold",
    "default_bandwidth",
    "default_dgp_params",
    "estimate_factors",
    "hac_long_run_cov",
    "iid_long_run_cov",
    "kkt_residual",
    "load_returns_csv",
    "max_feasible_rho",
    "metrics",
    "mv_closed_form",
    "oracle_delta",
    "quadform_quantile",
    "rolling_backtest",
    "run_experiment",
    "select_delta",
    "select_num_factors",
    "select_rho",
    "simulate_panel",
    "solve_bcz_dro",
    "solve_hd_dro",
    "threshold_residual_cov",
    "write_report",
]
