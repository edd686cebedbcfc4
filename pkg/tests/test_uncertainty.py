import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import chi2

from drofolio.factor_model import FactorFit, estimate_factors, threshold_residual_cov
from drofolio.factor_model import assemble_return_cov
from drofolio.longrun import LongRunCov, default_bandwidth, hac_long_run_cov
from drofolio.simulation import default_dgp_params, oracle_delta, simulate_panel
from drofolio.uncertainty import (
    calibrate_uncertainty,
    max_feasible_rho,
    mv_closed_form,
    quadform_quantile,
    select_delta,
    select_rho,
)


def _toy_fit(factor_mean, t=100, p=4):
    """Minimal fit carrier for formula-level tests."""
    k = len(factor_mean)
    return FactorFit(
        k=k,
        factors=np.zeros((k, t)),
        loadings=np.ones((p, k)),
        factor_mean=np.asarray(factor_mean, dtype=float),
        second_moment=np.eye(k),
        residuals=np.zeros((p, t)),
    )


# ---------------------------------------------------------------------------
# quadform_quantile


def test_zero_covariance_all_levels():
    for level in (0.05, 0.5, 0.99):
        assert quadform_quantile(np.zeros((3, 3)), level, draws=2000, seed=0) == 0.0


def test_chi_square_one_dimensional():
    # Independent oracle: numeric inversion of the chi-square CDF.
    got = quadform_quantile(np.eye(1), 0.95, draws=200_000, seed=0)
    assert got == pytest.approx(chi2.ppf(0.95, 1), abs=0.05)


def test_chi_square_three_dimensional():
    got = quadform_quantile(np.eye(3), 0.9, draws=200_000, seed=1)
    assert got == pytest.approx(chi2.ppf(0.9, 3), abs=0.08)


def test_scaling_exact_for_diagonal():
    # Exact in exact arithmetic; floating point leaves the last ulp free.
    cov = np.diag([1.3, 0.4])
    base = quadform_quantile(cov, 0.95, draws=50_000, seed=2)
    scaled = quadform_quantile(2.5 * cov, 0.95, draws=50_000, seed=2)
    assert scaled == pytest.approx(2.5 * base, rel=1e-14)


def test_scaling_general_psd():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 3))
    cov = a @ a.T
    base = quadform_quantile(cov, 0.9, draws=50_000, seed=4)
    scaled = quadform_quantile(7.0 * cov, 0.9, draws=50_000, seed=4)
    assert scaled == pytest.approx(7.0 * base, rel=1e-12)


def test_quadform_validation():
    with pytest.raises(ValueError):
        quadform_quantile(np.eye(2), 1.5, draws=2000)
    with pytest.raises(ValueError):
        quadform_quantile(np.eye(2), 0.9, draws=10)
    with pytest.raises(ValueError):
        quadform_quantile(-np.eye(2), 0.9, draws=2000)


# ---------------------------------------------------------------------------
# select_delta


def test_select_delta_closed_form_composition():
    # Zero factor mean, identity long-run covariance, one factor: the radius
    # is the chi-square(1) quantile over 4T.
    t = 100
    fit = _toy_fit([0.0], t=t)
    longrun = LongRunCov(np.eye(1), 1)
    got = select_delta(fit, longrun, 0.95, draws=400_000, seed=5)
    assert got == pytest.approx(chi2.ppf(0.95, 1) / (4 * t), rel=0.02)


def test_select_delta_monotone_in_level_and_t_scaling():
    fit100 = _toy_fit([0.1, 0.05], t=100)
    fit400 = _toy_fit([0.1, 0.05], t=400)
    longrun = LongRunCov(np.diag([1.2, 0.9]), 3)
    lo = select_delta(fit100, longrun, 0.90, draws=50_000, seed=6)
    hi = select_delta(fit100, longrun, 0.99, draws=50_000, seed=6)
    assert lo < hi
    quarter = select_delta(fit400, longrun, 0.90, draws=50_000, seed=6)
    assert quarter == pytest.approx(lo / 4.0, rel=1e-12)


def test_select_delta_rejects_unnormalized_mean():
    fit = _toy_fit([1.2])
    with pytest.raises(ValueError, match="normalization"):
        select_delta(fit, LongRunCov(np.eye(1), 1), 0.95, draws=2000)


def test_estimated_delta_tracks_oracle():
    params = default_dgp_params(30)
    t = 200
    oracle = oracle_delta(params, 30, t, 0.95, seed=99)
    ratios = []
    for rep in range(40):
        panel, _ = simulate_panel(params, t, seed=300 + rep)
        fit = estimate_factors(panel, 2)
        longrun = hac_long_run_cov(
            fit.factors, fit.factor_mean, default_bandwidth(t, 30, 5.0)
        )
        ratios.append(select_delta(fit, longrun, 0.95, draws=50_000, seed=rep) / oracle)
    assert 0.85 <= float(np.median(ratios)) <= 1.10


# ---------------------------------------------------------------------------
# mv_closed_form


def test_mv_identities_and_hand_case():
    w = mv_closed_form(np.array([0.1, 0.2]), np.eye(2), 0.15)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)


def test_mv_collinear_mean_rejected():
    with pytest.raises(ValueError, match="ill-posed"):
        mv_closed_form(np.full(3, 0.07), np.eye(3), 0.05)


def test_mv_matches_kkt_linear_solve():
    rng = np.random.default_rng(7)
    for p in (3, 8, 20):
        a = rng.standard_normal((p, p))
        cov = a @ a.T / p + np.eye(p)
        mean = rng.normal(0.001, 0.02, p)
        target = 0.005
        w = mv_closed_form(mean, cov, target)
        # Independent oracle: solve the stationarity system directly.
        system = np.zeros((p + 2, p + 2))
        system[:p, :p] = 2.0 * cov
        system[:p, p] = -mean
        system[:p, p + 1] = -np.ones(p)
        system[p, :p] = mean
        system[p + 1, :p] = np.ones(p)
        rhs = np.zeros(p + 2)
        rhs[p] = target
        rhs[p + 1] = 1.0
        solution = np.linalg.solve(system, rhs)
        np.testing.assert_allclose(w, solution[:p], rtol=1e-8, atol=1e-12)
        assert float(w @ np.ones(p)) == pytest.approx(1.0, abs=1e-8)
        assert float(w @ mean) == pytest.approx(target, abs=1e-8)


# ---------------------------------------------------------------------------
# select_rho


def test_rho_equals_target_without_uncertainty():
    fit = _toy_fit([0.0, 0.0], t=50)
    longrun = LongRunCov(np.zeros((2, 2)), 1)
    w = np.full(4, 0.25)
    params = select_rho(0.0, fit, longrun, w, target=0.01, eps=0.05)
    assert params.rho == 0.01
    assert params.diagnostics.a_quantile == 0.0


def test_rho_below_target_and_monotonicity():
    fit = _toy_fit([0.05, 0.02], t=80)
    longrun = LongRunCov(np.diag([1.1, 0.8]), 4)
    w = np.full(4, 0.25)
    base = select_rho(0.01, fit, longrun, w, target=0.0005, eps=0.05)
    assert base.rho <= 0.0005
    smaller_eps = select_rho(0.01, fit, longrun, w, target=0.0005, eps=0.01)
    assert smaller_eps.rho < base.rho
    bigger_delta = select_rho(0.02, fit, longrun, w, target=0.0005, eps=0.05)
    assert bigger_delta.rho < base.rho
    assert base.diagnostics.q_value == pytest.approx(
        base.diagnostics.a_quantile / math.sqrt(80) / base.diagnostics.norm_bw
    )
    assert base.rho_confidence == 0.95


def test_rho_validation():
    fit = _toy_fit([0.0])
    longrun = LongRunCov(np.eye(1), 1)
    w = np.full(4, 0.25)
    with pytest.raises(ValueError):
        select_rho(-0.1, fit, longrun, w, 0.0, 0.05)
    with pytest.raises(ValueError):
        select_rho(0.1, fit, longrun, w, 0.0, 0.7)
    with pytest.raises(ValueError):
        select_rho(0.1, fit, longrun, np.full(4, 0.5), 0.0, 0.05)


# ---------------------------------------------------------------------------
# max_feasible_rho


def test_bound_zero_when_radius_dominates_mean():
    rng = np.random.default_rng(8)
    loadings = rng.normal(1.0, 0.3, (10, 2))
    mean = np.array([0.02, 0.01])
    assert max_feasible_rho(loadings, mean, 0.01) == 0.0


def test_bound_unbounded_without_radius():
    rng = np.random.default_rng(9)
    loadings = rng.normal(1.0, 0.3, (10, 2))
    assert max_feasible_rho(loadings, np.array([0.02, 0.01]), 0.0) == math.inf


def test_bound_single_asset():
    value = max_feasible_rho(np.array([[1.0]]), np.array([0.05]), 0.01)
    assert value == pytest.approx(0.05 - 0.1, abs=1e-14)


def test_bound_matches_numeric_optimum_on_constrained_geometry():
    # p <= K leaves the reachable exposure set a proper affine subspace, so
    # the bound is a genuine interior optimum; cross-check with a direct
    # numeric maximization over the budget hyperplane.
    rng = np.random.default_rng(10)
    for trial in range(8):
        p, k = 3, 5
        loadings = rng.normal(0.5, 0.8, (p, k))
        mean = rng.normal(0.1, 0.3, k)
        mean_norm = float(np.linalg.norm(mean))
        delta = (mean_norm * rng.uniform(1.05, 2.0)) ** 2
        bound = max_feasible_rho(loadings, mean, delta)
        assert math.isfinite(bound)

        def negated(z):
            w = np.concatenate([z, [1.0 - z.sum()]])
            x = loadings.T @ w
            return -(x @ mean - math.sqrt(delta) * math.sqrt(x @ x + 1e-18))

        best = -math.inf
        for start in range(6):
            z0 = rng.standard_normal(p - 1)
            res = minimize(negated, z0, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 5000})
            best = max(best, -res.fun)
        assert bound == pytest.approx(best, abs=1e-6)


def test_feasibility_coherence_over_calibrations():
    # The floor sits at or below the bound in at least 95 of 100 calibrations.
    params = default_dgp_params(30)
    t = 200
    hits = 0
    for rep in range(100):
        panel, _ = simulate_panel(params, t, seed=1000 + rep)
        fit = estimate_factors(panel, 2)
        residual = threshold_residual_cov(fit.residuals, 0.5)
        cov_model = assemble_return_cov(fit, residual)
        uncertainty, _ = calibrate_uncertainty(
            fit, cov_model, target_return=5e-4, draws=50_000, seed=rep
        )
        g_bar = max_feasible_rho(fit.loadings, fit.factor_mean, uncertainty.delta)
        if uncertainty.rho <= g_bar:
            hits += 1
    assert hits >= 95
