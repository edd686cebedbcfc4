import math

import numpy as np
import pytest
from helpers import grid_refine_oracle, random_problem

from drofolio.dro_solver import (
    DroProblem,
    check_feasibility,
    constraint_value,
    kkt_residual,
    objective_gradient,
    objective_value,
    solve_bcz_dro,
    solve_hd_dro,
)
from drofolio.uncertainty import max_feasible_rho


def _gmv(cov):
    inv = np.linalg.solve(cov, np.ones(cov.shape[0]))
    return inv / inv.sum()


# ---------------------------------------------------------------------------
# solve_hd_dro


def test_gmv_limit_without_uncertainty():
    rng = np.random.default_rng(0)
    problem = random_problem(rng, p=6, k=2)  # rho deep below feasible
    problem = DroProblem(
        problem.loadings, problem.factor_cov, problem.factor_mean,
        problem.residual_cov, 0.0, -1e3,
    )
    solution = solve_hd_dro(problem)
    assert solution.status == "optimal"
    np.testing.assert_allclose(solution.weights, _gmv(problem.covariance()), atol=1e-6)
    assert abs(solution.budget_residual) <= 1e-8
    assert solution.return_slack >= -1e-8


def test_objective_matches_grid_oracle_small_instance():
    rng = np.random.default_rng(1)
    problem = random_problem(rng, p=3, k=1, feasible_margin=0.005)
    solution = solve_hd_dro(problem)
    assert solution.status == "optimal"
    oracle_val, _ = grid_refine_oracle(problem)
    assert solution.objective == pytest.approx(oracle_val, abs=1e-4)


def test_infeasible_detected_before_solving():
    # One asset: the weight is pinned at 1, and the radius penalty exceeds
    # the asset's expected return, so any positive floor is unreachable.
    solution = solve_bcz_dro(np.array([0.03]), np.array([[1.0]]), delta=0.01, rho=0.5)
    assert solution.status == "infeasible"
    assert solution.weights is None
    assert math.isnan(solution.objective)


def test_bcz_equal_weights_at_huge_radius():
    rng = np.random.default_rng(2)
    p = 10
    a = rng.standard_normal((p, p))
    cov = a @ a.T / p + np.eye(p)
    mean = rng.normal(5e-4, 2e-4, p)
    g_bar = max_feasible_rho(np.eye(p), mean, 1e6)
    solution = solve_bcz_dro(mean, cov, delta=1e6, rho=g_bar - 100.0)
    assert solution.status == "optimal"
    assert np.max(np.abs(solution.weights - 1.0 / p)) <= 1e-3


def test_bcz_gmv_at_zero_radius():
    rng = np.random.default_rng(3)
    p = 5
    a = rng.standard_normal((p, p))
    cov = a @ a.T / p + np.eye(p)
    mean = rng.normal(0.001, 0.001, p)
    solution = solve_bcz_dro(mean, cov, delta=0.0, rho=-10.0)
    np.testing.assert_allclose(solution.weights, _gmv(cov), atol=1e-6)


# ---------------------------------------------------------------------------
# check_feasibility


def test_feasibility_strict_interior_and_violation():
    rng = np.random.default_rng(4)
    problem = random_problem(rng, p=6, k=2, feasible_margin=0.0)
    g_bar = check_feasibility(problem).g_bar
    inside = DroProblem(
        problem.loadings, problem.factor_cov, problem.factor_mean,
        problem.residual_cov, problem.delta, g_bar - 0.01,
    )
    outside = DroProblem(
        problem.loadings, problem.factor_cov, problem.factor_mean,
        problem.residual_cov, problem.delta, g_bar + 0.01,
    )
    assert check_feasibility(inside).feasible
    assert not check_feasibility(outside).feasible
    assert solve_hd_dro(outside).status == "infeasible"


# ---------------------------------------------------------------------------
# kkt_residual


def test_kkt_residual_converged_vs_nonoptimal():
    rng = np.random.default_rng(5)
    problem = random_problem(rng, p=6, k=2, feasible_margin=0.002)
    solution = solve_hd_dro(problem, tol=1e-8)
    assert kkt_residual(problem, solution.weights) <= 10 * 1e-8
    equal = np.full(problem.n_assets, 1.0 / problem.n_assets)
    assert kkt_residual(problem, equal) > 1e-3


def test_kkt_residual_grows_with_perturbation():
    rng = np.random.default_rng(6)
    for trial in range(5):
        problem = random_problem(rng, p=5, k=2)  # slack constraint
        solution = solve_hd_dro(problem)
        w = solution.weights
        d = rng.standard_normal(5)
        d -= d.mean()  # tangent to the budget hyperplane
        d /= np.linalg.norm(d)
        values = [kkt_residual(problem, w + eps * d) for eps in (1e-4, 1e-3, 1e-2)]
        assert values[0] < values[1] < values[2]


def test_kkt_requires_budget_hyperplane():
    rng = np.random.default_rng(7)
    problem = random_problem(rng, p=4, k=1)
    with pytest.raises(ValueError):
        kkt_residual(problem, np.full(4, 0.5))


# ---------------------------------------------------------------------------
# objective properties


def test_objective_convexity_on_random_triples():
    rng = np.random.default_rng(8)
    problem = random_problem(rng, p=7, k=2)
    n = 1000
    w1 = rng.standard_normal((n, 7))
    w2 = rng.standard_normal((n, 7))
    w1 /= w1.sum(axis=1, keepdims=True)
    w2 /= w2.sum(axis=1, keepdims=True)
    ts = rng.uniform(0.0, 1.0, n)
    for i in range(n):
        mid = ts[i] * w1[i] + (1 - ts[i]) * w2[i]
        lhs = objective_value(problem, mid)
        rhs = ts[i] * objective_value(problem, w1[i]) + (1 - ts[i]) * objective_value(
            problem, w2[i]
        )
        assert lhs <= rhs + 1e-10


def test_optimal_objective_monotone_in_radius():
    rng = np.random.default_rng(9)
    base = random_problem(rng, p=6, k=2)
    values = []
    for delta in (0.0, 0.01, 0.05, 0.2):
        problem = DroProblem(
            base.loadings, base.factor_cov, base.factor_mean,
            base.residual_cov, delta, -1e3,
        )
        values.append(solve_hd_dro(problem).objective)
    assert all(a <= b + 1e-10 for a, b in zip(values, values[1:]))


def test_scale_invariance_of_argmin():
    rng = np.random.default_rng(10)
    base = random_problem(rng, p=6, k=2, feasible_margin=0.004)
    a = 7.3
    scaled = DroProblem(
        base.loadings,
        a * base.factor_cov,
        math.sqrt(a) * base.factor_mean,
        a * base.residual_cov,
        a * base.delta,
        math.sqrt(a) * base.rho,
    )
    w_base = solve_hd_dro(base).weights
    w_scaled = solve_hd_dro(scaled).weights
    np.testing.assert_allclose(w_scaled, w_base, atol=1e-7)
    assert objective_value(scaled, w_scaled) == pytest.approx(
        a * objective_value(base, w_base), rel=1e-8
    )


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(11)
    problem = random_problem(rng, p=6, k=2)
    for _ in range(5):
        w = rng.standard_normal(6)
        w /= w.sum()
        if np.linalg.norm(problem.loadings.T @ w) < 1e-3:
            continue
        grad = objective_gradient(problem, w)
        step = 1e-6
        fd = np.empty(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = step
            fd[i] = (
                objective_value(problem, w + e) - objective_value(problem, w - e)
            ) / (2 * step)
        assert np.max(np.abs(grad - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


# ---------------------------------------------------------------------------
# validation


def test_problem_validation():
    good = random_problem(np.random.default_rng(12), p=4, k=2)
    with pytest.raises(ValueError):
        DroProblem(good.loadings, good.factor_cov, good.factor_mean,
                   good.residual_cov, -0.1, 0.0)
    with pytest.raises(ValueError):
        DroProblem(good.loadings, -np.eye(2), good.factor_mean,
                   good.residual_cov, 0.1, 0.0)
    with pytest.raises(ValueError):
        DroProblem(good.loadings, good.factor_cov, np.zeros(3),
                   good.residual_cov, 0.1, 0.0)
    with pytest.raises(ValueError):
        DroProblem(good.loadings, good.factor_cov, good.factor_mean,
                   good.residual_cov, 0.1, 0.0, norm_q=1)


def test_return_slack_definition():
    rng = np.random.default_rng(13)
    problem = random_problem(rng, p=5, k=2, feasible_margin=0.003)
    solution = solve_hd_dro(problem)
    x = problem.loadings.T @ solution.weights
    expected = (
        float(solution.weights @ problem.loadings @ problem.factor_mean)
        - problem.rho
        - math.sqrt(problem.delta) * float(np.linalg.norm(x))
    )
    assert solution.return_slack == pytest.approx(expected, abs=1e-12)
    assert -constraint_value(problem, solution.weights) == pytest.approx(expected, abs=1e-15)
