"""Shared test oracles, independent of the library's solve paths."""

import math

import numpy as np
from scipy.linalg import null_space

from drofolio.dro_solver import DroProblem


def batch_objective(problem: DroProblem, weights: np.ndarray) -> np.ndarray:
    """Objective at many candidate weight vectors (rows), computed directly."""
    x = weights @ problem.loadings  # (m, K)
    s = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", x, problem.factor_cov, x), 0.0))
    n = np.linalg.norm(x, axis=1)
    resid = np.einsum("ij,jk,ik->i", weights, problem.residual_cov, weights)
    return (s + math.sqrt(problem.delta) * n) ** 2 + resid


def batch_feasible(problem: DroProblem, weights: np.ndarray) -> np.ndarray:
    x = weights @ problem.loadings
    n = np.linalg.norm(x, axis=1)
    mu_r = problem.loadings @ problem.factor_mean
    return weights @ mu_r - problem.rho - math.sqrt(problem.delta) * n >= -1e-12


def _grid(center, hw, points):
    axes = [np.linspace(c - hw, c + hw, points) for c in center]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def grid_refine_oracle(
    problem: DroProblem,
    half_width: float = 3.0,
    points: int = 13,
    rounds: int = 15,
):
    """Brute-force minimum by iterated dense grid refinement.

    Searches the budget hyperplane parametrized as w = w0 + N z with an
    orthonormal tangent basis N, over a shrinking box around the running
    best feasible point. Independent of the production solver: the objective
    and constraint are re-derived here and no gradient or cone machinery is
    used. When the feasible region is thin, a first pass refine-maximizes
    the constraint slack to locate a feasible anchor.
    """
    p = problem.n_assets
    w0 = np.full(p, 1.0 / p)
    basis = null_space(np.ones((1, p)))  # p x (p-1)
    dim = basis.shape[1]
    mu_r = problem.loadings @ problem.factor_mean

    def slack(ws):
        x = ws @ problem.loadings
        return ws @ mu_r - problem.rho - math.sqrt(problem.delta) * np.linalg.norm(x, axis=1)

    # Phase 1: find any feasible point. The slack depends on w only through
    # the K-dimensional exposure x = B'w, so aim for a slack-maximizing
    # exposure directly: zero exposure when the penalty beats the mean, a
    # stretch along the mean direction otherwise, mapped back to the
    # hyperplane by least squares.
    anchor = None
    mu = np.asarray(problem.factor_mean, dtype=float)
    mu_norm = float(np.linalg.norm(mu))
    sqrt_d = math.sqrt(problem.delta)
    reach = problem.loadings.T @ basis  # K x (p-1)
    for stretch in (0.0, 1.0, 2.0, 8.0, 64.0):
        if mu_norm > sqrt_d and stretch > 0.0:
            gain = mu_norm * (mu_norm - sqrt_d)
            target_x = (max(problem.rho, 0.0) / gain + stretch) * mu
        elif stretch == 0.0:
            target_x = np.zeros_like(mu)
        else:
            continue
        z, *_ = np.linalg.lstsq(reach, target_x - problem.loadings.T @ w0, rcond=None)
        candidate = w0 + z @ basis.T
        if float(slack(candidate[None])[0]) >= 0.0:
            anchor = z
            break
    if anchor is None:
        # Fallback: expanding pattern search on the concave slack.
        center = np.zeros(dim)
        hw = half_width
        best_gap = float(slack((w0 + center @ basis.T)[None])[0])
        for _ in range(60):
            zs = _grid(center, hw, points)
            gaps = slack(w0 + zs @ basis.T)
            idx = int(np.argmax(gaps))
            if gaps[idx] >= 0.0:
                anchor = zs[idx]
                break
            if gaps[idx] > best_gap + 1e-15:
                on_edge = np.any(np.abs(zs[idx] - center) >= hw * (1 - 1e-12))
                center, best_gap = zs[idx], float(gaps[idx])
                if on_edge:
                    hw *= 2.0
            else:
                hw *= 0.5
                if hw < 1e-10:
                    break
    assert anchor is not None, "no feasible grid point found"

    # Phase 2: adaptive grid descent on the exact-penalty objective
    # f + weight * max(violation, 0), with the grid axes re-rotated at
    # random every round. A masked grid stalls near a boundary optimum
    # because the feasible-improving cone narrows to nothing, and an
    # axis-aligned penalized grid stalls against a tilted kink; rotations
    # plus a penalty weight escalated from small values keep the descent
    # directions fat. The box expands when progress lands on its shell and
    # halves on idle rounds, so remote optima stay reachable while the
    # final resolution is driven to round-off.
    gap_tol = 1e-6 * (1.0 + abs(problem.rho))
    offsets = _grid(np.zeros(dim), 1.0, points)
    weight = 0.5
    for _ in range(10):
        spin = np.random.default_rng(12345)
        center = anchor
        best_w = w0 + anchor @ basis.T
        best_val = float(batch_objective(problem, best_w[None])[0])
        hw = 4.0 * half_width
        for round_idx in range(60 + 40 * rounds):
            if hw < 1e-11 * (1.0 + float(np.linalg.norm(center))):
                break
            if round_idx == 0:
                rotation = np.eye(dim)
            else:
                rotation, _ = np.linalg.qr(spin.standard_normal((dim, dim)))
            zs = center + (hw * offsets) @ rotation.T
            ws = w0 + zs @ basis.T
            vals = batch_objective(problem, ws) + weight * np.maximum(-slack(ws), 0.0)
            idx = int(np.argmin(vals))
            if vals[idx] < best_val:
                on_shell = float(np.max(np.abs(offsets[idx]))) >= 1.0 - 1e-12
                best_val = float(vals[idx])
                center = zs[idx]
                best_w = ws[idx]
                if on_shell:
                    hw *= 2.0
            else:
                hw *= 0.5
        if float(slack(best_w[None])[0]) >= -gap_tol:
            return float(batch_objective(problem, best_w[None])[0]), best_w
        weight *= 16.0
    raise AssertionError("exact penalty failed to enforce feasibility")


def random_problem(rng: np.random.Generator, p: int, k: int, feasible_margin=None) -> DroProblem:
    """A well-conditioned random instance; ``feasible_margin`` sets rho below
    the feasibility bound by that amount (None leaves the constraint slack)."""
    from drofolio.uncertainty import max_feasible_rho

    loadings = rng.normal(0.6, 0.5, (p, k))
    a = rng.normal(size=(k, k))
    factor_cov = a @ a.T / k + 0.4 * np.eye(k)
    residual_cov = np.diag(rng.uniform(0.05, 0.4, p))
    factor_mean = rng.normal(0.02, 0.01, k)
    delta = float(rng.uniform(0.001, 0.05))
    if feasible_margin is None:
        rho = -1e3
    else:
        g_bar = max_feasible_rho(loadings, factor_mean, delta)
        rho = (g_bar if math.isfinite(g_bar) else 0.0) - feasible_margin
    return DroProblem(
        loadings=loadings,
        factor_cov=factor_cov,
        factor_mean=factor_mean,
        residual_cov=residual_cov,
        delta=delta,
        rho=rho,
    )
