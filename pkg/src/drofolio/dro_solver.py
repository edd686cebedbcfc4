"""Solver for the robust allocation dual program.

The program minimizes ``(sqrt(w'B S_f B'w) + sqrt(delta) ||B'w||)^2 +
w' S_e w`` over the budget hyperplane subject to
``w'B m >= rho + sqrt(delta) ||B'w||``. Both pieces are convex, so the
problem is cast as a cone program and handed to an interior-point solver;
feasibility is decided analytically first, and every returned solution
carries its own constraint residuals plus a stationarity certificate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import cvxpy as cp
import numpy as np

from .uncertainty import max_feasible_rho

_SMOOTH_EPS = 1e-10
_FEAS_TOL = 1e-10
_RESIDUAL_TOL = 1e-8

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000


def _check_psd(name: str, matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square")
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > 1e-8 * scale:
        raise ValueError(f"{name} must be symmetric")
    if float(np.min(np.linalg.eigvalsh(matrix))) < -1e-8 * scale:
        raise ValueError(f"{name} must be positive semidefinite")
    return (matrix + matrix.T) / 2.0


@dataclass(frozen=True, eq=False)
class DroProblem:
    """One robust allocation instance.

    ``loadings`` (p, K) maps factor space to asset space, ``factor_cov`` is
    the factor covariance under the fitting measure, ``factor_mean`` its
    mean, ``residual_cov`` the idiosyncratic covariance taken as given,
    ``delta`` the ambiguity radius, and ``rho`` the worst-case acceptable
    return. Only the Euclidean penalty norm is supported.
    """

    loadings: np.ndarray
    factor_cov: np.ndarray
    factor_mean: np.ndarray
    residual_cov: np.ndarray
    delta: float
    rho: float
    norm_q: int = 2

    def __post_init__(self):
        b = np.asarray(self.loadings, dtype=float)
        if b.ndim != 2:
            raise ValueError("loadings must be 2-d (p, K)")
        p, k = b.shape
        mean = np.asarray(self.factor_mean, dtype=float).reshape(-1)
        if mean.shape[0] != k:
            raise ValueError(f"factor_mean has length {mean.shape[0]}, expected {k}")
        fcov = _check_psd("factor_cov", self.factor_cov)
        if fcov.shape[0] != k:
            raise ValueError(f"factor_cov is {fcov.shape[0]}x{fcov.shape[0]}, expected {k}x{k}")
        rcov = _check_psd("residual_cov", self.residual_cov)
        if rcov.shape[0] != p:
            raise ValueError(f"residual_cov is {rcov.shape[0]}x{rcov.shape[0]}, expected {p}x{p}")
        if not self.delta >= 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not math.isfinite(self.rho):
            raise ValueError("rho must be finite")
        if self.norm_q != 2:
            raise ValueError("only the q=2 penalty norm is supported")
        object.__setattr__(self, "loadings", b)
        object.__setattr__(self, "factor_mean", mean)
        object.__setattr__(self, "factor_cov", fcov)
        object.__setattr__(self, "residual_cov", rcov)

    @property
    def n_assets(self) -> int:
        return self.loadings.shape[0]

    def covariance(self) -> np.ndarray:
        """Implied return covariance ``B S_f B' + S_e``."""
        low = self.loadings @ self.factor_cov @ self.loadings.T
        return (low + low.T) / 2.0 + self.residual_cov

    def return_mean(self) -> np.ndarray:
        return self.loadings @ self.factor_mean


@dataclass(frozen=True, eq=False)
class PortfolioWeights:
    """Solver output: the allocation plus its own quality certificates.

    ``status`` is one of ``optimal`` (constraints satisfied to tolerance and
    stationarity certified), ``infeasible`` (the constraint set is empty;
    weights are unset), or ``max_iter`` (best iterate returned without a
    certificate).
    """

    weights: np.ndarray | None
    objective: float
    budget_residual: float
    return_slack: float
    status: str
    iterations: int


@dataclass(frozen=True)
class FeasibilityCheck:
    feasible: bool
    g_bar: float


def objective_value(problem: DroProblem, w: np.ndarray) -> float:
    """Exact (unsmoothed) objective at ``w``."""
    w = np.asarray(w, dtype=float)
    x = problem.loadings.T @ w
    s = math.sqrt(max(float(x @ problem.factor_cov @ x), 0.0))
    n = float(np.linalg.norm(x))
    resid = float(w @ problem.residual_cov @ w)
    return (s + math.sqrt(problem.delta) * n) ** 2 + resid


def objective_gradient(problem: DroProblem, w: np.ndarray, eps: float = _SMOOTH_EPS) -> np.ndarray:
    """Gradient of the objective with epsilon-smoothed norm terms.

    Each norm ``||v||`` is replaced by ``sqrt(||v||^2 + eps^2)`` so the
    gradient is defined everywhere; the perturbation changes the objective
    by at most ``O(eps)`` per norm term.
    """
    w = np.asarray(w, dtype=float)
    b = problem.loadings
    x = b.T @ w
    sd = math.sqrt(problem.delta)
    fx = problem.factor_cov @ x
    s = math.sqrt(float(x @ fx) + eps * eps)
    n = math.sqrt(float(x @ x) + eps * eps)
    outer = 2.0 * (s + sd * n)
    return outer * (b @ (fx / s) + sd * (b @ (x / n))) + 2.0 * (problem.residual_cov @ w)


def constraint_value(problem: DroProblem, w: np.ndarray) -> float:
    """Return-floor constraint as ``g(w) <= 0``."""
    w = np.asarray(w, dtype=float)
    x = problem.loadings.T @ w
    return problem.rho + math.sqrt(problem.delta) * float(np.linalg.norm(x)) - float(
        w @ problem.return_mean()
    )


def _constraint_gradient(problem: DroProblem, w: np.ndarray, eps: float = _SMOOTH_EPS) -> np.ndarray:
    x = problem.loadings.T @ w
    n = math.sqrt(float(x @ x) + eps * eps)
    return math.sqrt(problem.delta) * (problem.loadings @ (x / n)) - problem.return_mean()


def check_feasibility(problem: DroProblem) -> FeasibilityCheck:
    """Decide emptiness of the constraint set before any solve.

    The set is nonempty exactly when ``rho`` does not exceed the best
    attainable worst-case return over the budget hyperplane.
    """
    g_bar = max_feasible_rho(problem.loadings, problem.factor_mean, problem.delta)
    return FeasibilityCheck(feasible=bool(problem.rho <= g_bar + _FEAS_TOL), g_bar=g_bar)


def kkt_residual(problem: DroProblem, weights: np.ndarray) -> float:
    """Norm of the stationarity defect at ``weights``.

    Fits the budget multiplier (and, when the return constraint is active, a
    nonnegative inequality multiplier) by least squares and returns the norm
    of the remaining Lagrangian gradient. Zero at an optimum; grows with the
    distance from one.
    """
    w = np.asarray(weights, dtype=float)
    if abs(float(np.sum(w)) - 1.0) > 1e-6:
        raise ValueError("weights must lie on the budget hyperplane")
    grad = objective_gradient(problem, w)
    ones = np.ones_like(w)
    g = constraint_value(problem, w)
    active_tol = 1e-7 * (1.0 + abs(problem.rho))

    if g >= -active_tol:
        basis = np.column_stack([ones, _constraint_gradient(problem, w)])
        coef, *_ = np.linalg.lstsq(basis, -grad, rcond=None)
        if coef[1] < 0.0:  # inequality multiplier must be nonnegative
            coef = np.array([float(-(ones @ grad) / (ones @ ones)), 0.0])
        residual = grad + basis @ coef
    else:
        nu = float(-(ones @ grad) / (ones @ ones))
        residual = grad + nu * ones
    return float(np.linalg.norm(residual))


def _kkt_pieces(problem: DroProblem, w: np.ndarray):
    """Gradient, Hessian, constraint value/gradient/Hessian at a smooth point.

    Returns None when the norm terms are too close to zero for the curvature
    to be trusted (the objective is nonsmooth there).
    """
    b = problem.loadings
    m = b @ problem.factor_cov @ b.T
    g = b @ b.T
    d = math.sqrt(problem.delta)
    u = m @ w
    v = g @ w
    s = math.sqrt(max(float(w @ u), 0.0))
    n = math.sqrt(max(float(w @ v), 0.0))
    if n < 1e-9 or s < 1e-9:
        return None
    grad_s = u / s
    grad_n = v / n
    hess_s = (m - np.outer(u, u) / (s * s)) / s
    hess_n = (g - np.outer(v, v) / (n * n)) / n
    phi = s + d * n
    grad_phi = grad_s + d * grad_n
    grad_f = 2.0 * phi * grad_phi + 2.0 * (problem.residual_cov @ w)
    hess_f = (
        2.0 * np.outer(grad_phi, grad_phi)
        + 2.0 * phi * (hess_s + d * hess_n)
        + 2.0 * problem.residual_cov
    )
    mu_r = problem.return_mean()
    c_val = problem.rho + d * n - float(w @ mu_r)
    grad_c = d * grad_n - mu_r
    hess_c = d * hess_n
    return grad_f, hess_f, c_val, grad_c, hess_c


def _kkt_merit(problem, w, lam, nu, active):
    pieces = _kkt_pieces(problem, w)
    if pieces is None:
        return None
    grad_f, _, c_val, grad_c, _ = pieces
    ones = np.ones_like(w)
    stationarity = grad_f + nu * ones + (lam * grad_c if active else 0.0)
    primal = [float(np.sum(w)) - 1.0]
    if active:
        primal.append(c_val)
    return math.sqrt(float(stationarity @ stationarity) + sum(x * x for x in primal))


def _polish(problem: DroProblem, w: np.ndarray) -> np.ndarray:
    """A few Newton steps on the KKT system to sharpen the cone solution.

    The active set is frozen from the incoming point; steps that fail to
    reduce the KKT merit are backtracked and the incoming point is returned
    whenever the objective is locally nonsmooth or the system is singular.
    """
    pieces = _kkt_pieces(problem, w)
    if pieces is None:
        return w
    grad_f, _, c_val, grad_c, _ = pieces
    ones = np.ones_like(w)
    active = c_val >= -1e-7 * (1.0 + abs(problem.rho))
    if active:
        basis = np.column_stack([ones, grad_c])
        coef, *_ = np.linalg.lstsq(basis, -grad_f, rcond=None)
        nu, lam = float(coef[0]), float(coef[1])
        if lam < 0.0:
            active = False
    if not active:
        lam = 0.0
        nu = float(-(ones @ grad_f) / len(w))

    merit = _kkt_merit(problem, w, lam, nu, active)
    if merit is None:
        return w
    best = (merit, w, lam, nu)
    for _ in range(6):
        pieces = _kkt_pieces(problem, w)
        if pieces is None:
            break
        grad_f, hess_f, c_val, grad_c, hess_c = pieces
        p = len(w)
        if active:
            hess = hess_f + lam * hess_c
            system = np.zeros((p + 2, p + 2))
            system[:p, :p] = hess
            system[:p, p] = grad_c
            system[p, :p] = grad_c
            system[:p, p + 1] = ones
            system[p + 1, :p] = ones
            rhs = np.concatenate([-(grad_f + lam * grad_c + nu * ones), [-c_val], [1.0 - np.sum(w)]])
        else:
            system = np.zeros((p + 1, p + 1))
            system[:p, :p] = hess_f
            system[:p, p] = ones
            system[p, :p] = ones
            rhs = np.concatenate([-(grad_f + nu * ones), [1.0 - np.sum(w)]])
        try:
            step = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        improved = False
        for _ in range(10):
            w_new = w + scale * step[:p]
            if active:
                lam_new = lam + scale * step[p]
                nu_new = nu + scale * step[p + 1]
            else:
                lam_new = 0.0
                nu_new = nu + scale * step[p]
            merit_new = _kkt_merit(problem, w_new, lam_new, nu_new, active)
            if merit_new is not None and merit_new < merit:
                w, lam, nu, merit = w_new, lam_new, nu_new, merit_new
                improved = True
                break
            scale /= 2.0
        if not improved:
            break
        if merit < best[0]:
            best = (merit, w, lam, nu)
        if merit < 1e-13:
            break
    return best[1]


def _psd_factor(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))).T


def _scaled(problem: DroProblem) -> tuple[DroProblem, float]:
    scale = max(
        float(np.max(np.abs(problem.factor_cov))),
        float(np.max(np.abs(problem.residual_cov))),
        problem.delta,
    )
    if scale <= 0.0 or not math.isfinite(scale):
        return problem, 1.0
    root = math.sqrt(scale)
    return (
        replace(
            problem,
            factor_cov=problem.factor_cov / scale,
            residual_cov=problem.residual_cov / scale,
            factor_mean=problem.factor_mean / root,
            delta=problem.delta / scale,
            rho=problem.rho / root,
        ),
        scale,
    )


def _solve_cone(problem: DroProblem, tol: float, max_iter: int):
    """Run the cone solver on an already well-scaled problem.

    Yields (weights, iterations, certified) candidates from progressively
    looser solver settings, where ``certified`` reports a clean optimality
    status from the solver; the caller keeps the first one that verifies.
    """
    p = problem.n_assets
    a_factor = _psd_factor(problem.factor_cov) @ problem.loadings.T
    a_resid = _psd_factor(problem.residual_cov)
    mu_r = problem.return_mean()
    sd = math.sqrt(problem.delta)

    w = cp.Variable(p)
    penalty = cp.norm2(problem.loadings.T @ w) if sd > 0 else None
    factor_term = cp.norm2(a_factor @ w)
    if penalty is not None:
        factor_term = factor_term + sd * penalty
    objective = cp.square(factor_term) + cp.sum_squares(a_resid @ w)
    constraints = [cp.sum(w) == 1]
    if penalty is not None:
        constraints.append(mu_r @ w >= problem.rho + sd * penalty)
    else:
        constraints.append(mu_r @ w >= problem.rho)
    prog = cp.Problem(cp.Minimize(objective), constraints)

    attempts = (
        dict(
            solver=cp.CLARABEL,
            tol_gap_abs=min(1e-12, tol * 1e-2),
            tol_gap_rel=min(1e-12, tol * 1e-2),
            tol_feas=min(1e-12, tol * 1e-2),
            max_iter=min(max_iter, 500),
        ),
        dict(solver=cp.CLARABEL, max_iter=min(max_iter, 500)),
        dict(solver=cp.SCS, eps=max(tol * 1e-1, 1e-10), max_iters=max_iter),
    )
    for options in attempts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                prog.solve(**options)
        except cp.error.SolverError:
            continue
        if w.value is None:
            continue
        stats = prog.solver_stats
        iters = int(stats.num_iters) if stats is not None and stats.num_iters else 0
        yield np.asarray(w.value, dtype=float), iters, prog.status == cp.OPTIMAL


def solve_hd_dro(
    problem: DroProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PortfolioWeights:
    """Solve the robust allocation program.

    Feasibility is checked analytically first, so an empty constraint set is
    reported as ``infeasible`` rather than burned through iterations. The
    instance is rescaled to unit magnitude (the optimizer is invariant to
    the common rescaling), solved as a cone program, and accepted as
    ``optimal`` only when budget and return residuals sit within tolerance
    and the stationarity certificate is small.
    """
    feas = check_feasibility(problem)
    if not feas.feasible:
        return PortfolioWeights(
            weights=None,
            objective=math.nan,
            budget_residual=math.nan,
            return_slack=math.nan,
            status="infeasible",
            iterations=0,
        )

    scaled, scale = _scaled(problem)
    best = None
    total_iters = 0
    kkt_accept = max(10.0 * tol, 1e-6)

    def grade(w, certified):
        w = w + (1.0 - float(np.sum(w))) / len(w)  # re-center the budget exactly
        budget = float(np.sum(w)) - 1.0
        slack = -constraint_value(scaled, w)
        violation = max(abs(budget) - _RESIDUAL_TOL, 0.0) + max(-slack - _RESIDUAL_TOL, 0.0)
        kkt = kkt_residual(scaled, w)
        # A solution certifies either through the cone solver's own duality
        # gap or through a small stationarity residual (the latter is blind
        # near the nonsmooth zero-exposure manifold, the former is not).
        ok = violation == 0.0 and (certified or kkt <= kkt_accept)
        return (not ok, violation, kkt), w

    for w_raw, iters, certified in _solve_cone(scaled, tol, max_iter):
        total_iters += iters
        for candidate in (grade(_polish(scaled, w_raw), certified), grade(w_raw, certified)):
            if best is None or candidate[0] < best[0]:
                best = candidate
        if not best[0][0]:
            break

    if best is None:
        raise RuntimeError("all cone solver attempts failed")
    (failed, _, _), w = best
    status = "max_iter" if failed else "optimal"
    return PortfolioWeights(
        weights=w,
        objective=objective_value(problem, w),
        budget_residual=float(np.sum(w)) - 1.0,
        return_slack=-constraint_value(problem, w),
        status=status,
        iterations=total_iters,
    )


def solve_bcz_dro(
    mean: np.ndarray,
    cov: np.ndarray,
    delta: float,
    rho: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PortfolioWeights:
    """Whole-return-vector robust allocation.

    This is the identity-loadings, zero-residual special case: the penalty
    acts on ``w`` itself and ``cov`` plays the factor covariance role.
    Minimizing the squared objective leaves the argmin unchanged because the
    objective is nonnegative.
    """
    mean = np.asarray(mean, dtype=float)
    p = mean.shape[0]
    problem = DroProblem(
        loadings=np.eye(p),
        factor_cov=cov,
        factor_mean=mean,
        residual_cov=np.zeros((p, p)),
        delta=delta,
        rho=rho,
    )
    return solve_hd_dro(problem, tol=tol, max_iter=max_iter)
