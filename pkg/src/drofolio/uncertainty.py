"""Calibration of the ambiguity radius and the worst-case return floor.

The radius ``delta`` is a scaled high quantile of the squared norm of a
Gaussian vector whose covariance is the factors' long-run covariance; the
floor ``rho`` backs off the target return by the norm penalty at the
closed-form mean-variance weight, less a central-limit correction. Both
follow the recipe: estimate factor moments, estimate the long-run
covariance, take quantiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, null_space
from scipy.special import ndtri

from .factor_model import CovModel, FactorFit
from .longrun import LongRunCov, default_bandwidth, hac_long_run_cov


@dataclass(frozen=True)
class UncertaintyDiagnostics:
    """Intermediate quantities behind a calibrated (delta, rho) pair.

    ``l0_quantile`` is the quantile of the limit statistic before the 1/T
    scaling (so ``delta * T``); ``a_quantile`` is the low quantile of the
    centered normal portfolio-return fluctuation; ``q_value`` is that
    quantile per unit of factor exposure, ``a_quantile / sqrt(T) / norm_bw``;
    ``norm_bw`` is the Euclidean norm of the factor exposure of the
    mean-variance weight.
    """

    l0_quantile: float
    a_quantile: float
    q_value: float
    norm_bw: float

    def as_dict(self) -> dict:
        return {
            "l0_quantile": self.l0_quantile,
            "a_quantile": self.a_quantile,
            "q_value": self.q_value,
            "norm_bw": self.norm_bw,
        }


@dataclass(frozen=True)
class UncertaintyParams:
    """Calibrated ambiguity radius and return floor with their confidence levels."""

    delta: float
    rho: float
    delta_confidence: float
    rho_confidence: float
    target_return: float
    diagnostics: UncertaintyDiagnostics = field(
        default_factory=lambda: UncertaintyDiagnostics(
            math.nan, math.nan, math.nan, math.nan
        )
    )

    def as_dict(self) -> dict:
        return {
            "delta": self.delta,
            "rho": self.rho,
            "delta_confidence": self.delta_confidence,
            "rho_confidence": self.rho_confidence,
            "target_return": self.target_return,
            "diagnostics": self.diagnostics.as_dict(),
        }


def _psd_eigenvalues(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if np.max(np.abs(cov - cov.T)) > 1e-8 * max(1.0, float(np.max(np.abs(cov)))):
        raise ValueError("covariance must be symmetric")
    off = cov - np.diag(np.diag(cov))
    if not off.any():
        eigvals = np.diag(cov).copy()
    else:
        eigvals = np.linalg.eigvalsh(cov)
    floor = -1e-8 * max(1.0, float(np.max(np.abs(cov))))
    if np.min(eigvals) < floor:
        raise ValueError(f"covariance is not PSD (eigenvalue {np.min(eigvals):.3e})")
    return np.clip(eigvals, 0.0, None)


def _quadform_quantiles(cov: np.ndarray, levels, draws: int, seed: int) -> np.ndarray:
    """Monte Carlo quantiles of ||Z||^2 for Z ~ N(0, cov), several levels at once."""
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    if np.any(levels <= 0.0) or np.any(levels >= 1.0):
        raise ValueError("levels must lie strictly inside (0, 1)")
    if draws < 1000:
        raise ValueError(f"need at least 1000 draws, got {draws}")
    eigvals = _psd_eigenvalues(cov)
    if not eigvals.any():
        return np.zeros(levels.shape)
    rng = np.random.default_rng(seed)
    chi2 = rng.standard_normal((draws, eigvals.shape[0])) ** 2
    samples = chi2 @ eigvals
    return np.quantile(samples, levels)


def quadform_quantile(cov: np.ndarray, level: float, draws: int = 200_000, seed: int = 0) -> float:
    """Quantile of the squared norm of a centered Gaussian vector.

    Sampling goes through the eigendecomposition ``cov = Q L Q'``: the
    squared norm is distributed as ``sum_i L_i * chi2_1``, so only the
    eigenvalues matter. Deterministic for a fixed seed; for diagonal
    ``cov`` the output scales exactly with the matrix.
    """
    return float(_quadform_quantiles(cov, level, draws, seed)[0])


def delta_radius(
    longrun_matrix: np.ndarray,
    factor_mean: np.ndarray,
    t: int,
    levels,
    draws: int = 200_000,
    seed: int = 0,
) -> np.ndarray:
    """Ambiguity radii at several confidence levels from raw ingredients.

    Returns ``(1/T) * q / (4 * (1 - m'm))`` per level, where ``q`` is the
    quantile of ``||Z||^2`` with ``Z ~ N(0, longrun_matrix)`` and ``m`` the
    factor mean (its squared norm plays the role of ``m' S^{-1} m`` because
    the factor second moment is the identity under the fit's scaling).
    """
    mean = np.asarray(factor_mean, dtype=float)
    m2 = float(mean @ mean)
    if m2 >= 1.0:
        raise ValueError("factor mean inconsistent with normalization (m'm >= 1)")
    q = _quadform_quantiles(longrun_matrix, levels, draws, seed)
    return q / (4.0 * (1.0 - m2)) / t


def select_delta(
    fit: FactorFit,
    longrun: LongRunCov,
    level: float = 0.95,
    draws: int = 200_000,
    seed: int = 0,
) -> float:
    """Ambiguity radius for an estimated factor model at one confidence level."""
    return float(
        delta_radius(longrun.matrix, fit.factor_mean, fit.n_periods, level, draws, seed)[0]
    )


def mv_closed_form(mean: np.ndarray, cov: np.ndarray, target: float) -> np.ndarray:
    """Closed-form mean-variance weights for a budget and a target return.

    With ``a1 = mean' S^-1 1``, ``a2 = mean' S^-1 mean``, ``a3 = 1' S^-1 1``
    and ``a4 = a2 a3 - a1^2``, the solution is
    ``((target*a3 - a1)/a4) S^-1 mean + ((a2 - target*a1)/a4) S^-1 1``.

    Raises
    ------
    ValueError
        If ``cov`` is not positive definite, or the mean is (numerically)
        collinear with the ones vector so the system is ill-posed.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.shape[0]
    ones = np.ones(p)
    try:
        chol = cho_factor(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc
    inv_mean = cho_solve(chol, mean)
    inv_ones = cho_solve(chol, ones)
    a1 = float(mean @ inv_ones)
    a2 = float(mean @ inv_mean)
    a3 = float(ones @ inv_ones)
    a4 = a2 * a3 - a1 * a1
    if abs(a4) <= 1e-12 * a2 * a3:
        raise ValueError("ill-posed mean-variance system: mean collinear with ones")
    w = ((target * a3 - a1) / a4) * inv_mean + ((a2 - target * a1) / a4) * inv_ones
    if abs(float(w @ ones) - 1.0) > 1e-8 or abs(float(w @ mean) - target) > 1e-8 * max(
        1.0, abs(target)
    ):
        raise ValueError("mean-variance identities violated; covariance is too ill-conditioned")
    return w


def rho_floor(
    delta: float,
    loadings: np.ndarray,
    longrun_matrix: np.ndarray,
    w_mv: np.ndarray,
    target: float,
    eps: float,
    t: int,
    delta_level: float = math.nan,
) -> UncertaintyParams:
    """Return floor keeping a given mean-variance weight feasible with confidence 1-eps.

    Computes the portfolio's factor exposure ``x = B'w``, the fluctuation
    scale ``sigma^2 = x' V x`` from the long-run covariance, the eps-quantile
    ``A = sigma * ndtri(eps)`` of the centered normal, and
    ``rho = target - (sqrt(delta) * ||x|| - A / sqrt(T))``. ``A`` is
    nonpositive for ``eps < 1/2``, so ``rho <= target`` always.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    w_mv = np.asarray(w_mv, dtype=float)
    if abs(float(np.sum(w_mv)) - 1.0) > 1e-6:
        raise ValueError("w_mv must sum to 1")
    longrun_matrix = np.asarray(longrun_matrix, dtype=float)
    exposure = np.asarray(loadings, dtype=float).T @ w_mv
    norm_bw = float(np.linalg.norm(exposure))
    var = float(exposure @ longrun_matrix @ exposure)
    if var < -1e-12 * max(1.0, float(np.max(np.abs(longrun_matrix)))):
        raise ValueError(f"negative fluctuation variance {var:.3e}")
    sigma = math.sqrt(max(var, 0.0))
    a_quantile = sigma * float(ndtri(eps))
    rho = target - (math.sqrt(delta) * norm_bw - a_quantile / math.sqrt(t))
    q_value = (a_quantile / math.sqrt(t)) / norm_bw if norm_bw > 0 else 0.0
    return UncertaintyParams(
        delta=float(delta),
        rho=float(rho),
        delta_confidence=float(delta_level),
        rho_confidence=1.0 - eps,
        target_return=float(target),
        diagnostics=UncertaintyDiagnostics(
            l0_quantile=float(delta) * t,
            a_quantile=a_quantile,
            q_value=q_value,
            norm_bw=norm_bw,
        ),
    )


def select_rho(
    delta: float,
    fit: FactorFit,
    longrun: LongRunCov,
    w_mv: np.ndarray,
    target: float,
    eps: float,
    delta_level: float = math.nan,
) -> UncertaintyParams:
    """Return floor for an estimated factor model; see ``rho_floor``."""
    return rho_floor(
        delta,
        fit.loadings,
        longrun.matrix,
        w_mv,
        target,
        eps,
        fit.n_periods,
        delta_level=delta_level,
    )


def max_feasible_rho(loadings: np.ndarray, factor_mean: np.ndarray, delta: float) -> float:
    """Largest return floor with a nonempty feasible set, or ``inf``.

    Maximizes ``w' B m - sqrt(delta) ||B'w||`` over the budget hyperplane.
    Writing ``y = B'w``, the reachable exposures form an affine set
    ``y0 + S``; splitting ``m`` and ``y0`` along ``S`` reduces the problem to
    one dimension and gives the exact optimum
    ``y0_perp' m - ||y0_perp|| * sqrt(delta - ||m_S||^2)``. When the
    projection of ``m`` onto ``S`` beats ``sqrt(delta)`` the objective grows
    without bound along a feasible ray and ``inf`` is returned.
    """
    b = np.asarray(loadings, dtype=float)
    mean = np.asarray(factor_mean, dtype=float)
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    p = b.shape[0]
    y0 = b.mean(axis=0)  # exposure of the equal-weight anchor on the hyperplane
    if p == 1:
        reach = np.zeros((b.shape[1], 0))
    else:
        tangent = null_space(np.ones((1, p)))
        reach = b.T @ tangent
    if reach.size:
        u, s, _ = np.linalg.svd(reach, full_matrices=False)
        rank = int(np.sum(s > max(s[0], 1e-300) * 1e-12))
        basis = u[:, :rank]
    else:
        basis = np.zeros((b.shape[1], 0))

    mean_in = basis @ (basis.T @ mean) if basis.size else np.zeros_like(mean)
    mean_in_norm = float(np.linalg.norm(mean_in))
    tol = 1e-12 * (1.0 + float(np.linalg.norm(mean)))
    if mean_in_norm > math.sqrt(delta) + tol:
        return math.inf

    y0_perp = y0 - (basis @ (basis.T @ y0) if basis.size else 0.0)
    anchor = float(np.linalg.norm(y0_perp))
    if anchor <= 1e-12 * (1.0 + float(np.linalg.norm(y0))):
        # Zero exposure is reachable on the hyperplane; the supremum is exactly 0.
        return 0.0
    slack = max(delta - mean_in_norm**2, 0.0)
    return float(y0_perp @ mean) - anchor * math.sqrt(slack)


def calibrate_uncertainty(
    fit: FactorFit,
    cov_model: CovModel,
    target_return: float,
    delta_level: float = 0.95,
    rho_level: float = 0.95,
    bandwidth: int | None = None,
    bandwidth_scale: float = 5.0,
    draws: int = 200_000,
    seed: int = 0,
) -> tuple[UncertaintyParams, np.ndarray]:
    """Run the full calibration on an estimated model.

    Estimates the long-run covariance of the fitted factors (bandwidth from
    the default rule unless given), selects ``delta`` at ``delta_level``,
    solves the closed-form mean-variance weight on the assembled covariance,
    and selects ``rho`` at ``rho_level``. Returns the calibrated parameters
    and the mean-variance weight they are anchored to.
    """
    q_t = bandwidth if bandwidth is not None else default_bandwidth(
        fit.n_periods, fit.n_assets, bandwidth_scale
    )
    longrun = hac_long_run_cov(fit.factors, fit.factor_mean, q_t)
    delta = select_delta(fit, longrun, delta_level, draws, seed)
    w_mv = mv_closed_form(cov_model.mean, cov_model.sigma_r, target_return)
    params = select_rho(
        delta, fit, longrun, w_mv, target_return, 1.0 - rho_level, delta_level=delta_level
    )
    return params, w_mv
