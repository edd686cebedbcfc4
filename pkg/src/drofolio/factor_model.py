"""Latent factor estimation and sparse-plus-low-rank covariance assembly.

The pipeline is: extract principal-component factors from the panel's Gram
matrix, select how many to keep with an information criterion, shrink the
residual covariance entrywise with an adaptive threshold, and put the pieces
back together into a full return covariance model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .panel import ReturnPanel

_NORMALIZATION_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FactorFit:
    """Principal-component fit of a return panel.

    Attributes
    ----------
    k : int
        Number of retained factors.
    factors : numpy.ndarray, shape (K, T)
        Estimated factor series, scaled so ``factors @ factors.T / T`` is the
        identity.
    loadings : numpy.ndarray, shape (p, K)
        Estimated exposures of each asset to each factor.
    factor_mean : numpy.ndarray, shape (K,)
        Time average of the factors.
    second_moment : numpy.ndarray, shape (K, K)
        ``factors @ factors.T / T`` — the identity up to round-off under the
        scaling above.
    residuals : numpy.ndarray, shape (p, T)
        ``returns - loadings @ factors``, exact by construction.
    """

    k: int
    factors: np.ndarray
    loadings: np.ndarray
    factor_mean: np.ndarray
    second_moment: np.ndarray
    residuals: np.ndarray

    @property
    def n_assets(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_periods(self) -> int:
        return self.factors.shape[1]


@dataclass(frozen=True, eq=False)
class SparseResidualCov:
    """Entrywise-shrunk residual covariance.

    The diagonal carries the raw sample variances; each off-diagonal entry is
    the sample covariance passed through a hard or soft threshold.
    """

    matrix: np.ndarray
    threshold_constant: float
    rule: str
    zero_fraction: float


@dataclass(frozen=True, eq=False)
class CovModel:
    """Assembled return covariance: low-rank factor part plus sparse residual."""

    sigma_r: np.ndarray
    loadings: np.ndarray
    factor_cov: np.ndarray
    residual_cov: SparseResidualCov
    mean: np.ndarray
    factor_mean: np.ndarray


def estimate_factors(panel: ReturnPanel, k: int) -> FactorFit:
    """Extract the top-``k`` principal-component factors of a panel.

    The factor series are the leading eigenvectors of the T-by-T Gram matrix
    ``R.T @ R`` scaled by ``sqrt(T)``; loadings follow by regression,
    ``R @ F.T / T``. Column signs are fixed so the largest-magnitude loading
    on each factor is positive, which makes the output deterministic.

    Raises
    ------
    ValueError
        If ``k`` is outside ``[1, min(p, T)]`` or the panel contains
        non-finite values.
    """
    r = panel.returns
    p, t = r.shape
    if not 1 <= k <= min(p, t):
        raise ValueError(f"k={k} outside [1, {min(p, t)}]")
    gram = r.T @ r
    try:
        eigvals, eigvecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise ValueError("eigendecomposition of the Gram matrix failed") from exc
    order = np.argsort(eigvals)[::-1][:k]
    v = eigvecs[:, order]            # T x k, orthonormal columns
    factors = math.sqrt(t) * v.T     # K x T
    loadings = r @ v / math.sqrt(t)  # p x K

    # Sign convention: largest-magnitude loading per factor points up.
    for j in range(k):
        lead = np.argmax(np.abs(loadings[:, j]))
        if loadings[lead, j] < 0:
            loadings[:, j] = -loadings[:, j]
            factors[j, :] = -factors[j, :]

    second_moment = factors @ factors.T / t
    if np.max(np.abs(second_moment - np.eye(k))) > _NORMALIZATION_TOL:
        raise ValueError("factor normalization failed; input panel is degenerate")
    return FactorFit(
        k=k,
        factors=factors,
        loadings=loadings,
        factor_mean=factors.mean(axis=1),
        second_moment=second_moment,
        residuals=r - loadings @ factors,
    )


def bai_ng_penalty(t: int, p: int) -> float:
    """Overfitting penalty ((p+T)/(pT)) * log(pT/(p+T))."""
    return (p + t) / (p * t) * math.log(p * t / (p + t))


def select_num_factors(panel: ReturnPanel, max_k: int) -> int:
    """Pick the factor count minimizing the penalized log residual variance.

    Scans K in ``{0, ..., max_k}`` and returns the argmin of
    ``log(SSR(K)/(pT)) + K * g(T, p)`` with ties broken toward the smaller K.
    ``SSR(K)`` is the Frobenius residual of the rank-K principal-component
    reconstruction, computed from the Gram spectrum.
    """
    r = panel.returns
    p, t = r.shape
    if not 1 <= max_k <= min(p, t) - 1:
        raise ValueError(f"max_k={max_k} outside [1, {min(p, t) - 1}]")
    eigvals = np.sort(np.linalg.eigvalsh(r.T @ r))[::-1]
    total = float(np.sum(eigvals))
    if total <= 0.0:
        raise ValueError("degenerate all-zero panel: factor count undefined")
    penalty = bai_ng_penalty(t, p)

    best_k, best_crit = 0, math.inf
    ssr = total
    for k in range(max_k + 1):
        crit = math.log(max(ssr, 1e-300) / (p * t)) + k * penalty
        if crit < best_crit:
            best_k, best_crit = k, crit
        if k < max_k:
            ssr = max(ssr - float(eigvals[k]), 0.0)
    return best_k


def _sample_second_moment(residuals: np.ndarray) -> np.ndarray:
    t = residuals.shape[1]
    s = residuals @ residuals.T / t
    return (s + s.T) / 2.0


def threshold_residual_cov(residuals: np.ndarray, c: float, rule: str = "soft") -> SparseResidualCov:
    """Adaptively threshold the residual sample covariance.

    Entry (i, j) is shrunk against ``tau_ij = c * sqrt(theta_ij) * omega``,
    where ``theta_ij`` is the sample variance of the products
    ``e_it * e_jt`` and ``omega = sqrt(1/p) + sqrt(log(p)/T)``. The diagonal
    is never touched. ``rule='hard'`` keeps entries beyond the threshold
    as-is; ``rule='soft'`` also pulls them toward zero by ``tau_ij``.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim != 2:
        raise ValueError("residuals must be 2-d (p, T)")
    if not np.all(np.isfinite(residuals)):
        raise ValueError("residuals contain non-finite entries")
    if c < 0:
        raise ValueError(f"threshold constant must be >= 0, got {c}")
    if rule not in ("hard", "soft"):
        raise ValueError(f"rule must be 'hard' or 'soft', got {rule!r}")

    p, t = residuals.shape
    s = _sample_second_moment(residuals)
    sq = residuals * residuals
    theta = sq @ sq.T / t - s * s
    theta = np.clip((theta + theta.T) / 2.0, 0.0, None)
    omega = math.sqrt(1.0 / p) + math.sqrt(math.log(p) / t) if p > 1 else 1.0
    tau = c * np.sqrt(theta) * omega

    if rule == "hard":
        shrunk = np.where(np.abs(s) > tau, s, 0.0)
    else:
        shrunk = np.sign(s) * np.maximum(np.abs(s) - tau, 0.0)
    out = shrunk.copy()
    np.fill_diagonal(out, np.diag(s))

    off_diag = p * p - p
    zero_fraction = 0.0
    if off_diag:
        zeros = int(np.count_nonzero(out == 0.0)) - int(np.count_nonzero(np.diag(out) == 0.0))
        zero_fraction = zeros / off_diag
    return SparseResidualCov(out, float(c), rule, zero_fraction)


def _is_positive_definite(matrix: np.ndarray) -> bool:
    eigvals = np.linalg.eigvalsh(matrix)
    return eigvals[0] > 0 and eigvals[0] > 1e-10 * max(eigvals[-1], 0.0)


def cross_validate_threshold(
    residuals: np.ndarray,
    folds: int,
    grid,
    seed: int = 0,
    rule: str = "soft",
) -> float:
    """Choose the threshold constant by repeated random-split validation.

    Each of the ``folds`` splits holds 2/3 of the time indices for training
    and the rest for testing; the score of a constant is the mean squared
    Frobenius distance between the thresholded training covariance and the
    raw test covariance. The search is restricted to constants at or above
    the smallest grid value that keeps every training covariance positive
    definite, and at or below the smallest one that zeroes out every
    off-diagonal.

    Raises
    ------
    ValueError
        If no grid value is positive definite on every fold; the message
        names the first failing fold.
    """
    residuals = np.asarray(residuals, dtype=float)
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    grid = [float(c) for c in grid]
    if not grid:
        raise ValueError("empty threshold grid")
    if sorted(grid) != grid:
        raise ValueError("threshold grid must be sorted ascending")

    t = residuals.shape[1]
    n_train = int(round(2 * t / 3))
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(folds):
        perm = rng.permutation(t)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))

    test_covs = [_sample_second_moment(residuals[:, test]) for _, test in splits]
    train_covs = [
        [threshold_residual_cov(residuals[:, train], c, rule).matrix for train, _ in splits]
        for c in grid
    ]

    pd_ok = [all(_is_positive_definite(m) for m in covs) for covs in train_covs]
    if not any(pd_ok):
        worst = [_is_positive_definite(m) for m in train_covs[-1]]
        fold = worst.index(False)
        raise ValueError(
            f"no grid value is positive definite on every fold (fold {fold} fails "
            f"even at C={grid[-1]})"
        )
    c_lower_idx = pd_ok.index(True)

    diagonal = [
        all(np.count_nonzero(m - np.diag(np.diag(m))) == 0 for m in covs)
        for covs in train_covs
    ]
    c_upper_idx = diagonal.index(True) if any(diagonal) else len(grid) - 1
    c_upper_idx = max(c_upper_idx, c_lower_idx)

    best_c, best_loss = None, math.inf
    for idx in range(c_lower_idx, c_upper_idx + 1):
        if not pd_ok[idx]:
            continue
        loss = float(
            np.mean([np.sum((train_covs[idx][j] - test_covs[j]) ** 2) for j in range(folds)])
        )
        if loss < best_loss:
            best_c, best_loss = grid[idx], loss
    return best_c


DEFAULT_THRESHOLD_GRID = tuple(np.linspace(0.0, 4.0, 21))


def repair_threshold_pd(
    residuals: np.ndarray,
    c: float,
    rule: str = "soft",
    grid=DEFAULT_THRESHOLD_GRID,
) -> SparseResidualCov:
    """Threshold at ``c``, walking up the grid if the result is indefinite."""
    cov = threshold_residual_cov(residuals, c, rule)
    if _is_positive_definite(cov.matrix):
        return cov
    for candidate in grid:
        if candidate <= c:
            continue
        cov = threshold_residual_cov(residuals, candidate, rule)
        if _is_positive_definite(cov.matrix):
            return cov
    raise ValueError("no threshold constant on the grid gives a positive definite matrix")


def select_threshold_constant(
    residuals: np.ndarray,
    folds: int = 5,
    grid=DEFAULT_THRESHOLD_GRID,
    seed: int = 0,
    rule: str = "soft",
) -> float:
    """Cross-validate the threshold constant, then bump it until the
    full-sample matrix is positive definite."""
    c = cross_validate_threshold(residuals, folds, grid, seed, rule)
    return repair_threshold_pd(residuals, c, rule, grid).threshold_constant


def assemble_return_cov(fit: FactorFit, residual_cov: SparseResidualCov) -> CovModel:
    """Combine a factor fit and a shrunk residual covariance.

    The factor block is ``B (S - m m') B'`` with ``S`` the factor second
    moment (identity under the principal-component scaling) and ``m`` the
    factor mean; the result is symmetrized before the residual part is added
    so the output is exactly symmetric.
    """
    if residual_cov.matrix.shape[0] != fit.n_assets:
        raise ValueError(
            f"residual covariance is {residual_cov.matrix.shape[0]}-dimensional, "
            f"fit has {fit.n_assets} assets"
        )
    mu = fit.factor_mean
    factor_cov = fit.second_moment - np.outer(mu, mu)
    factor_cov = (factor_cov + factor_cov.T) / 2.0
    low_rank = fit.loadings @ factor_cov @ fit.loadings.T
    low_rank = (low_rank + low_rank.T) / 2.0
    sigma_r = low_rank + residual_cov.matrix
    return CovModel(
        sigma_r=sigma_r,
        loadings=fit.loadings,
        factor_cov=factor_cov,
        residual_cov=residual_cov,
        mean=fit.loadings @ mu,
        factor_mean=mu,
    )
