"""Kernel-smoothed long-run covariance of the factor series."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_PSD_FLOOR = -1e-10


@dataclass(frozen=True, eq=False)
class LongRunCov:
    """Long-run covariance estimate with its bandwidth and kernel tag."""

    matrix: np.ndarray
    bandwidth: int
    kernel: str = "bartlett"


def autocov(factors: np.ndarray, mean: np.ndarray, lag: int) -> np.ndarray:
    """Lag-``lag`` autocovariance with divisor T (not T - lag).

    Returns ``(1/T) * sum_{t=lag+1..T} (F_t - mean)(F_{t-lag} - mean)'``.
    The lag-0 matrix is symmetrized so downstream identities hold exactly.
    """
    factors = np.asarray(factors, dtype=float)
    mean = np.asarray(mean, dtype=float)
    t = factors.shape[1]
    if not 0 <= lag <= t - 1:
        raise ValueError(f"lag={lag} outside [0, {t - 1}]")
    centered = factors - mean[:, None]
    cov = centered[:, lag:] @ centered[:, : t - lag].T / t
    if lag == 0:
        cov = (cov + cov.T) / 2.0
    return cov


def hac_long_run_cov(factors: np.ndarray, mean: np.ndarray, bandwidth: int) -> LongRunCov:
    """Bartlett-weighted sum of autocovariances.

    Computes ``C(0) + sum_{j>=1} (1 - j/bandwidth) (C(j) + C(j)')``; the
    kernel vanishes at ``j >= bandwidth``, so the loop stops there. The
    Bartlett weighting makes the result positive semidefinite up to
    round-off; eigenvalues below ``-1e-10`` abort, and small negative ones
    are clipped to zero.
    """
    factors = np.asarray(factors, dtype=float)
    if not np.all(np.isfinite(factors)):
        raise ValueError("factors contain non-finite entries")
    if bandwidth < 1:
        raise ValueError(f"bandwidth must be >= 1, got {bandwidth}")
    t = factors.shape[1]
    total = autocov(factors, mean, 0)
    for j in range(1, min(bandwidth, t)):
        weight = 1.0 - j / bandwidth
        cj = autocov(factors, mean, j)
        total = total + weight * (cj + cj.T)
    total = (total + total.T) / 2.0

    eigvals = np.linalg.eigvalsh(total)
    if eigvals[0] < _PSD_FLOOR:
        raise RuntimeError(
            f"Bartlett-weighted covariance has eigenvalue {eigvals[0]:.3e} below "
            f"the PSD floor; input factors are pathological"
        )
    if eigvals[0] < 0.0:
        vals, vecs = np.linalg.eigh(total)
        total = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        total = (total + total.T) / 2.0
    return LongRunCov(total, int(bandwidth), "bartlett")


def default_bandwidth(t: int, p: int, c: float = 5.0) -> int:
    """Bandwidth rule ``max(1, floor(c * T^(-1/8) * p^(1/4)))``."""
    if t < 2:
        raise ValueError(f"t must be >= 2, got {t}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if c <= 0:
        raise ValueError(f"c must be > 0, got {c}")
    return max(1, math.floor(c * t ** (-0.125) * p**0.25))


def iid_long_run_cov(factor_mean: np.ndarray) -> LongRunCov:
    """Long-run covariance under serial independence.

    For factors normalized to unit second moment this is ``I - m m'``,
    identical to the bandwidth-1 kernel estimate.
    """
    mean = np.asarray(factor_mean, dtype=float)
    k = mean.shape[0]
    return LongRunCov(np.eye(k) - np.outer(mean, mean), 1, "bartlett")
