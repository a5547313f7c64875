"""Sampling utilities shared by the posterior blocks.

All draws consume a ``numpy.random.Generator`` so a fixed seed reproduces a
chain bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from mrsv import _kernels


def sample_truncated_normal(rng, mean: float, sd: float, lo: float, hi: float) -> float:
    """Exact inverse-CDF draw from N(mean, sd^2) restricted to (lo, hi).

    Bounds may be infinite.  The result is strictly inside the interval;
    draws remain exact arbitrarily deep in either tail.
    """
    if not lo < hi:
        raise ValueError("empty truncation interval")
    if sd <= 0.0:
        raise ValueError("sd must be positive")
    return float(_kernels.tn_draw(rng, float(mean), float(sd), float(lo), float(hi)))


def sample_inverse_gamma(rng, shape, scale, size=None):
    """Draw from InvGamma(shape, scale) with density proportional to x^(-shape-1) exp(-scale/x).

    ``shape`` and ``scale`` may be arrays; they broadcast elementwise.
    """
    shape = np.asarray(shape, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(shape <= 0.0) or np.any(scale <= 0.0):
        raise ValueError("shape and scale must be positive")
    out = 1.0 / rng.gamma(shape, 1.0 / scale, size=size)
    return float(out) if np.ndim(out) == 0 else out


def sample_inverse_wishart(rng, df: float, scale: np.ndarray) -> np.ndarray:
    """Draw from the inverse Wishart with mean scale / (df - p - 1) for df > p + 1."""
    scale = np.asarray(scale, dtype=np.float64)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError("df must exceed p - 1")
    out = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    return np.atleast_2d(out)


def sample_matrix_normal(rng, mean: np.ndarray, row_cov: np.ndarray, col_cov: np.ndarray) -> np.ndarray:
    """Draw X = M + L_row E L_col' with E iid standard normal entries."""
    mean = np.asarray(mean, dtype=np.float64)
    lr = np.linalg.cholesky(np.asarray(row_cov, dtype=np.float64))
    lc = np.linalg.cholesky(np.asarray(col_cov, dtype=np.float64))
    e = rng.standard_normal(mean.shape)
    return mean + lr @ e @ lc.T


def sample_truncated_mvn_box(
    rng,
    mean: np.ndarray,
    cov: np.ndarray,
    lo: float = -1.0,
    hi: float = 1.0,
    max_rejects: int = 1000,
    gibbs_sweeps: int = 50,
):
    """Draw from N(mean, cov) restricted to the box (lo, hi)^p.

    Rejection from the unrestricted normal, capped at ``max_rejects``
    attempts; after the cap a within-box Gibbs pass over univariate
    truncated-normal conditionals takes over, seeded at the clipped mean.

    Returns
    -------
    (x, used_fallback) : (ndarray, bool)
    """
    mean = np.asarray(mean, dtype=np.float64)
    p = mean.shape[0]
    L = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    for _ in range(max_rejects):
        x = mean + L @ rng.standard_normal(p)
        if np.all(x > lo) and np.all(x < hi):
            return x, False
    prec = np.linalg.inv(np.asarray(cov, dtype=np.float64))
    x = np.clip(mean, lo + 1e-6, hi - 1e-6).copy()
    for _ in range(gibbs_sweeps):
        for i in range(p):
            others = x - mean
            others[i] = 0.0
            cond_mean = mean[i] - (prec[i] @ others) / prec[i, i]
            cond_sd = 1.0 / np.sqrt(prec[i, i])
            x[i] = sample_truncated_normal(rng, cond_mean, cond_sd, lo, hi)
    return x, True
