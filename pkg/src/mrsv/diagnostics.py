"""Posterior summaries and chain-health numbers.

Everything here is a pure function of the draw arrays: per-parameter
means, sds, equal-tailed 95% intervals (linear-interpolation quantiles),
and the inefficiency factor 1 + 2 sum_g rho_hat(g) with an adaptive
truncation window (stop at the first lag whose autocorrelation drops
below 2/sqrt(n), never summing past n/10 lags).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .samplers import DrawStore

__all__ = [
    "ParamSummary",
    "derived_leverage_correlation",
    "inefficiency_factor",
    "summarize",
    "summarize_chain",
]


@dataclass
class ParamSummary:
    """One row of the reporting table for a scalar parameter."""

    name: str
    posterior_mean: float
    posterior_sd: float
    ci_low: float
    ci_high: float
    inefficiency_factor: float  # NaN when not applicable (constant or short chain)


def _sample_autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    """rho_hat(0..max_lag) with the biased (1/n) covariance convention."""
    n = x.size
    xc = x - x.mean()
    m = 1
    while m < 2 * n:
        m <<= 1
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * f.conj(), m)[: max_lag + 1]
    return acov / acov[0]


def inefficiency_factor(chain) -> float:
    """1 + 2 sum of sample autocorrelations under the adaptive cutoff.

    Lags are summed until the first one falls below 2/sqrt(n), and never
    beyond n/10.  Every included term is positive, so the result is >= 1.
    Constant chains have no defined autocorrelation; they return NaN.
    """
    x = np.asarray(chain, dtype=np.float64).ravel()
    n = x.size
    if n < 50:
        raise ValueError("need a chain of length >= 50")
    if np.ptp(x) == 0.0:
        return math.nan
    cap = n // 10
    rho = _sample_autocorr(x, cap)[1:]
    below = np.nonzero(rho < 2.0 / math.sqrt(n))[0]
    stop = int(below[0]) if below.size else cap
    return 1.0 + 2.0 * float(np.sum(rho[:stop]))


def summarize_chain(name: str, chain) -> ParamSummary:
    """Summary row for one scalar chain."""
    x = np.asarray(chain, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two draws to summarize")
    lo, hi = np.quantile(x, [0.025, 0.975])
    if x.size >= 50 and np.ptp(x) > 0.0:
        iff = inefficiency_factor(x)
    else:
        iff = math.nan
    return ParamSummary(
        name=name,
        posterior_mean=float(x.mean()),
        posterior_sd=float(x.std(ddof=1)),
        ci_low=float(lo),
        ci_high=float(hi),
        inefficiency_factor=iff,
    )


def summarize(draws: DrawStore) -> list[ParamSummary]:
    """One ParamSummary per scalar parameter column, in flattening order."""
    if draws.n_draws < 2:
        raise ValueError("need at least two draws to summarize")
    return [summarize_chain(name, draws.params[:, j]) for j, name in enumerate(draws.names)]


def derived_leverage_correlation(draws: DrawStore, asset: int, factor: int = 0) -> ParamSummary:
    """Summary of the shock/log-variance correlation for one asset and factor.

    Per draw the correlation between the return shock z_{factor,t} and the
    next day's log-variance h_{asset,t+1} is
    lam[asset, factor] / sqrt(sum_k lam[asset, k]^2 + psi[asset, asset]),
    which always lies in (-1, 1) for positive-definite psi.
    """
    lam_names = [n for n in draws.names if n.startswith(f"lam[{asset},")]
    if not lam_names:
        raise ValueError("draws carry no leverage loadings")
    q = len(lam_names)
    if not 0 <= factor < q:
        raise ValueError(f"factor index {factor} out of range for {q} loading columns")
    row = np.column_stack([draws.column(f"lam[{asset},{k}]") for k in range(q)])
    psi_ii = draws.column(f"psi[{asset},{asset}]")
    chain = row[:, factor] / np.sqrt(np.sum(row**2, axis=1) + psi_ii)
    return summarize_chain(f"lev_corr[{asset},{factor}]", chain)
