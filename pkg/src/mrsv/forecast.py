"""One-step-ahead predictive moments, minimum-variance weights, and the
rolling re-estimation protocol.

Per retained draw the day-(T+1) state is the conditional mean of the
transition: log-variances follow the AR recursion (plus the shock drift
under leverage), the correlation path and the mean path carry forward
(both are random walks in the mean).  The predictive covariance is the
draw-average of per-draw V^{1/2} R V^{1/2} + diag(sigma2_m); the
predictive mean is the draw-average of the mean path's last day.

The rolling protocol re-estimates on a window that slides one day at a
time, warm-starting each chain from the previous window's posterior
means, and books the realized objective w' Sigma_{t+1} w against an
externally supplied realized-covariance series.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import corrmat
from .model import (
    Dataset,
    LatentPaths,
    ModelParams,
    ModelVariant,
    corr_sqrt,
    flatten_params,
    param_names,
    unflatten_params,
)
from .samplers import ChainState, DrawStore, McmcConfig, run_mcmc

__all__ = [
    "ForecastProtocol",
    "PortfolioPlan",
    "PredictiveMoments",
    "cumulative_objective",
    "equal_weight_plan",
    "frozen_estimator",
    "min_variance_weights",
    "predictive_moments",
    "rolling_forecast",
]

KAPPA_FLOOR = 1e-12  # below this the excess-return signal is treated as zero


@dataclass
class PredictiveMoments:
    """Day-(T+1) return mean vector and covariance matrix given days 1..T."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class PortfolioPlan:
    """Per-day holdings of one rolling run at a fixed target return.

    ``cash_weight`` is defined as one minus the sum of the risky weights,
    so the accounting identity holds by construction.
    ``realized_objective`` is NaN where no realized covariance was given.
    """

    dates: np.ndarray
    weights: np.ndarray
    cash_weight: np.ndarray
    target_mu: float
    risk_free: np.ndarray
    realized_objective: np.ndarray


@dataclass
class ForecastProtocol:
    """Rolling-forecast settings at desk scale."""

    window_len: int = 300
    n_steps: int = 30
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(n_burnin=500, n_keep=1000))
    risk_free: float | np.ndarray = 0.0
    target_mus: tuple[float, ...] = (0.1,)
    realized_cov: np.ndarray | None = None  # (T, p, p) aligned with the dataset rows
    warm_start: bool = True
    warm_burnin: int | None = None  # smaller burn-in for warm-started windows; None keeps mcmc.n_burnin
    integrate_log_var_noise: bool = False


def _assemble_corr_stack(fisher: np.ndarray, p: int) -> np.ndarray:
    """(n, p, p) correlation matrices from rows of Fisher coordinates."""
    pairs = corrmat.pair_indices(p)
    rho = corrmat.inverse_fisher(fisher)
    out = np.tile(np.eye(p), (fisher.shape[0], 1, 1))
    out[:, pairs[:, 0], pairs[:, 1]] = rho
    out[:, pairs[:, 1], pairs[:, 0]] = rho
    return out


def predictive_moments(
    draws: DrawStore, variant: ModelVariant, integrate_log_var_noise: bool = False
) -> PredictiveMoments:
    """Monte-Carlo average of the per-draw one-step-ahead moments.

    Each draw propagates tomorrow's log variance at its conditional mean;
    ``integrate_log_var_noise`` instead integrates the volatility innovation
    out of the exponential, multiplying entry (i, j) by
    exp((C_ii + C_jj + 2 C_ij) / 8) with C the innovation covariance.
    """
    n = draws.n_draws
    if n < 1:
        raise ValueError("empty draw store")
    p = draws.log_var_last.shape[1]
    phi = draws.block("phi")
    mu = draws.block("mu")
    hbar = mu + phi * (draws.log_var_last - mu)
    if variant.has_leverage:
        if draws.shock_last is None:
            raise ValueError("draws carry no shock snapshots; cannot forecast under leverage")
        q = variant.loading_cols(p)
        lam = draws.block("lam").reshape(n, q, p).transpose(0, 2, 1)
        hbar = hbar + np.einsum("nij,nj->ni", lam, draws.shock_last[:, :q])
    R = _assemble_corr_stack(draws.fisher_last, p)
    v = np.exp(0.5 * hbar)
    sig = v[:, :, None] * R * v[:, None, :]
    if integrate_log_var_noise:
        c = draws.block("psi" if variant.has_leverage else "omega").reshape(n, p, p)
        d = np.einsum("nii->ni", c)
        sig = sig * np.exp(0.125 * (d[:, :, None] + d[:, None, :] + 2.0 * c))
    if "sigma2_m[0]" in draws.names:
        idx = np.arange(p)
        sig[:, idx, idx] += draws.block("sigma2_m")
    cov = sig.mean(axis=0)
    cov = 0.5 * (cov + cov.T)
    return PredictiveMoments(mean=draws.mean_last.mean(axis=0), cov=cov)


def min_variance_weights(pm: PredictiveMoments, risk_free: float, target_mu: float):
    """Closed-form minimum-variance weights hitting the target return.

    Returns ``(weights, kappa_t)`` with kappa_t the excess-return quadratic
    form; by construction w'mean + (1 - w'1) r_f = target_mu.
    """
    excess = pm.mean - risk_free
    sol = np.linalg.solve(pm.cov, excess)
    kappa = float(excess @ sol)
    if kappa < KAPPA_FLOOR:
        raise ValueError("no excess-return signal")
    return sol * ((target_mu - risk_free) / kappa), kappa


def cumulative_objective(plan: PortfolioPlan, realized_cov) -> float:
    """Sum over days of w_t' Sigma_{t+1} w_t against a realized-cov series."""
    sig = np.asarray(realized_cov, dtype=np.float64)
    n, p = plan.weights.shape
    if sig.shape != (n, p, p):
        raise ValueError(f"realized covariance shape {sig.shape} does not match plan ({n}, {p}, {p})")
    per_day = np.einsum("ti,tij,tj->t", plan.weights, sig, plan.weights)
    return float(np.sum(per_day))


def equal_weight_plan(dates, p: int, risk_free=0.0) -> PortfolioPlan:
    """1/p-in-every-asset baseline plan over the given forecast days."""
    dates = np.asarray(dates)
    n = dates.shape[0]
    w = np.full((n, p), 1.0 / p)
    return PortfolioPlan(
        dates=dates,
        weights=w,
        cash_weight=1.0 - w.sum(axis=1),
        target_mu=float("nan"),
        risk_free=np.broadcast_to(np.asarray(risk_free, dtype=np.float64), (n,)).copy(),
        realized_objective=np.full(n, np.nan),
    )


def frozen_estimator(params: ModelParams, variant: ModelVariant):
    """Deterministic single-draw stand-in for the MCMC estimator.

    The returned callable maps a window to a one-draw store whose latents
    are plug-in transforms of the observed measures (missing cells fall
    back to the day-free level).  It isolates the rolling protocol from
    sampler noise: plans built with it are bit-for-bit reproducible.
    """

    def estimate(window: Dataset, cfg: McmcConfig, init=None) -> DrawStore:
        T, p = window.y.shape
        h = np.where(np.isfinite(window.x), window.x - params.xi, params.mu)
        g = np.where(np.isfinite(window.w), window.w - params.delta, 0.0)
        m = np.zeros((T, p))
        R = corrmat.assemble(g[-1], p)
        s_inv = np.linalg.inv(corr_sqrt(R, variant.sqrt))
        z = s_inv @ (np.exp(-0.5 * h[-1]) * (window.y[-1] - m[-1]))
        return DrawStore(
            names=param_names(p, variant),
            params=flatten_params(params, variant)[None, :],
            log_var_last=h[-1][None, :],
            fisher_last=g[-1][None, :],
            mean_last=m[-1][None, :],
            accept_rates={},
            meta={"p": p, "variant": variant.label(), "seed": cfg.seed},
            shock_last=z[None, :],
        )

    return estimate


def _mcmc_estimator(window: Dataset, cfg: McmcConfig, init: ChainState | None) -> DrawStore:
    return run_mcmc(window, cfg, init=init)


def _warm_state(draws: DrawStore, p: int, variant: ModelVariant) -> ChainState | None:
    """Posterior-mean parameters and latents, shifted one day forward."""
    if draws.log_var_paths is None:
        return None
    params = unflatten_params(draws.params.mean(axis=0), p, variant)
    paths = (draws.log_var_paths, draws.fisher_paths, draws.mean_paths)
    shifted = []
    for path in paths:
        mean_path = path.mean(axis=0)
        shifted.append(np.vstack([mean_path[1:], mean_path[-1:]]))
    latents = LatentPaths(log_var=shifted[0], fisher_corr=shifted[1], mean=shifted[2])
    return ChainState(params=params, latents=latents, rng=np.random.default_rng(0))


def rolling_forecast(full_data: Dataset, protocol: ForecastProtocol, estimate=None) -> list[PortfolioPlan]:
    """Slide a window one day at a time; one plan per target return.

    Each window is estimated (warm-started from the previous window's
    posterior means when paths are stored), one-step moments and weights
    are computed, and the realized objective is booked against
    ``protocol.realized_cov`` for the held-out day.  A kappa below the
    floor books an all-cash day with a warning instead of failing.
    """
    T, p = full_data.y.shape
    W, S = protocol.window_len, protocol.n_steps
    if W < 2 or S < 1:
        raise ValueError("need window_len >= 2 and n_steps >= 1")
    if W + S > T:
        raise ValueError(f"window_len + n_steps = {W + S} exceeds the {T} available days")
    rf = np.asarray(protocol.risk_free, dtype=np.float64)
    rf = np.full(S, float(rf)) if rf.ndim == 0 else rf.astype(np.float64, copy=True)
    if rf.shape != (S,):
        raise ValueError("risk_free must be a scalar or one value per step")
    variant = protocol.mcmc.variant
    run = _mcmc_estimator if estimate is None else estimate
    store_paths = protocol.warm_start and estimate is None

    dates = np.empty(S, dtype=object)
    weights = {tm: np.empty((S, p)) for tm in protocol.target_mus}
    realized = {tm: np.full(S, np.nan) for tm in protocol.target_mus}
    init: ChainState | None = None
    for step in range(S):
        window = full_data.window(step, step + W)
        cfg = replace(protocol.mcmc, seed=protocol.mcmc.seed + step, store_paths=store_paths)
        if step > 0 and init is not None and protocol.warm_burnin is not None:
            cfg = replace(cfg, n_burnin=protocol.warm_burnin)
        try:
            draws = run(window, cfg, init)
        except Exception as exc:
            raise RuntimeError(f"window estimation failed at step {step}") from exc
        pm = predictive_moments(draws, variant, protocol.integrate_log_var_noise)
        target_day = step + W
        dates[step] = full_data.dates[target_day] if full_data.dates is not None else target_day
        for tm in protocol.target_mus:
            try:
                w, _ = min_variance_weights(pm, rf[step], tm)
            except ValueError:
                warnings.warn(f"no excess-return signal at step {step}; holding cash", stacklevel=2)
                w = np.zeros(p)
            weights[tm][step] = w
            if protocol.realized_cov is not None:
                sig = np.asarray(protocol.realized_cov[target_day], dtype=np.float64)
                realized[tm][step] = float(w @ sig @ w)
        if protocol.warm_start:
            init = _warm_state(draws, p, variant)
    return [
        PortfolioPlan(
            dates=dates.copy(),
            weights=weights[tm],
            cash_weight=1.0 - weights[tm].sum(axis=1),
            target_mu=tm,
            risk_free=rf.copy(),
            realized_objective=realized[tm],
        )
        for tm in protocol.target_mus
    ]
