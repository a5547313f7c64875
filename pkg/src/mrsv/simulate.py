"""Synthetic data generation for the latent-correlation volatility model.

Simulates the full generative process (latent log variances, Fisher
correlations, slow mean path, daily returns, realized measures) given a
parameter set, plus helpers used by the estimation tests: a redraw of the
observation layer at fixed latents (the conditional the sampler targets) and
an intraday return generator whose realized measures are consistent with the
daily covariance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import corrmat
from .model import (
    Dataset,
    LatentPaths,
    MeanKind,
    ModelParams,
    ModelVariant,
    corr_sqrt,
    stationary_init_cov,
)
from .samplers import return_conditional_terms

_MAX_REDRAW = 1000


@dataclass
class SimConfig:
    """Controls for a synthetic dataset."""

    n_days: int
    n_assets: int
    params: ModelParams
    variant: ModelVariant = field(default_factory=ModelVariant)
    missing_rate: float = 0.0
    pair_mask: Optional[np.ndarray] = None
    kappa: float = 100.0
    const_mean_sd: float = 0.1  # spread of the constant mean vector, when used
    seed: int = 0

    def validate(self):
        if self.n_days < 1:
            raise ValueError("n_days must be positive")
        if self.n_assets < 2:
            raise ValueError("need at least two assets")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        self.params.validate(self.n_assets, self.n_assets * (self.n_assets - 1) // 2, self.variant)


def default_truth(p: int, variant: ModelVariant = None, leverage_scale: float = -0.06) -> ModelParams:
    """A stable, realistically scaled parameter set for experiments.

    Persistence 0.9, measurement noise 0.3 on log variances, realized-measure
    biases -0.5 (variance) and -0.3 (correlation), and a leverage loading of
    ``leverage_scale`` per factor column when the variant has leverage.
    """
    if variant is None:
        variant = ModelVariant()
    omega = 0.018 * np.eye(p) + 0.012 * np.ones((p, p))
    params = ModelParams(
        phi=np.full(p, 0.9),
        mu=np.full(p, -0.5),
        xi=np.full(p, -0.5),
        delta=np.full(p * (p - 1) // 2, -0.3),
        sigma2_u=np.full(p, 0.09),
        sigma2_v=np.full(p * (p - 1) // 2, 0.04),
        sigma2_zeta=np.full(p * (p - 1) // 2, 0.01),
        sigma2_m=np.full(p, 1e-3),
        omega=omega,
    )
    if variant.has_leverage:
        q = variant.loading_cols(p)
        params.psi = omega.copy()
        params.omega = None
        params.lam = np.full((p, q), leverage_scale)
    return params


def _step_fisher_path(rng, g_prev, ii, jj, free, sd, p):
    """One random-walk step of the Fisher path, kept inside the feasible set.

    Each free pair is updated in canonical order; a candidate step that
    leaves the positive-definite region is redrawn, halving the step scale
    after every ``_MAX_REDRAW`` failed attempts.
    """
    g_new = g_prev.copy()
    r = corrmat.assemble(g_new, p)
    for k in range(ii.shape[0]):
        if not free[k]:
            continue
        i, j = int(ii[k]), int(jj[k])
        lo, hi = corrmat.entry_bounds(r, i, j)
        scale = sd[k]
        for attempt in range(5 * _MAX_REDRAW):
            cand = g_new[k] + scale * rng.standard_normal()
            rho = np.tanh(0.5 * cand)
            if lo < rho < hi:
                break
            if (attempt + 1) % _MAX_REDRAW == 0:
                scale *= 0.5
        else:
            # Degenerate corner: freeze the entry for this step.
            cand = g_new[k]
        g_new[k] = cand
        r[i, j] = r[j, i] = np.tanh(0.5 * cand)
    return g_new


def _init_fisher_path(rng, ii, jj, free, sd0, p):
    g0 = np.zeros(ii.shape[0])
    return _step_fisher_path(rng, g0, ii, jj, free, np.where(free, sd0, 0.0), p)


def simulate_dataset(cfg: SimConfig):
    """Draw latent paths and observations from the generative model.

    Returns ``(data, latents)``.  Missing realized measures are NaN; pairs
    outside ``pair_mask`` never produce realized correlations.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    T, p = cfg.n_days, cfg.n_assets
    th = cfg.params
    variant = cfg.variant
    pairs = corrmat.pair_indices(p)
    ii, jj = pairs[:, 0], pairs[:, 1]
    n_pairs = pairs.shape[0]
    free = np.ones(n_pairs, dtype=bool) if cfg.pair_mask is None else cfg.pair_mask.astype(bool)

    omega_full = th.omega_full()
    omega0 = stationary_init_cov(th.phi, omega_full)
    chol_omega = np.linalg.cholesky(omega_full)
    lam = th.lam if variant.has_leverage else None
    chol_psi = np.linalg.cholesky(th.psi) if variant.has_leverage else None

    h = np.zeros((T, p))
    g = np.zeros((T, n_pairs))
    m = np.zeros((T, p))
    y = np.zeros((T, p))
    w = np.full((T, n_pairs), np.nan)

    rw_mean = variant.mean is MeanKind.RANDOM_WALK
    h[0] = th.mu + np.linalg.cholesky(omega0) @ rng.standard_normal(p)
    g[0] = _init_fisher_path(rng, ii, jj, free, np.sqrt(cfg.kappa * th.sigma2_zeta), p)
    if rw_mean:
        m[0] = rng.standard_normal(p) * np.sqrt(cfg.kappa * th.sigma2_m)
    else:
        m[:] = cfg.const_mean_sd * rng.standard_normal(p)

    sd_step = np.sqrt(th.sigma2_zeta)
    for t in range(T):
        r_t = corrmat.assemble(g[t], p)
        s_t = corr_sqrt(r_t, variant.sqrt)
        eps = rng.standard_normal(p)
        y[t] = m[t] + np.exp(0.5 * h[t]) * (s_t @ eps)
        if t < T - 1:
            if variant.has_leverage:
                # y[t] - m[t] = V^{1/2} S eps, so the standardized shock is eps.
                q = lam.shape[1]
                drift = lam @ eps[:q]
                h[t + 1] = th.mu + th.phi * (h[t] - th.mu) + drift + chol_psi @ rng.standard_normal(p)
            else:
                h[t + 1] = th.mu + th.phi * (h[t] - th.mu) + chol_omega @ rng.standard_normal(p)
            g[t + 1] = _step_fisher_path(rng, g[t], ii, jj, free, sd_step, p)
            if rw_mean:
                m[t + 1] = m[t] + rng.standard_normal(p) * np.sqrt(th.sigma2_m)

    x = th.xi + h + rng.standard_normal((T, p)) * np.sqrt(th.sigma2_u)
    w[:, free] = th.delta[free] + g[:, free] + rng.standard_normal((T, free.sum())) * np.sqrt(th.sigma2_v[free])

    if cfg.missing_rate > 0.0:
        x[rng.random((T, p)) < cfg.missing_rate] = np.nan
        drop = rng.random((T, n_pairs)) < cfg.missing_rate
        w[drop] = np.nan

    data = Dataset(y=y, x=x, w=w, pair_mask=free.copy())
    latents = LatentPaths(log_var=h, fisher_corr=g, mean=m)
    return data, latents


def redraw_observations(
    rng: np.random.Generator,
    params: ModelParams,
    latents: LatentPaths,
    data: Dataset,
    variant: ModelVariant,
) -> Dataset:
    """Fresh observations given the latent paths, at the same missingness.

    Draws y from its conditional given all latents (which, with leverage,
    conditions on the next day's log variance), and x / w at the observed
    cells only.  This is the observation layer the sampler treats as data.
    """
    T, p = latents.log_var.shape
    shift, gamma = return_conditional_terms(params, latents, variant)
    y = np.empty((T, p))
    for t in range(T):
        y[t] = latents.mean[t] + shift[t] + np.linalg.cholesky(gamma[t]) @ rng.standard_normal(p)
    x = np.where(
        data.obs_x,
        params.xi + latents.log_var + rng.standard_normal((T, p)) * np.sqrt(params.sigma2_u),
        np.nan,
    )
    w = np.where(
        data.obs_w,
        params.delta + latents.fisher_corr + rng.standard_normal((T, latents.fisher_corr.shape[1])) * np.sqrt(params.sigma2_v),
        np.nan,
    )
    return Dataset(y=y, x=x, w=w, pair_mask=data.pair_mask.copy())


def simulate_intraday(
    rng: np.random.Generator,
    log_var: np.ndarray,
    fisher: np.ndarray,
    mean: np.ndarray,
    bins_per_day: int = 78,
) -> np.ndarray:
    """Intraday returns whose daily sum matches the daily distribution.

    Each day is split into ``bins_per_day`` iid normal return vectors with
    mean m_t / bins and covariance (V^{1/2} R_t V^{1/2}) / bins, so realized
    measures computed from the bins estimate the daily covariance.
    """
    T, p = log_var.shape
    out = np.empty((T, bins_per_day, p))
    for t in range(T):
        r_t = corrmat.assemble(fisher[t], p)
        s_t = corrmat.sqrt_cholesky(r_t)
        scale = np.exp(0.5 * log_var[t]) / np.sqrt(bins_per_day)
        eps = rng.standard_normal((bins_per_day, p))
        out[t] = mean[t] / bins_per_day + (eps @ s_t.T) * scale
    return out
