"""Metropolis-within-Gibbs posterior simulation.

One sweep updates, in order: the transformed-correlation path (single-site
MH), the log-variance path (single-site MH), the mean path (simulation
smoother), the persistence vector (truncated-MVN MH), the level parameters
(exact Gibbs), the variance parameters (exact Gibbs), and the volatility
innovation covariance — either omega directly (no leverage) or psi followed
by the loading matrix (leverage variants).  Blocks whose conditional is
non-Gaussian only through the initial-state factor |Omega_0|^{-1/2}
exp(-(h_1 - mu)' Omega_0^{-1} (h_1 - mu) / 2) propose from the remaining
conjugate form and accept with that factor's ratio, which keeps every block
exactly invariant for model.log_joint_posterior.

Every block takes and mutates a ChainState and returns an info dict carrying
its proposal moments (and, for the path blocks under ``freeze=True``, the
per-site log acceptance ratios without mutating anything) so correctness can
be audited against the joint density from outside.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, corrmat
from .distributions import (
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_matrix_normal,
    sample_truncated_mvn_box,
)
from .model import (
    Dataset,
    LatentPaths,
    LeverageKind,
    MeanKind,
    ModelParams,
    ModelVariant,
    Priors,
    SqrtKind,
    flatten_params,
    param_names,
    stationary_init_cov,
)

__all__ = [
    "ChainState",
    "DrawStore",
    "McmcConfig",
    "initialize_state",
    "run_mcmc",
    "sample_corr_block",
    "sample_h_block",
    "sample_m_block",
    "sample_phi",
    "sample_location_params",
    "sample_variances",
    "sample_omega",
    "sample_psi",
    "sample_lambda_full",
    "sample_lambda_parsimonious",
]


@dataclass
class ChainState:
    """Everything one chain carries between sweeps."""

    params: ModelParams
    latents: LatentPaths
    rng: np.random.Generator
    sweep: int = 0
    accept: dict = field(default_factory=dict)

    def copy(self) -> "ChainState":
        dup = ChainState(self.params.copy(), self.latents.copy(), self.rng, self.sweep)
        dup.accept = {k: list(v) if isinstance(v, list) else v for k, v in self.accept.items()}
        return dup

    def count(self, block: str, accepted: int, tried: int) -> None:
        acc, tot = self.accept.get(block, (0, 0))
        self.accept[block] = (acc + accepted, tot + tried)


@dataclass
class McmcConfig:
    n_burnin: int = 1000
    n_keep: int = 2000
    thin: int = 1
    seed: int = 0
    variant: ModelVariant = field(default_factory=ModelVariant)
    priors: Priors | None = None  # defaults per Priors.default when omitted
    store_paths: bool = False
    path_stride: int = 10  # keep every stride-th retained draw's full paths
    audit_pd: bool = False  # eigenvalue-check every R_t after every sweep
    pd_tol: float = 1e-10
    progress_every: int = 0  # stderr heartbeat; 0 silences it

    def validate(self) -> "McmcConfig":
        if self.n_keep < 1 or self.thin < 1 or self.n_burnin < 0:
            raise ValueError("need n_keep >= 1, thin >= 1, n_burnin >= 0")
        if self.path_stride < 1:
            raise ValueError("path_stride must be >= 1")
        return self


@dataclass
class DrawStore:
    """Retained posterior draws plus the chain-health numbers.

    ``params`` has one row per kept draw in :func:`model.flatten_params`
    order (``names`` labels the columns).  The time-T latent snapshots are
    what forecasting needs; full paths are stored only when asked, thinned
    by ``path_stride``.
    """

    names: list[str]
    params: np.ndarray
    log_var_last: np.ndarray
    fisher_last: np.ndarray
    mean_last: np.ndarray
    accept_rates: dict
    meta: dict
    shock_last: np.ndarray | None = None
    log_var_paths: np.ndarray | None = None
    fisher_paths: np.ndarray | None = None
    mean_paths: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.params.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}") from None
        return self.params[:, j]

    def block(self, prefix: str) -> np.ndarray:
        """All columns of one parameter, in flattening order."""
        cols = [j for j, n in enumerate(self.names) if n.split("[", 1)[0] == prefix]
        if not cols:
            raise KeyError(f"no parameter named {prefix!r}")
        return self.params[:, cols]


def _pair_arrays(p: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = corrmat.pair_indices(p)
    return np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])


def corr_factor_stacks(latents: LatentPaths, p: int, variant: ModelVariant):
    """(R_t, R_t^{1/2}, R_t^{-1/2}, log|R_t|) stacks for the current g path."""
    ii, jj = _pair_arrays(p)
    return _kernels.corr_factor_stack(
        np.ascontiguousarray(latents.fisher_corr), ii, jj, p, variant.sqrt is SqrtKind.SPECTRAL
    )


def shocks_from_stacks(latents: LatentPaths, y: np.ndarray, si_stack: np.ndarray) -> np.ndarray:
    """Standardized return shocks z_t given the inverse square-root stack."""
    e = np.exp(-0.5 * latents.log_var) * (y - latents.mean)
    return np.einsum("tij,tj->ti", si_stack, e)


def _leverage_pieces(params: ModelParams, p: int):
    """(lam, psi_inv, lam' psi_inv, lam' psi_inv lam) with contiguous layouts."""
    psi_inv = np.linalg.inv(params.psi)
    lam = np.ascontiguousarray(params.lam)
    lpsi = np.ascontiguousarray(lam.T @ psi_inv)
    gmat = np.ascontiguousarray(lpsi @ lam)
    return lam, psi_inv, lpsi, gmat


def _transition_residuals(params: ModelParams, latents: LatentPaths, shocks: np.ndarray | None):
    """h-innovations eta_t = h_{t+1} - mu - Phi (h_t - mu), minus the shock
    drift when leverage is active (shocks given)."""
    h = latents.log_var
    eta = h[1:] - params.mu - params.phi * (h[:-1] - params.mu)
    if shocks is not None:
        q = params.lam.shape[1]
        eta = eta - shocks[:-1, :q] @ params.lam.T
    return eta


def _log_init_factor(phi: np.ndarray, omega_full: np.ndarray, h0: np.ndarray, mu: np.ndarray) -> float:
    """log of |Omega_0|^{-1/2} exp(-(h_1-mu)' Omega_0^{-1} (h_1-mu)/2)."""
    omega0 = stationary_init_cov(phi, omega_full)
    L = np.linalg.cholesky(omega0)
    z = np.linalg.solve(L, h0 - mu)
    return -float(np.sum(np.log(np.diag(L)))) - 0.5 * float(z @ z)


# ---------------------------------------------------------------------------
# latent-path blocks
# ---------------------------------------------------------------------------


def sample_corr_block(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    freeze: bool = False,
) -> dict:
    """Single-site MH pass over the transformed-correlation path.

    Proposal: the random-walk/measurement Gaussian conditional truncated to
    the positive-definiteness interval of the entry; acceptance uses the
    returns likelihood (extended by the shock-drift terms under leverage).
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    ii, jj = _pair_arrays(p)
    leverage = variant.has_leverage
    if leverage:
        lam, _, lpsi, gmat = _leverage_pieces(th, p)
        eta_arr = np.ascontiguousarray(_transition_residuals(th, L, None))
    else:
        lpsi = np.zeros((1, p))
        gmat = np.zeros((1, 1))
        eta_arr = np.zeros((0, p))
    obs_w = data.obs_w
    w_fill = np.ascontiguousarray(np.where(obs_w, data.w, 0.0))
    e_arr = np.ascontiguousarray(np.exp(-0.5 * L.log_var) * (data.y - L.mean))
    free = np.ascontiguousarray(data.pair_mask, dtype=np.bool_)
    k = data.n_pairs
    shape = (T, k) if freeze else (1, 1)
    rec_logr = np.full(shape, np.nan)
    rec_cand = np.full(shape, np.nan)
    rec_mean = np.full(shape, np.nan)
    rec_sd = np.full(shape, np.nan)
    rec_lo = np.full(shape, np.nan)
    rec_hi = np.full(shape, np.nan)
    n_acc, n_try, n_skip = _kernels.g_sweep(
        state.rng,
        L.fisher_corr,
        ii,
        jj,
        free,
        w_fill,
        np.ascontiguousarray(obs_w),
        th.delta,
        th.sigma2_v,
        th.sigma2_zeta,
        priors.kappa,
        e_arr,
        eta_arr,
        lpsi,
        gmat,
        leverage,
        variant.sqrt is SqrtKind.SPECTRAL,
        freeze,
        rec_logr,
        rec_cand,
        rec_mean,
        rec_sd,
        rec_lo,
        rec_hi,
    )
    if not freeze:
        state.count("corr", n_acc, n_try)
        state.count("corr_skipped", n_skip, n_skip)
    info = {"accepted": n_acc, "tried": n_try, "skipped": n_skip}
    if freeze:
        info.update(
            log_ratio=rec_logr,
            candidate=rec_cand,
            prop_mean=rec_mean,
            prop_sd=rec_sd,
            prop_lo=rec_lo,
            prop_hi=rec_hi,
        )
    return info


def sample_h_block(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    si_stack: np.ndarray | None = None,
    freeze: bool = False,
) -> dict:
    """Single-site MH pass over the log-variance path.

    Proposal: the exact Gaussian formed by the state-transition and
    realized-variance terms (the returns term contributes only its linear
    part); acceptance uses the exact likelihood ratio.
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    if si_stack is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
    leverage = variant.has_leverage
    omega_full = th.omega_full()
    trans_prec = np.linalg.inv(omega_full if not leverage else th.psi)
    omega0_inv = np.linalg.inv(stationary_init_cov(th.phi, omega_full))
    if leverage:
        lam, psi_inv, _, _ = _leverage_pieces(th, p)
    else:
        lam = np.zeros((p, 1))
        psi_inv = trans_prec
    obs_x = data.obs_x
    x_fill = np.ascontiguousarray(np.where(obs_x, data.x, 0.0))
    rec_logr = np.full(T if freeze else 1, np.nan)
    rec_cand = np.full((T, p) if freeze else (1, 1), np.nan)
    rec_mean = np.full_like(rec_cand, np.nan)
    rec_prec = np.full((T, p, p) if freeze else (1, 1, 1), np.nan)
    n_acc = _kernels.h_sweep(
        state.rng,
        L.log_var,
        np.ascontiguousarray(si_stack),
        L.mean,
        data.y,
        x_fill,
        np.ascontiguousarray(obs_x),
        th.xi,
        th.sigma2_u,
        th.mu,
        th.phi,
        np.ascontiguousarray(trans_prec),
        np.ascontiguousarray(omega0_inv),
        lam,
        np.ascontiguousarray(psi_inv),
        leverage,
        freeze,
        rec_logr,
        rec_cand,
        rec_mean,
        rec_prec,
    )
    if not freeze:
        state.count("log_var", n_acc, T)
    info = {"accepted": n_acc, "tried": T}
    if freeze:
        info.update(log_ratio=rec_logr, candidate=rec_cand, prop_mean=rec_mean, prop_prec=rec_prec)
    return info


def return_conditional_terms(
    params: ModelParams,
    latents: LatentPaths,
    variant: ModelVariant,
    stacks=None,
):
    """Mean shift and covariance of y_t given the latent paths.

    Without leverage: shift 0, covariance V^{1/2} R_t V^{1/2}.  With
    leverage, conditioning on the next log variance adds the shift C_t eta_t
    and shrinks the covariance (t <= T-2; the last day has no successor).
    """
    T, p = latents.log_var.shape
    if stacks is None:
        stacks = corr_factor_stacks(latents, p, variant)
    r_stack, s_stack = stacks[0], stacks[1]
    sq = np.exp(0.5 * latents.log_var)
    shift = np.zeros((T, p))
    mid = r_stack.copy()
    if variant.has_leverage and T > 1:
        q = params.lam.shape[1]
        lam_pad = np.zeros((p, p))
        lam_pad[:, :q] = params.lam
        of_inv = np.linalg.inv(params.omega_full())
        eta = latents.log_var[1:] - params.mu - params.phi * (latents.log_var[:-1] - params.mu)
        sl = np.einsum("tij,kj->tik", s_stack[:-1], lam_pad)  # S_t lam_pad'
        mid[:-1] -= np.einsum("tik,kl,tjl->tij", sl, of_inv, sl)
        # C_t eta_t with C_t = V^{1/2} S_t lam_pad' of_inv
        shift[:-1] = sq[:-1] * np.einsum("tik,kl,tl->ti", sl, of_inv, eta)
    gamma = sq[:, :, None] * mid * sq[:, None, :]
    return shift, gamma


def mean_observation_terms(
    params: ModelParams,
    latents: LatentPaths,
    data: Dataset,
    variant: ModelVariant,
    stacks=None,
):
    """Pseudo-observations of the mean path and their covariances."""
    shift, gamma = return_conditional_terms(params, latents, variant, stacks)
    return data.y - shift, gamma


def sample_m_block(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    stacks=None,
) -> dict:
    """Exact Gibbs draw of the whole mean path (or the constant mean)."""
    th, L = state.params, state.latents
    T, p = data.y.shape
    yhat, gamma = mean_observation_terms(th, L, data, variant, stacks)
    if variant.mean is MeanKind.RANDOM_WALK:
        path, filt_m, filt_c, gains = _kernels.ffbs_mean_path(
            state.rng, np.ascontiguousarray(yhat), np.ascontiguousarray(gamma), th.sigma2_m, priors.kappa
        )
        L.mean[:] = path
        return {
            "obs_adj": yhat,
            "obs_cov": gamma,
            "filt_mean": filt_m,
            "filt_cov": filt_c,
            "gains": gains,
        }
    prec = np.eye(p) / priors.mean_const_var
    lin = np.zeros(p)
    for t in range(T):
        gi = np.linalg.inv(gamma[t])
        prec += gi
        lin += gi @ yhat[t]
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ lin
    draw = state.rng.multivariate_normal(mean, cov, method="cholesky")
    L.mean[:] = draw[None, :]
    return {"obs_adj": yhat, "obs_cov": gamma, "post_mean": mean, "post_cov": cov}


# ---------------------------------------------------------------------------
# parameter blocks
# ---------------------------------------------------------------------------


def sample_phi(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    shocks: np.ndarray | None = None,
) -> dict:
    """MH update of the persistence vector.

    Proposal: the Gaussian implied by the transition terms, truncated to the
    open unit box; acceptance uses the beta-prior and initial-state factors.
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    leverage = variant.has_leverage
    if leverage and shocks is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
        shocks = shocks_from_stacks(L, data.y, si_stack)
    omega_full = th.omega_full()
    trans_cov = th.psi if leverage else th.omega
    prec_mat = np.linalg.inv(trans_cov)
    a_beta, b_beta = priors.beta_a, priors.beta_b

    def log_k(phi_vec: np.ndarray) -> float:
        prior = float(
            np.sum((a_beta - 1.0) * np.log1p(phi_vec) + (b_beta - 1.0) * np.log1p(-phi_vec))
        )
        return prior + _log_init_factor(phi_vec, omega_full, L.log_var[0], th.mu)

    hc = L.log_var - th.mu
    fallback = False
    if T == 1:
        # no transition information: propose straight from the beta prior
        cand = 2.0 * state.rng.beta(a_beta, b_beta, size=p) - 1.0
        log_ratio = _log_init_factor(cand, omega_full, L.log_var[0], th.mu) - _log_init_factor(
            th.phi, omega_full, L.log_var[0], th.mu
        )
        prop_mean = np.zeros(p)
        prop_cov = np.full((p, p), np.nan)
    else:
        a_mat = hc[:-1].T @ hc[:-1]
        resid = L.log_var[1:] - th.mu
        if leverage:
            q = th.lam.shape[1]
            resid = resid - shocks[:-1, :q] @ th.lam.T
        b_vec = np.einsum("ta,ta->a", hc[:-1], resid @ prec_mat)
        prec = prec_mat * a_mat
        prop_cov = np.linalg.inv(prec)
        prop_cov = 0.5 * (prop_cov + prop_cov.T)
        prop_mean = prop_cov @ b_vec
        cand, fallback = sample_truncated_mvn_box(state.rng, prop_mean, prop_cov)
        log_ratio = log_k(cand) - log_k(th.phi) if not fallback else -np.inf
    accepted = False
    if not fallback and np.log(state.rng.random()) < log_ratio:
        th.phi = cand
        accepted = True
    state.count("persistence", int(accepted), 1)
    return {
        "accepted": accepted,
        "candidate": cand,
        "prop_mean": prop_mean,
        "prop_cov": prop_cov,
        "log_ratio": log_ratio,
        "proposal_fallback": fallback,
    }


def sample_location_params(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    shocks: np.ndarray | None = None,
) -> dict:
    """Exact Gibbs draws of the levels: mu, xi, delta."""
    th, L = state.params, state.latents
    T, p = data.y.shape
    leverage = variant.has_leverage
    if leverage and shocks is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
        shocks = shocks_from_stacks(L, data.y, si_stack)
    omega_full = th.omega_full()
    prec_mat = np.linalg.inv(th.psi if leverage else th.omega)
    omega0_inv = np.linalg.inv(stationary_init_cov(th.phi, omega_full))
    imphi = 1.0 - th.phi

    # mu: initial state + T-1 transitions + prior
    a_mat = np.diag(1.0 / priors.var_mu) + omega0_inv
    lin = priors.mean_mu / priors.var_mu + omega0_inv @ L.log_var[0]
    if T > 1:
        a_mat = a_mat + (T - 1) * (imphi[:, None] * prec_mat * imphi[None, :])
        resid = L.log_var[1:] - th.phi * L.log_var[:-1]
        if leverage:
            q = th.lam.shape[1]
            resid = resid - shocks[:-1, :q] @ th.lam.T
        lin = lin + imphi * (prec_mat @ resid.sum(axis=0))
    mu_cov = np.linalg.inv(a_mat)
    mu_cov = 0.5 * (mu_cov + mu_cov.T)
    mu_mean = mu_cov @ lin
    th.mu = state.rng.multivariate_normal(mu_mean, mu_cov, method="cholesky")

    # xi: per-asset normal from observed realized-variance residuals
    obs_x = data.obs_x
    n_x = obs_x.sum(axis=0)
    res_x = np.where(obs_x, data.x - L.log_var, 0.0).sum(axis=0)
    xi_prec = 1.0 / priors.var_xi + n_x / th.sigma2_u
    xi_mean = (priors.mean_xi / priors.var_xi + res_x / th.sigma2_u) / xi_prec
    th.xi = xi_mean + state.rng.standard_normal(p) / np.sqrt(xi_prec)

    # delta: per-pair normal from observed realized-correlation residuals
    obs_w = data.obs_w
    n_w = obs_w.sum(axis=0)
    res_w = np.where(obs_w, data.w - L.fisher_corr, 0.0).sum(axis=0)
    d_prec = 1.0 / priors.var_delta + n_w / th.sigma2_v
    d_mean = (priors.mean_delta / priors.var_delta + res_w / th.sigma2_v) / d_prec
    cand = d_mean + state.rng.standard_normal(data.n_pairs) / np.sqrt(d_prec)
    live = data.pair_mask
    th.delta = np.where(live, cand, th.delta)
    return {
        "mu_mean": mu_mean,
        "mu_cov": mu_cov,
        "xi_mean": xi_mean,
        "xi_var": 1.0 / xi_prec,
        "delta_mean": d_mean,
        "delta_var": 1.0 / d_prec,
    }


def sample_variances(state: ChainState, data: Dataset, priors: Priors, variant: ModelVariant) -> dict:
    """Exact inverse-gamma Gibbs draws of all scalar variances."""
    th, L = state.params, state.latents
    T, p = data.y.shape
    rng = state.rng
    info = {}

    obs_x = data.obs_x
    n_x = obs_x.sum(axis=0)
    ss = np.where(obs_x, data.x - th.xi - L.log_var, 0.0)
    ss_u = np.einsum("ti,ti->i", ss, ss)
    a_u, b_u = 0.5 * (priors.n_u + n_x), 0.5 * (priors.d_u + ss_u)
    th.sigma2_u = sample_inverse_gamma(rng, a_u, b_u)
    info["u_shape"], info["u_scale"] = a_u, b_u

    obs_w = data.obs_w
    n_w = obs_w.sum(axis=0)
    sw = np.where(obs_w, data.w - th.delta - L.fisher_corr, 0.0)
    ss_v = np.einsum("tk,tk->k", sw, sw)
    a_v, b_v = 0.5 * (priors.n_v + n_w), 0.5 * (priors.d_v + ss_v)
    live = data.pair_mask
    cand = sample_inverse_gamma(rng, a_v, b_v)
    th.sigma2_v = np.where(live, cand, th.sigma2_v)
    info["v_shape"], info["v_scale"] = a_v, b_v

    g = L.fisher_corr
    ss_z = g[0] ** 2 / priors.kappa
    if T > 1:
        ss_z = ss_z + np.sum(np.diff(g, axis=0) ** 2, axis=0)
    a_z, b_z = 0.5 * (priors.n_zeta + T), 0.5 * (priors.d_zeta + ss_z)
    cand = sample_inverse_gamma(rng, a_z, b_z)
    th.sigma2_zeta = np.where(live, cand, th.sigma2_zeta)
    info["zeta_shape"], info["zeta_scale"] = a_z, b_z

    if variant.mean is MeanKind.RANDOM_WALK:
        m = L.mean
        ss_m = m[0] ** 2 / priors.kappa
        if T > 1:
            ss_m = ss_m + np.sum(np.diff(m, axis=0) ** 2, axis=0)
        a_m, b_m = 0.5 * (priors.n_m + T), 0.5 * (priors.d_m + ss_m)
        th.sigma2_m = sample_inverse_gamma(rng, a_m, b_m)
        info["m_shape"], info["m_scale"] = a_m, b_m
    return info


def _posterior_scale_matrix(prior_scale: np.ndarray, resid: np.ndarray) -> np.ndarray:
    s_post = prior_scale + resid.T @ resid
    s_post = 0.5 * (s_post + s_post.T)
    try:
        np.linalg.cholesky(s_post)
    except np.linalg.LinAlgError:
        # numerically singular statistics: nudge onto the PD cone
        s_post = s_post + 1e-10 * np.eye(s_post.shape[0])
    return s_post


def sample_omega(state: ChainState, data: Dataset, priors: Priors, variant: ModelVariant) -> dict:
    """MH update of the innovation covariance (no-leverage variant).

    Proposal: the inverse Wishart from prior and transition terms; acceptance
    uses the initial-state factor ratio.
    """
    th, L = state.params, state.latents
    T = data.T
    resid = _transition_residuals(th, L, None)
    df = priors.nu_omega + T - 1
    s_post = _posterior_scale_matrix(priors.s_omega, resid)
    cand = sample_inverse_wishart(state.rng, df, s_post)
    h0, mu = L.log_var[0], th.mu
    log_ratio = _log_init_factor(th.phi, cand, h0, mu) - _log_init_factor(th.phi, th.omega, h0, mu)
    accepted = bool(np.log(state.rng.random()) < log_ratio)
    if accepted:
        th.omega = cand
    state.count("innovation_cov", int(accepted), 1)
    return {"accepted": accepted, "candidate": cand, "df": df, "scale": s_post, "log_ratio": log_ratio}


def sample_psi(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    shocks: np.ndarray | None = None,
) -> dict:
    """MH update of the shock covariance (leverage variants).

    Under full leverage the matrix-normal loading prior couples to psi and
    contributes its own cross-product term and +p degrees of freedom; the
    parsimonious loading prior is independent of psi, so neither appears.
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    if shocks is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
        shocks = shocks_from_stacks(L, data.y, si_stack)
    resid = _transition_residuals(th, L, shocks)
    df = priors.nu_psi + T - 1
    s_prior = priors.s_psi
    if variant.leverage is LeverageKind.FULL:
        dm = th.lam - priors.lam_mean
        s_prior = s_prior + dm @ np.linalg.solve(priors.lam_cov, dm.T)
        df += p
    s_post = _posterior_scale_matrix(s_prior, resid)
    cand = sample_inverse_wishart(state.rng, df, s_post)
    h0, mu = L.log_var[0], th.mu
    lam_outer = th.lam @ th.lam.T
    log_ratio = _log_init_factor(th.phi, cand + lam_outer, h0, mu) - _log_init_factor(
        th.phi, th.psi + lam_outer, h0, mu
    )
    accepted = bool(np.log(state.rng.random()) < log_ratio)
    if accepted:
        th.psi = cand
    state.count("shock_cov", int(accepted), 1)
    return {"accepted": accepted, "candidate": cand, "df": df, "scale": s_post, "log_ratio": log_ratio}


def sample_lambda_full(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    shocks: np.ndarray | None = None,
) -> dict:
    """Update of the full loading matrix.

    Proposal: the matrix-normal conditional from transitions and the
    conjugate prior (its mean solves the ridge regression of the
    h-innovations on the shocks); accepted with the initial-state factor
    ratio, which is the only part of the density outside that conjugacy.
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    if shocks is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
        shocks = shocks_from_stacks(L, data.y, si_stack)
    eta = _transition_residuals(th, L, None)
    z = shocks[:-1]
    a_mat = z.T @ z
    b_mat = z.T @ eta
    g0_inv = np.linalg.inv(priors.lam_cov)
    gamma1 = np.linalg.inv(a_mat + g0_inv)
    gamma1 = 0.5 * (gamma1 + gamma1.T)
    m1 = gamma1 @ (b_mat + g0_inv @ priors.lam_mean.T)  # posterior mean of lam'
    cand = sample_matrix_normal(state.rng, m1, gamma1, th.psi).T
    h0, mu = L.log_var[0], th.mu
    log_ratio = _log_init_factor(th.phi, th.psi + cand @ cand.T, h0, mu) - _log_init_factor(
        th.phi, th.psi + th.lam @ th.lam.T, h0, mu
    )
    accepted = bool(np.log(state.rng.random()) < log_ratio)
    if accepted:
        th.lam = cand
    state.count("loadings", int(accepted), 1)
    return {
        "accepted": accepted,
        "candidate": cand,
        "prop_mean": m1,
        "prop_row_cov": gamma1,
        "prop_col_cov": th.psi.copy(),
        "log_ratio": log_ratio,
    }


def sample_lambda_parsimonious(
    state: ChainState,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    shocks: np.ndarray | None = None,
) -> dict:
    """Update of the stacked active loading columns (first q shocks only).

    Proposal: the Gaussian conditional of the stacked vector; accepted with
    the initial-state factor ratio as in the full-loading update.
    """
    th, L = state.params, state.latents
    T, p = data.y.shape
    q = variant.n_factors
    if shocks is None:
        si_stack = corr_factor_stacks(L, p, variant)[2]
        shocks = shocks_from_stacks(L, data.y, si_stack)
    eta = _transition_residuals(th, L, None)
    zq = shocks[:-1, :q]
    psi_inv = np.linalg.inv(th.psi)
    a_q = zq.T @ zq
    g0_inv = np.linalg.inv(priors.lam_cov)
    prec = g0_inv + np.kron(a_q, psi_inv)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    lin = g0_inv @ priors.lam_mean + np.einsum("tj,ti->ji", zq, eta @ psi_inv).reshape(-1)
    mean = cov @ lin
    stacked = state.rng.multivariate_normal(mean, cov, method="cholesky")
    cand = stacked.reshape((p, q), order="F")
    h0, mu = L.log_var[0], th.mu
    log_ratio = _log_init_factor(th.phi, th.psi + cand @ cand.T, h0, mu) - _log_init_factor(
        th.phi, th.psi + th.lam @ th.lam.T, h0, mu
    )
    accepted = bool(np.log(state.rng.random()) < log_ratio)
    if accepted:
        th.lam = cand
    state.count("loadings", int(accepted), 1)
    return {
        "accepted": accepted,
        "candidate": cand,
        "prop_mean": mean,
        "prop_cov": cov,
        "log_ratio": log_ratio,
    }


# ---------------------------------------------------------------------------
# initialization and the driver
# ---------------------------------------------------------------------------


def _smooth(series: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with edge reflection."""
    n = series.shape[0]
    win = max(1, min(window, n))
    if win == 1:
        return series.copy()
    pad = win // 2
    padded = np.concatenate([series[pad:0:-1], series, series[-2 : -2 - pad : -1]])
    kernel = np.full(win, 1.0 / win)
    out = np.convolve(padded, kernel, mode="same")[pad : pad + n]
    return out


def initialize_state(
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
    rng: np.random.Generator,
    smoothing_window: int = 15,
) -> ChainState:
    """Data-driven starting point.

    Log variances start at smoothed log realized variance (log squared
    returns where missing); correlations start from smoothed transformed
    realized correlations pushed inside the positive-definiteness bounds
    pair by pair starting from the identity matrix; the mean path starts at
    zero; variances come from the method of moments on the differenced
    starting paths.
    """
    T, p = data.y.shape
    k = data.n_pairs
    obs_x, obs_w = data.obs_x, data.obs_w

    proxy = np.log(data.y**2 + 1e-8)
    x_filled = np.where(obs_x, data.x, proxy)
    h0 = np.column_stack([_smooth(x_filled[:, i], smoothing_window) for i in range(p)])

    w_filled = np.where(obs_w, data.w, 0.0)
    g_target = np.column_stack([_smooth(w_filled[:, j], smoothing_window) for j in range(k)])
    pairs = corrmat.pair_indices(p)
    g0 = np.zeros((T, k))
    margin = 0.05
    for t in range(T):
        R = np.eye(p)
        for j in range(k):
            if not data.pair_mask[j]:
                continue
            i_a, i_b = int(pairs[j, 0]), int(pairs[j, 1])
            lo, hi = corrmat.entry_bounds(R, i_a, i_b)
            width = hi - lo
            if width <= 1e-6:
                rho = 0.5 * (lo + hi)
            else:
                rho = float(np.clip(np.tanh(0.5 * g_target[t, j]), lo + margin * width, hi - margin * width))
            R[i_a, i_b] = R[i_b, i_a] = rho
            g0[t, j] = corrmat.fisher(rho)

    latents = LatentPaths(log_var=h0, fisher_corr=g0, mean=np.zeros((T, p)))

    phi = np.full(p, 0.9)
    mu = h0.mean(axis=0)
    xi_resid = np.where(obs_x, data.x - h0, np.nan)
    xi = np.where(obs_x.any(axis=0), np.nanmean(xi_resid, axis=0), 0.0)
    s2_u = np.where(
        obs_x.sum(axis=0) > 1, np.nanvar(xi_resid, axis=0), 0.25
    )
    d_resid = np.where(obs_w, data.w - g0, np.nan)
    delta = np.where(obs_w.any(axis=0), np.nanmean(d_resid, axis=0), 0.0)
    s2_v = np.where(obs_w.sum(axis=0) > 1, np.nanvar(d_resid, axis=0), 0.25)
    if T > 1:
        s2_zeta = np.var(np.diff(g0, axis=0), axis=0)
        h_innov = h0[1:] - mu - phi * (h0[:-1] - mu)
        omega = np.cov(h_innov.T).reshape(p, p) if T > 2 else np.eye(p)
    else:
        s2_zeta = np.full(k, 0.01)
        omega = np.eye(p)
    omega = 0.5 * (omega + omega.T) + 1e-3 * np.eye(p)
    s2_u = np.clip(np.nan_to_num(s2_u, nan=0.25), 1e-4, None)
    s2_v = np.clip(np.nan_to_num(s2_v, nan=0.25), 1e-4, None)
    s2_zeta = np.clip(s2_zeta, 1e-4, None)

    params = ModelParams(
        phi=phi,
        mu=mu,
        xi=np.nan_to_num(xi),
        delta=np.nan_to_num(delta),
        sigma2_u=s2_u,
        sigma2_v=s2_v,
        sigma2_zeta=s2_zeta,
    )
    if variant.mean is MeanKind.RANDOM_WALK:
        params.sigma2_m = np.full(p, 1e-4)
    if variant.has_leverage:
        params.psi = omega
        params.lam = np.zeros((p, variant.loading_cols(p)))
    else:
        params.omega = omega
    params.validate(p, k, variant)
    return ChainState(params=params, latents=latents, rng=rng)


def _audit_pd(latents: LatentPaths, p: int, tol: float, sweep: int) -> None:
    for t in range(latents.fisher_corr.shape[0]):
        R = corrmat.assemble(latents.fisher_corr[t], p)
        if not corrmat.is_positive_definite(R, tol):
            raise RuntimeError(f"correlation matrix lost positive definiteness at sweep {sweep}, t={t}")


def gibbs_sweep(state: ChainState, data: Dataset, priors: Priors, variant: ModelVariant) -> np.ndarray:
    """One full scan over every block, in the fixed update order.

    Mutates ``state`` in place and returns the standardized return shocks
    consistent with the latents the scan leaves behind (the array the
    leverage blocks conditioned on and the day-T snapshot forecasting
    needs).
    """
    p = data.y.shape[1]
    sample_corr_block(state, data, priors, variant)
    stacks = corr_factor_stacks(state.latents, p, variant)
    sample_h_block(state, data, priors, variant, si_stack=stacks[2])
    sample_m_block(state, data, priors, variant, stacks=stacks)
    shocks = shocks_from_stacks(state.latents, data.y, stacks[2])
    sample_phi(state, data, priors, variant, shocks=shocks)
    sample_location_params(state, data, priors, variant, shocks=shocks)
    sample_variances(state, data, priors, variant)
    if variant.has_leverage:
        sample_psi(state, data, priors, variant, shocks=shocks)
        if variant.leverage is LeverageKind.FULL:
            sample_lambda_full(state, data, priors, variant, shocks=shocks)
        else:
            sample_lambda_parsimonious(state, data, priors, variant, shocks=shocks)
    else:
        sample_omega(state, data, priors, variant)
    return shocks


def run_mcmc(data: Dataset, cfg: McmcConfig, init: ChainState | None = None) -> DrawStore:
    """Run one chain and collect retained draws.

    ``init`` warm-starts the chain (rolling re-estimation hands the previous
    window's posterior means back in); otherwise the data-driven initializer
    is used.  Deterministic given cfg.seed.
    """
    cfg.validate()
    data.validate()
    T, p = data.y.shape
    k = data.n_pairs
    variant = cfg.variant
    priors = cfg.priors if cfg.priors is not None else Priors.default(p, variant)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        state = initialize_state(data, priors, variant, rng)
    else:
        state = ChainState(init.params.copy(), init.latents.copy(), rng)
        state.params.validate(p, k, variant)

    names = param_names(p, variant)
    n_param = len(names)
    kept_params = np.empty((cfg.n_keep, n_param))
    h_last = np.empty((cfg.n_keep, p))
    g_last = np.empty((cfg.n_keep, k))
    m_last = np.empty((cfg.n_keep, p))
    z_last = np.empty((cfg.n_keep, p))
    n_paths = (cfg.n_keep + cfg.path_stride - 1) // cfg.path_stride if cfg.store_paths else 0
    h_paths = np.empty((n_paths, T, p)) if cfg.store_paths else None
    g_paths = np.empty((n_paths, T, k)) if cfg.store_paths else None
    m_paths = np.empty((n_paths, T, p)) if cfg.store_paths else None

    total = cfg.n_burnin + cfg.n_keep * cfg.thin
    kept = 0
    t_start = time.perf_counter()
    for sweep in range(total):
        state.sweep = sweep
        shocks = gibbs_sweep(state, data, priors, variant)
        _check_finite_state(state, sweep)
        if cfg.audit_pd:
            _audit_pd(state.latents, p, cfg.pd_tol, sweep)

        past_burn = sweep - cfg.n_burnin
        if past_burn >= 0 and (past_burn + 1) % cfg.thin == 0:
            kept_params[kept] = flatten_params(state.params, variant)
            h_last[kept] = state.latents.log_var[-1]
            g_last[kept] = state.latents.fisher_corr[-1]
            m_last[kept] = state.latents.mean[-1]
            z_last[kept] = shocks[-1]
            if cfg.store_paths and kept % cfg.path_stride == 0:
                idx = kept // cfg.path_stride
                h_paths[idx] = state.latents.log_var
                g_paths[idx] = state.latents.fisher_corr
                m_paths[idx] = state.latents.mean
            kept += 1
        if cfg.progress_every and (sweep + 1) % cfg.progress_every == 0:
            el = time.perf_counter() - t_start
            print(f"sweep {sweep + 1}/{total} kept {kept} elapsed {el:.1f}s", file=sys.stderr)

    rates = {}
    for key, (acc, tot) in state.accept.items():
        if key.endswith("_skipped"):
            rates[key] = float(acc)
        else:
            rates[key] = acc / tot if tot else float("nan")
    meta = {
        "variant": variant.label(),
        "sqrt": variant.sqrt.value,
        "mean": variant.mean.value,
        "seed": cfg.seed,
        "T": T,
        "p": p,
        "n_pairs": k,
        "n_burnin": cfg.n_burnin,
        "n_keep": cfg.n_keep,
        "thin": cfg.thin,
        "runtime_s": time.perf_counter() - t_start,
    }
    return DrawStore(
        names=names,
        params=kept_params,
        log_var_last=h_last,
        fisher_last=g_last,
        mean_last=m_last,
        accept_rates=rates,
        meta=meta,
        shock_last=z_last,
        log_var_paths=h_paths,
        fisher_paths=g_paths,
        mean_paths=m_paths,
    )


def _check_finite_state(state: ChainState, sweep: int) -> None:
    th, L = state.params, state.latents
    arrays = [L.log_var, L.fisher_corr, L.mean, th.phi, th.mu, th.xi, th.delta,
              th.sigma2_u, th.sigma2_v, th.sigma2_zeta]
    for a in (th.sigma2_m, th.omega, th.psi, th.lam):
        if a is not None:
            arrays.append(a)
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise RuntimeError(
                f"non-finite state at sweep {sweep}; dump: phi={th.phi}, mu={th.mu}, "
                f"h range=({np.nanmin(L.log_var)}, {np.nanmax(L.log_var)})"
            )
