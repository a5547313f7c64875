"""Model containers and the exact log joint posterior.

The model: daily returns y_t are conditionally Gaussian with mean m_t and
covariance V_t^{1/2} R_t V_t^{1/2}, where V_t = diag(exp(h_t)).  Log
variances h follow a stationary VAR(1) with diagonal persistence, the mean
path m and the pairwise Fisher correlation coordinates follow random walks,
and realized measures observe h (log realized variance, per asset) and the
Fisher coordinates (Fisher realized correlation, per pair) with Gaussian
noise.  The leverage variants couple the volatility innovation to the
standardized return shock z_t = R_t^{-1/2} V_t^{-1/2} (y_t - m_t) through a
loading matrix with either p or q < p active columns.

``log_joint_posterior`` is the reference density every Metropolis block is
tested against; it is written for clarity, not speed.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import betaln, gammaln, multigammaln

from mrsv import corrmat
from mrsv.distributions import sample_inverse_gamma, sample_inverse_wishart

LOG_2PI = np.log(2.0 * np.pi)


class LeverageKind(enum.Enum):
    NONE = "none"
    FULL = "full"
    PARSIMONIOUS = "pars"


class SqrtKind(enum.Enum):
    SPECTRAL = "spectral"
    CHOLESKY = "cholesky"


class MeanKind(enum.Enum):
    RANDOM_WALK = "rw"
    CONSTANT = "const"


@dataclass(frozen=True)
class ModelVariant:
    """Which model is being estimated: leverage form, matrix square root, mean dynamics."""

    leverage: LeverageKind = LeverageKind.NONE
    n_factors: int = 0  # active loading columns; only for PARSIMONIOUS
    sqrt: SqrtKind = SqrtKind.SPECTRAL
    mean: MeanKind = MeanKind.RANDOM_WALK

    def __post_init__(self):
        if self.leverage is LeverageKind.PARSIMONIOUS and self.n_factors < 1:
            raise ValueError("parsimonious leverage needs n_factors >= 1")
        if self.leverage is not LeverageKind.PARSIMONIOUS and self.n_factors != 0:
            raise ValueError("n_factors only applies to parsimonious leverage")

    @property
    def has_leverage(self) -> bool:
        return self.leverage is not LeverageKind.NONE

    def loading_cols(self, p: int) -> int:
        if self.leverage is LeverageKind.NONE:
            return 0
        if self.leverage is LeverageKind.FULL:
            return p
        return self.n_factors

    @classmethod
    def parse(cls, leverage: str = "none", sqrt: str = "spectral", mean: str = "rw") -> "ModelVariant":
        """Parse CLI-style variant strings: leverage is 'none', 'full' or 'pars:q'."""
        leverage = leverage.strip().lower()
        if leverage == "none":
            kind, q = LeverageKind.NONE, 0
        elif leverage == "full":
            kind, q = LeverageKind.FULL, 0
        elif leverage.startswith("pars:"):
            kind, q = LeverageKind.PARSIMONIOUS, int(leverage.split(":", 1)[1])
        else:
            raise ValueError(f"unknown leverage variant {leverage!r}")
        return cls(kind, q, SqrtKind(sqrt.strip().lower()), MeanKind(mean.strip().lower()))

    def label(self) -> str:
        if self.leverage is LeverageKind.PARSIMONIOUS:
            return f"pars:{self.n_factors}"
        return self.leverage.value


@dataclass
class ModelParams:
    """Static parameters.  Shapes: per-asset (p,), per-pair (p(p-1)/2,).

    Exactly one of ``omega`` (no leverage) or ``psi`` + ``lam`` (leverage) is
    set; ``lam`` has p columns under full leverage and q under parsimonious.
    ``sigma2_m`` is None when the mean is constant.
    """

    phi: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    delta: np.ndarray
    sigma2_u: np.ndarray
    sigma2_v: np.ndarray
    sigma2_zeta: np.ndarray
    sigma2_m: np.ndarray | None = None
    omega: np.ndarray | None = None
    psi: np.ndarray | None = None
    lam: np.ndarray | None = None

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    def omega_full(self) -> np.ndarray:
        """Volatility-innovation covariance: omega, or psi + lam lam' under leverage."""
        if self.omega is not None:
            return self.omega
        return self.psi + self.lam @ self.lam.T

    def copy(self) -> "ModelParams":
        def c(a):
            return None if a is None else np.array(a, copy=True)

        return ModelParams(*(c(getattr(self, f)) for f in _PARAM_FIELDS))

    def validate(self, p: int, n_pairs: int, variant: ModelVariant) -> None:
        if self.phi.shape != (p,) or self.mu.shape != (p,) or self.xi.shape != (p,):
            raise ValueError("per-asset parameter shape mismatch")
        if self.delta.shape != (n_pairs,) or self.sigma2_v.shape != (n_pairs,) or self.sigma2_zeta.shape != (n_pairs,):
            raise ValueError("per-pair parameter shape mismatch")
        if np.any(np.abs(self.phi) >= 1.0):
            raise ValueError("persistence outside (-1, 1)")
        for name in ("sigma2_u", "sigma2_v", "sigma2_zeta"):
            a = getattr(self, name)
            if np.any(a <= 0.0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be positive and finite")
        if variant.mean is MeanKind.RANDOM_WALK:
            if self.sigma2_m is None or np.any(self.sigma2_m <= 0.0):
                raise ValueError("sigma2_m must be positive under a random-walk mean")
        if variant.has_leverage:
            if self.psi is None or self.lam is None or self.omega is not None:
                raise ValueError("leverage variants carry psi and lam, not omega")
            if self.lam.shape != (p, variant.loading_cols(p)):
                raise ValueError("loading matrix shape mismatch")
        elif self.omega is None or self.psi is not None or self.lam is not None:
            raise ValueError("the no-leverage variant carries omega only")


_PARAM_FIELDS = (
    "phi",
    "mu",
    "xi",
    "delta",
    "sigma2_u",
    "sigma2_v",
    "sigma2_zeta",
    "sigma2_m",
    "omega",
    "psi",
    "lam",
)


@dataclass
class LatentPaths:
    """Latent state paths: log variances (T, p), Fisher correlations (T, n_pairs), means (T, p).

    Fixed-zero pairs hold exact zeros for all t.  Under a constant mean every
    row of ``mean`` is the same vector.
    """

    log_var: np.ndarray
    fisher_corr: np.ndarray
    mean: np.ndarray

    def copy(self) -> "LatentPaths":
        return LatentPaths(self.log_var.copy(), self.fisher_corr.copy(), self.mean.copy())


@dataclass
class Priors:
    """Prior hyperparameters.

    Inverse-gamma priors are IG(n/2, d/2) in (shape, scale) form; the
    persistence prior is Beta(a, b) on (1 + phi)/2 per asset.  ``lam_mean``
    / ``lam_cov`` are the loading prior: under full leverage a p x p mean
    matrix with column covariance ``lam_cov`` (p x p) and row covariance psi;
    under parsimonious leverage the mean (p q,) and covariance (p q, p q) of
    the stacked active columns.
    """

    mean_mu: np.ndarray
    var_mu: np.ndarray
    mean_xi: np.ndarray
    var_xi: np.ndarray
    mean_delta: np.ndarray
    var_delta: np.ndarray
    n_u: float
    d_u: float
    n_v: float
    d_v: float
    n_zeta: float
    d_zeta: float
    n_m: float
    d_m: float
    beta_a: float
    beta_b: float
    nu_omega: float = 10.0
    s_omega: np.ndarray | None = None
    nu_psi: float = 10.0
    s_psi: np.ndarray | None = None
    lam_mean: np.ndarray | None = None
    lam_cov: np.ndarray | None = None
    kappa: float = 100.0
    mean_const_var: float = 1e4

    @classmethod
    def default(cls, p: int, variant: ModelVariant) -> "Priors":
        k = corrmat.n_pairs(p)
        q = variant.loading_cols(p)
        if variant.leverage is LeverageKind.FULL:
            lam_mean, lam_cov = np.zeros((p, p)), 1e4 * np.eye(p)
        elif variant.leverage is LeverageKind.PARSIMONIOUS:
            lam_mean, lam_cov = np.zeros(p * q), 1e4 * np.eye(p * q)
        else:
            lam_mean = lam_cov = None
        return cls(
            mean_mu=np.zeros(p),
            var_mu=np.full(p, 1e4),
            mean_xi=np.zeros(p),
            var_xi=np.full(p, 1e4),
            mean_delta=np.zeros(k),
            var_delta=np.full(k, 1e4),
            n_u=1e-5,
            d_u=1e-5,
            n_v=1e-5,
            d_v=1e-5,
            n_zeta=1e-6,
            d_zeta=1e-6,
            n_m=1e-5,
            d_m=1e-5,
            beta_a=1.0,
            beta_b=1.0,
            s_omega=np.eye(p),
            s_psi=np.eye(p),
            lam_mean=lam_mean,
            lam_cov=lam_cov,
        )


@dataclass
class Dataset:
    """Observed data: returns (complete), log realized variances and Fisher
    realized correlations (either may have missing cells, stored as NaN).

    ``pair_mask`` flags pairs whose correlation is free; fixed-zero pairs are
    excluded from the model entirely and their w columns are forced missing.
    """

    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    pair_mask: np.ndarray | None = None
    dates: np.ndarray | None = None
    assets: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.pair_mask is None:
            self.pair_mask = np.ones(corrmat.n_pairs(self.p), dtype=bool)
        else:
            self.pair_mask = np.asarray(self.pair_mask, dtype=bool)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def n_pairs(self) -> int:
        return corrmat.n_pairs(self.p)

    @property
    def obs_x(self) -> np.ndarray:
        return ~np.isnan(self.x)

    @property
    def obs_w(self) -> np.ndarray:
        return ~np.isnan(self.w) & self.pair_mask[None, :]

    def validate(self) -> "Dataset":
        if self.y.ndim != 2:
            raise ValueError("returns must be a (T, p) matrix")
        T, p = self.y.shape
        if p < 1 or T < 2:
            raise ValueError("need at least two days and one asset")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("returns must be complete and finite")
        if self.x.shape != (T, p):
            raise ValueError("log realized variance shape mismatch")
        k = corrmat.n_pairs(p)
        if self.w.shape != (T, k):
            raise ValueError("Fisher realized correlation shape mismatch")
        if self.pair_mask.shape != (k,):
            raise ValueError("pair mask shape mismatch")
        for a, name in ((self.x, "log realized variance"), (self.w, "Fisher realized correlation")):
            bad = np.isinf(a)
            if np.any(bad):
                raise ValueError(f"{name} contains non-finite observed values")
        dead = ~self.pair_mask
        if np.any(dead) and np.any(~np.isnan(self.w[:, dead])):
            warnings.warn("correlation data present for fixed-zero pairs; treated as missing")
            self.w[:, dead] = np.nan
        return self

    def window(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            self.y[start:stop].copy(),
            self.x[start:stop].copy(),
            self.w[start:stop].copy(),
            self.pair_mask.copy(),
            None if self.dates is None else self.dates[start:stop].copy(),
            self.assets,
        )


def stationary_init_cov(phi: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Stationary covariance of the volatility VAR(1): entry (i, j) is omega_ij / (1 - phi_i phi_j)."""
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(np.abs(phi) >= 1.0):
        raise ValueError("persistence outside (-1, 1) has no stationary law")
    return omega / (1.0 - np.outer(phi, phi))


def leverage_drift(lam: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Volatility drift contributed by return shocks: the loading acts on the
    first q shock components (remaining columns are structurally zero)."""
    return lam @ z[: lam.shape[1]]


def corr_sqrt(R: np.ndarray, kind: SqrtKind) -> np.ndarray:
    """Matrix square root used to standardize return shocks."""
    if kind is SqrtKind.SPECTRAL:
        return corrmat.sqrt_spectral(R)
    return corrmat.sqrt_cholesky(R)


def standardized_shocks(params: ModelParams, latents: LatentPaths, y: np.ndarray, kind: SqrtKind) -> np.ndarray:
    """z_t = R_t^{-1/2} V_t^{-1/2} (y_t - m_t) for every t; reference implementation."""
    T, p = y.shape
    z = np.empty((T, p))
    for t in range(T):
        R = corrmat.assemble(latents.fisher_corr[t], p)
        S = corr_sqrt(R, kind)
        e = np.exp(-0.5 * latents.log_var[t]) * (y[t] - latents.mean[t])
        z[t] = sla.solve_triangular(S, e, lower=True) if kind is SqrtKind.CHOLESKY else np.linalg.solve(S, e)
    return z


def _mvn_logpdf(x, mean, cov):
    L = np.linalg.cholesky(cov)
    z = sla.solve_triangular(L, x - mean, lower=True)
    return -0.5 * x.shape[0] * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * z @ z


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _invgamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _invwishart_logpdf(X, df, S):
    p = X.shape[0]
    _, ld_s = np.linalg.slogdet(S)
    _, ld_x = np.linalg.slogdet(X)
    return (
        0.5 * df * ld_s
        - 0.5 * df * p * np.log(2.0)
        - multigammaln(0.5 * df, p)
        - 0.5 * (df + p + 1.0) * ld_x
        - 0.5 * np.trace(S @ np.linalg.inv(X))
    )


def log_joint_posterior(
    params: ModelParams,
    latents: LatentPaths,
    data: Dataset,
    priors: Priors,
    variant: ModelVariant,
) -> float:
    """Exact log of the joint posterior density (all constants included).

    This is the density the sampler blocks target; Metropolis acceptance
    ratios are validated against differences of this function.
    """
    T, p = data.y.shape
    th, L = params, latents
    free = data.pair_mask
    lp = 0.0

    omega_full = th.omega_full()
    omega0 = stationary_init_cov(th.phi, omega_full)
    sq = np.exp(0.5 * L.log_var)

    # returns given latent state
    for t in range(T):
        R = corrmat.assemble(L.fisher_corr[t], p)
        cov = sq[t][:, None] * R * sq[t][None, :]
        lp += _mvn_logpdf(data.y[t], L.mean[t], cov)

    # volatility chain
    lp += _mvn_logpdf(L.log_var[0], th.mu, omega0)
    if variant.has_leverage:
        z = standardized_shocks(th, L, data.y, variant.sqrt)
        for t in range(T - 1):
            mean = th.mu + th.phi * (L.log_var[t] - th.mu) + leverage_drift(th.lam, z[t])
            lp += _mvn_logpdf(L.log_var[t + 1], mean, th.psi)
    else:
        for t in range(T - 1):
            mean = th.mu + th.phi * (L.log_var[t] - th.mu)
            lp += _mvn_logpdf(L.log_var[t + 1], mean, th.omega)

    # realized variance measurement
    obs = data.obs_x
    res = np.where(obs, data.x - th.xi[None, :] - L.log_var, 0.0)
    for i in range(p):
        n_i = obs[:, i].sum()
        lp += -0.5 * n_i * (LOG_2PI + np.log(th.sigma2_u[i])) - 0.5 * np.sum(res[:, i] ** 2) / th.sigma2_u[i]

    # realized correlation measurement and Fisher random walks (free pairs only)
    obs_w = data.obs_w
    res_w = np.where(obs_w, data.w - th.delta[None, :] - L.fisher_corr, 0.0)
    for k in np.flatnonzero(free):
        n_k = obs_w[:, k].sum()
        lp += -0.5 * n_k * (LOG_2PI + np.log(th.sigma2_v[k])) - 0.5 * np.sum(res_w[:, k] ** 2) / th.sigma2_v[k]
        g = L.fisher_corr[:, k]
        lp += _norm_logpdf(g[0], 0.0, priors.kappa * th.sigma2_zeta[k])
        lp += np.sum(_norm_logpdf(g[1:], g[:-1], th.sigma2_zeta[k]))

    # mean path
    if variant.mean is MeanKind.RANDOM_WALK:
        for i in range(p):
            m = L.mean[:, i]
            lp += _norm_logpdf(m[0], 0.0, priors.kappa * th.sigma2_m[i])
            lp += np.sum(_norm_logpdf(m[1:], m[:-1], th.sigma2_m[i]))
    else:
        lp += np.sum(_norm_logpdf(L.mean[0], 0.0, priors.mean_const_var))

    # parameter priors
    lp += np.sum(_norm_logpdf(th.mu, priors.mean_mu, priors.var_mu))
    lp += np.sum(_norm_logpdf(th.xi, priors.mean_xi, priors.var_xi))
    lp += np.sum(_norm_logpdf(th.delta, priors.mean_delta, priors.var_delta))
    a, b = priors.beta_a, priors.beta_b
    lp += np.sum(
        (a - 1.0) * np.log(0.5 * (1.0 + th.phi))
        + (b - 1.0) * np.log(0.5 * (1.0 - th.phi))
        - betaln(a, b)
        - np.log(2.0)
    )
    lp += np.sum(_invgamma_logpdf(th.sigma2_u, 0.5 * priors.n_u, 0.5 * priors.d_u))
    lp += np.sum(_invgamma_logpdf(th.sigma2_v, 0.5 * priors.n_v, 0.5 * priors.d_v))
    lp += np.sum(_invgamma_logpdf(th.sigma2_zeta, 0.5 * priors.n_zeta, 0.5 * priors.d_zeta))
    if variant.mean is MeanKind.RANDOM_WALK:
        lp += np.sum(_invgamma_logpdf(th.sigma2_m, 0.5 * priors.n_m, 0.5 * priors.d_m))

    if variant.has_leverage:
        lp += _invwishart_logpdf(th.psi, priors.nu_psi, priors.s_psi)
        if variant.leverage is LeverageKind.FULL:
            dm = th.lam - priors.lam_mean
            g0inv = np.linalg.inv(priors.lam_cov)
            psi_inv = np.linalg.inv(th.psi)
            _, ld_psi = np.linalg.slogdet(th.psi)
            _, ld_g0 = np.linalg.slogdet(priors.lam_cov)
            lp += -0.5 * p * p * LOG_2PI - 0.5 * p * ld_psi - 0.5 * p * ld_g0
            lp += -0.5 * np.trace(psi_inv @ dm @ g0inv @ dm.T)
        else:
            stacked = th.lam.flatten(order="F")
            lp += _mvn_logpdf(stacked, priors.lam_mean, priors.lam_cov)
    else:
        lp += _invwishart_logpdf(th.omega, priors.nu_omega, priors.s_omega)

    return float(lp)


def sample_params_from_priors(rng, p: int, priors: Priors, variant: ModelVariant) -> ModelParams:
    """Independent draw of every static parameter from its prior."""
    k = corrmat.n_pairs(p)
    phi = 2.0 * rng.beta(priors.beta_a, priors.beta_b, size=p) - 1.0
    params = ModelParams(
        phi=phi,
        mu=priors.mean_mu + np.sqrt(priors.var_mu) * rng.standard_normal(p),
        xi=priors.mean_xi + np.sqrt(priors.var_xi) * rng.standard_normal(p),
        delta=priors.mean_delta + np.sqrt(priors.var_delta) * rng.standard_normal(k),
        sigma2_u=sample_inverse_gamma(rng, 0.5 * priors.n_u, 0.5 * priors.d_u, size=p),
        sigma2_v=sample_inverse_gamma(rng, 0.5 * priors.n_v, 0.5 * priors.d_v, size=k),
        sigma2_zeta=sample_inverse_gamma(rng, 0.5 * priors.n_zeta, 0.5 * priors.d_zeta, size=k),
    )
    if variant.mean is MeanKind.RANDOM_WALK:
        params.sigma2_m = sample_inverse_gamma(rng, 0.5 * priors.n_m, 0.5 * priors.d_m, size=p)
    if variant.has_leverage:
        params.psi = sample_inverse_wishart(rng, priors.nu_psi, priors.s_psi)
        q = variant.loading_cols(p)
        if variant.leverage is LeverageKind.FULL:
            lr = np.linalg.cholesky(params.psi)
            lc = np.linalg.cholesky(priors.lam_cov)
            params.lam = priors.lam_mean + lr @ rng.standard_normal((p, p)) @ lc.T
        else:
            lc = np.linalg.cholesky(priors.lam_cov)
            stacked = priors.lam_mean + lc @ rng.standard_normal(p * q)
            params.lam = stacked.reshape((p, q), order="F")
    else:
        params.omega = sample_inverse_wishart(rng, priors.nu_omega, priors.s_omega)
    return params


def param_layout(p: int, variant: ModelVariant) -> list[tuple[str, int]]:
    """Ordered (name, length) pairs for flattening parameters into a draw row."""
    k = corrmat.n_pairs(p)
    out = [
        ("phi", p),
        ("mu", p),
        ("xi", p),
        ("delta", k),
        ("sigma2_u", p),
        ("sigma2_v", k),
        ("sigma2_zeta", k),
    ]
    if variant.mean is MeanKind.RANDOM_WALK:
        out.append(("sigma2_m", p))
    if variant.has_leverage:
        out.append(("psi", p * p))
        out.append(("lam", p * variant.loading_cols(p)))
    else:
        out.append(("omega", p * p))
    return out


def param_names(p: int, variant: ModelVariant) -> list[str]:
    """Scalar names matching :func:`flatten_params` order, e.g. ``omega[0,1]``."""
    q = variant.loading_cols(p)
    out = []
    for name, size in param_layout(p, variant):
        if name in ("omega", "psi"):
            out.extend(f"{name}[{i},{j}]" for j in range(p) for i in range(p))
        elif name == "lam":
            out.extend(f"{name}[{i},{j}]" for j in range(q) for i in range(p))
        else:
            out.extend(f"{name}[{i}]" for i in range(size))
    return out


def flatten_params(params: ModelParams, variant: ModelVariant) -> np.ndarray:
    parts = []
    for name, _ in param_layout(params.p, variant):
        a = getattr(params, name)
        parts.append(a.flatten(order="F") if a.ndim > 1 else a)
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, p: int, variant: ModelVariant) -> ModelParams:
    out = {}
    pos = 0
    q = variant.loading_cols(p)
    for name, size in param_layout(p, variant):
        chunk = np.array(vec[pos : pos + size])
        pos += size
        if name in ("omega", "psi"):
            chunk = chunk.reshape((p, p), order="F")
        elif name == "lam":
            chunk = chunk.reshape((p, q), order="F")
        out[name] = chunk
    return ModelParams(**out)
