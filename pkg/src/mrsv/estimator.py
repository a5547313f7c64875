"""Estimator-style front door for the sampler.

``MRSVEstimator`` wraps the MCMC machinery behind the familiar
construct/fit/inspect pattern: option values go to the constructor
unchanged, ``fit`` runs the chain on a :class:`~mrsv.model.Dataset`, and
the fitted object exposes the posterior summary table, one-step-ahead
predictive moments, and minimum-variance weights.  Fitted state lives in
trailing-underscore attributes (``draws_``).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import pandas as pd

from .diagnostics import derived_leverage_correlation, summarize
from .forecast import PredictiveMoments, min_variance_weights, predictive_moments
from .model import Dataset, ModelVariant, Priors
from .samplers import DrawStore, McmcConfig, run_mcmc

__all__ = ["MRSVEstimator"]


class MRSVEstimator:
    """Bayesian estimation of the latent-correlation volatility model.

    Parameters mirror :class:`~mrsv.samplers.McmcConfig` plus the variant
    switches; ``priors=None`` means the vague defaults for the dataset's
    dimension.
    """

    def __init__(
        self,
        leverage: str = "none",
        sqrt: str = "spectral",
        mean: str = "rw",
        n_burnin: int = 1000,
        n_keep: int = 2000,
        thin: int = 1,
        seed: int = 0,
        priors: Optional[Priors] = None,
        store_paths: bool = False,
        audit_pd: bool = False,
    ):
        self.leverage = leverage
        self.sqrt = sqrt
        self.mean = mean
        self.n_burnin = n_burnin
        self.n_keep = n_keep
        self.thin = thin
        self.seed = seed
        self.priors = priors
        self.store_paths = store_paths
        self.audit_pd = audit_pd

    # -- configuration ------------------------------------------------

    def variant(self) -> ModelVariant:
        return ModelVariant.parse(leverage=self.leverage, sqrt=self.sqrt, mean=self.mean)

    def mcmc_config(self) -> McmcConfig:
        return McmcConfig(
            n_burnin=self.n_burnin,
            n_keep=self.n_keep,
            thin=self.thin,
            seed=self.seed,
            variant=self.variant(),
            priors=self.priors,
            store_paths=self.store_paths,
            audit_pd=self.audit_pd,
        )

    # -- fitting ------------------------------------------------------

    def fit(self, data: Dataset) -> "MRSVEstimator":
        """Run the chain on ``data`` and retain the posterior draws."""
        self.draws_ = run_mcmc(data, self.mcmc_config())
        return self

    @classmethod
    def from_draws(cls, draws: DrawStore) -> "MRSVEstimator":
        """Rehydrate a fitted estimator from stored draws (e.g. a draw file)."""
        meta = draws.meta
        est = cls(
            leverage=meta.get("variant", "none"),
            sqrt=meta.get("sqrt", "spectral"),
            mean=meta.get("mean", "rw"),
            n_burnin=meta.get("n_burnin", 0),
            n_keep=draws.n_draws,
            thin=meta.get("thin", 1),
            seed=meta.get("seed", 0),
        )
        est.draws_ = draws
        return est

    def _check_fitted(self) -> DrawStore:
        draws = getattr(self, "draws_", None)
        if draws is None:
            raise RuntimeError("estimator is not fitted; call fit first")
        return draws

    # -- inspection ---------------------------------------------------

    def summary(self) -> pd.DataFrame:
        """Posterior summary table, one row per parameter.

        Columns: mean, sd, central 95% interval, inefficiency factor; for
        leverage variants the derived shock/log-variance correlations are
        appended.
        """
        draws = self._check_fitted()
        rows = summarize(draws)
        variant = self.variant()
        if variant.has_leverage:
            p = draws.log_var_last.shape[1]
            for i in range(p):
                for f in range(variant.loading_cols(p)):
                    rows.append(derived_leverage_correlation(draws, i, f))
        return pd.DataFrame(
            {
                "parameter": [r.name for r in rows],
                "mean": [r.posterior_mean for r in rows],
                "sd": [r.posterior_sd for r in rows],
                "ci_low": [r.ci_low for r in rows],
                "ci_high": [r.ci_high for r in rows],
                "inefficiency": [r.inefficiency_factor for r in rows],
            }
        ).set_index("parameter")

    def posterior_mean(self, name: str) -> float:
        """Posterior mean of one named parameter column."""
        return float(self._check_fitted().column(name).mean())

    def accept_rates(self) -> dict:
        return dict(self._check_fitted().accept_rates)

    # -- prediction ---------------------------------------------------

    def predict_moments(self, integrate_log_var_noise: bool = False) -> PredictiveMoments:
        """One-step-ahead predictive mean vector and covariance matrix."""
        return predictive_moments(self._check_fitted(), self.variant(), integrate_log_var_noise)

    def min_variance(self, target_mu: float, risk_free: float = 0.0) -> np.ndarray:
        """Minimum-variance weights hitting ``target_mu`` one step ahead."""
        weights, _ = min_variance_weights(self.predict_moments(), risk_free, target_mu)
        return weights
