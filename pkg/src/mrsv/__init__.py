"""Bayesian multivariate realized stochastic volatility with pairwise realized correlations."""

from mrsv.dataio import (
    DataError,
    RunConfig,
    compute_realized_measures,
    load_draws,
    read_config,
    read_dataset,
    save_draws,
    write_config,
    write_dataset,
)
from mrsv.diagnostics import ParamSummary, derived_leverage_correlation, inefficiency_factor, summarize
from mrsv.estimator import MRSVEstimator
from mrsv.forecast import (
    ForecastProtocol,
    PortfolioPlan,
    PredictiveMoments,
    cumulative_objective,
    equal_weight_plan,
    min_variance_weights,
    predictive_moments,
    rolling_forecast,
)
from mrsv.model import Dataset, LatentPaths, LeverageKind, MeanKind, ModelParams, ModelVariant, Priors, SqrtKind
from mrsv.samplers import DrawStore, McmcConfig, run_mcmc
from mrsv.simulate import SimConfig, default_truth, simulate_dataset

__all__ = [
    "DataError",
    "Dataset",
    "DrawStore",
    "ForecastProtocol",
    "LatentPaths",
    "LeverageKind",
    "MRSVEstimator",
    "McmcConfig",
    "MeanKind",
    "ModelParams",
    "ModelVariant",
    "ParamSummary",
    "PortfolioPlan",
    "PredictiveMoments",
    "Priors",
    "RunConfig",
    "SimConfig",
    "SqrtKind",
    "compute_realized_measures",
    "cumulative_objective",
    "default_truth",
    "derived_leverage_correlation",
    "equal_weight_plan",
    "inefficiency_factor",
    "load_draws",
    "min_variance_weights",
    "predictive_moments",
    "read_config",
    "read_dataset",
    "rolling_forecast",
    "run_mcmc",
    "save_draws",
    "simulate_dataset",
    "summarize",
    "write_config",
    "write_dataset",
]

__version__ = "0.1.0"
