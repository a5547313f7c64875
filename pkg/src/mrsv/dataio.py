"""File formats and data plumbing.

CSV conventions: returns and realized-variance files are date-by-asset
matrices with one header row; realized correlations travel in long form
(date, asset_i, asset_j, value) so sparse pair coverage is natural.
Realized measures are transformed at ingestion: x = log RV and
w = fisher(RCOR), with |RCOR| >= 1 clamped to +-(1 - 1e-8) under the
default policy (strict mode errors instead).

Draw stores persist as a self-describing text header (magic line plus one
JSON object) followed by fixed-width little-endian float64 rows, so a
finished file round-trips bit for bit and a running chain can append.

Run configuration is flat ``key = value`` text with ``#`` comments; every
sampler setting and every prior hyperparameter is addressable (priors via
``prior.<field>`` scalar overrides applied on top of the defaults).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import corrmat
from .model import Dataset, ModelVariant, Priors
from .samplers import DrawStore, McmcConfig

__all__ = [
    "DataError",
    "RCOR_CLAMP",
    "RunConfig",
    "build_mcmc_config",
    "build_priors",
    "compute_realized_measures",
    "load_draws",
    "measures_to_observations",
    "parse_pair_mask",
    "read_config",
    "read_cov_series",
    "read_dataset",
    "save_draws",
    "write_config",
    "write_cov_series",
    "write_dataset",
]

RCOR_CLAMP = 1.0 - 1e-8
_MAGIC = "MRSVDRAWS"
_SCHEMA = 1


class DataError(Exception):
    """Input files or configuration that cannot be used."""


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def _read_matrix_csv(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, index_col=0, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    try:
        return df.astype(np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"non-numeric cell in {path}: {exc}") from exc


def _fisherize(rho: np.ndarray, strict: bool) -> np.ndarray:
    """Fisher-transform observed correlations under the clamp policy."""
    rho = np.array(rho, dtype=np.float64)
    obs = np.isfinite(rho)
    over = obs & (np.abs(rho) >= 1.0)
    if np.any(over):
        if strict:
            raise DataError("realized correlation at or beyond +-1 in strict mode")
        warnings.warn(
            f"{int(over.sum())} realized correlation(s) at or beyond +-1 clamped to +-{RCOR_CLAMP}",
            stacklevel=3,
        )
        rho[over] = np.sign(rho[over]) * RCOR_CLAMP
    w = np.full(rho.shape, np.nan)
    w[obs] = corrmat.fisher(rho[obs])
    return w


def measures_to_observations(rv, rcor, strict_rcor: bool = False):
    """(x, w) = (log RV, fisher RCOR), NaN cells passing through as missing."""
    rv = np.asarray(rv, dtype=np.float64)
    obs = np.isfinite(rv)
    if np.any(rv[obs] <= 0.0):
        raise DataError("realized variances must be positive")
    x = np.full(rv.shape, np.nan)
    x[obs] = np.log(rv[obs])
    return x, _fisherize(rcor, strict_rcor)


def _pair_lookup(p: int) -> dict:
    pairs = corrmat.pair_indices(p)
    return {(int(i), int(j)): k for k, (i, j) in enumerate(pairs)}


def read_dataset(returns_path, rv_path, rcor_path, strict_rcor: bool = False, pair_mask=None) -> Dataset:
    """Load the three input files into a Dataset, transforming at ingestion."""
    rets = _read_matrix_csv(returns_path)
    rv = _read_matrix_csv(rv_path)
    if list(rets.columns) != list(rv.columns):
        raise DataError("returns and realized-variance files disagree on assets")
    if list(rets.index) != list(rv.index):
        raise DataError("returns and realized-variance files disagree on dates")
    assets = [str(c) for c in rets.columns]
    dates = [str(d) for d in rets.index]
    p = len(assets)
    k = corrmat.n_pairs(p)
    asset_idx = {a: i for i, a in enumerate(assets)}
    date_idx = {d: t for t, d in enumerate(dates)}

    try:
        long = pd.read_csv(rcor_path, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot parse {rcor_path}: {exc}") from exc
    want = ["date", "asset_i", "asset_j", "value"]
    if list(long.columns[:4]) != want:
        raise DataError(f"realized-correlation file must have columns {want}")
    long = long.iloc[:, :4]

    rho = np.full((len(dates), k), np.nan)
    lookup = _pair_lookup(p)
    for date, ai, aj, value in long.itertuples(index=False):
        key = str(date)
        if key not in date_idx:
            raise DataError(f"realized-correlation date {date!r} not in the returns file")
        try:
            i, j = asset_idx[str(ai)], asset_idx[str(aj)]
        except KeyError as exc:
            raise DataError(f"unknown asset in realized-correlation file: {exc}") from None
        if i == j:
            raise DataError(f"realized correlation of {ai!r} with itself")
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise DataError(f"non-numeric realized correlation {value!r}") from None
        if not math.isnan(v):
            rho[date_idx[key], lookup[(max(i, j), min(i, j))]] = v

    x, w = measures_to_observations(rv.to_numpy(), rho, strict_rcor)
    mask = None if pair_mask is None else np.asarray(pair_mask, dtype=bool)
    try:
        return Dataset(
            y=rets.to_numpy(),
            x=x,
            w=w,
            pair_mask=mask,
            dates=np.array(dates, dtype=object),
            assets=list(assets),
        ).validate()
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def write_dataset(data: Dataset, returns_path, rv_path, rcor_path) -> None:
    """Inverse of read_dataset: natural units, blank cells for missing."""
    T, p = data.y.shape
    assets = data.assets if data.assets is not None else [f"asset{i + 1}" for i in range(p)]
    dates = data.dates if data.dates is not None else np.arange(T)
    idx = pd.Index(dates, name="date")
    pd.DataFrame(data.y, index=idx, columns=assets).to_csv(returns_path, float_format="%.17g")
    pd.DataFrame(np.exp(data.x), index=idx, columns=assets).to_csv(rv_path, float_format="%.17g")
    pairs = corrmat.pair_indices(p)
    rows = []
    rho = corrmat.inverse_fisher(data.w)
    for t in range(T):
        for k_, (i, j) in enumerate(pairs):
            if np.isfinite(rho[t, k_]):
                rows.append((dates[t], assets[i], assets[j], rho[t, k_]))
    pd.DataFrame(rows, columns=["date", "asset_i", "asset_j", "value"]).to_csv(rcor_path, index=False, float_format="%.17g")


def write_cov_series(path, dates, assets, cov: np.ndarray) -> None:
    """Long-form (date, asset_i, asset_j, value) dump of a (T, p, p) series."""
    cov = np.asarray(cov, dtype=np.float64)
    rows = []
    for t, date in enumerate(dates):
        for i in range(len(assets)):
            for j in range(i + 1):
                rows.append((date, assets[i], assets[j], cov[t, i, j]))
    pd.DataFrame(rows, columns=["date", "asset_i", "asset_j", "value"]).to_csv(path, index=False, float_format="%.17g")


def read_cov_series(path, dates, assets) -> np.ndarray:
    """Read a (T, p, p) series written by write_cov_series; every lower-triangle
    cell of every requested date must be present."""
    try:
        long = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    want = ["date", "asset_i", "asset_j", "value"]
    if list(long.columns[:4]) != want:
        raise DataError(f"covariance file must have columns {want}")
    p = len(assets)
    date_idx = {str(d): t for t, d in enumerate(dates)}
    asset_idx = {str(a): i for i, a in enumerate(assets)}
    out = np.full((len(dates), p, p), np.nan)
    for date, ai, aj, value in long.itertuples(index=False):
        key = str(date)
        if key not in date_idx:
            continue
        try:
            i, j = asset_idx[str(ai)], asset_idx[str(aj)]
        except KeyError as exc:
            raise DataError(f"unknown asset in covariance file: {exc}") from None
        v = float(value)
        out[date_idx[key], i, j] = v
        out[date_idx[key], j, i] = v
    if np.any(np.isnan(out)):
        raise DataError("covariance file does not cover every requested date")
    return out


# ---------------------------------------------------------------------------
# realized measures from intraday grids
# ---------------------------------------------------------------------------


def compute_realized_measures(intraday: np.ndarray):
    """(RV, RCOR) from intraday return bins with per-bin availability (NaN).

    RV sums squared returns over a series' own available bins; each pair's
    correlation uses only bins where both legs are present, with the
    pair-restricted variances in the denominator, so a pair can be measured
    even when full-grid synchronization would discard most of the day.
    Cells backed by fewer than two bins come out missing.
    """
    r = np.asarray(intraday, dtype=np.float64)
    single = r.ndim == 2
    if single:
        r = r[None]
    if r.ndim != 3:
        raise ValueError("intraday returns must be (days, bins, assets) or (bins, assets)")
    T, _, p = r.shape
    k = corrmat.n_pairs(p)
    obs = np.isfinite(r)
    r0 = np.where(obs, r, 0.0)
    counts = obs.sum(axis=1)
    rv = np.where(counts >= 2, np.sum(r0**2, axis=1), np.nan)
    rcor = np.full((T, k), np.nan)
    for k_, (i, j) in enumerate(corrmat.pair_indices(p)):
        both = obs[:, :, i] & obs[:, :, j]
        ri = np.where(both, r0[:, :, i], 0.0)
        rj = np.where(both, r0[:, :, j], 0.0)
        denom = np.sqrt(np.sum(ri**2, axis=1) * np.sum(rj**2, axis=1))
        ok = (both.sum(axis=1) >= 2) & (denom > 0.0)
        rcor[ok, k_] = np.sum(ri * rj, axis=1)[ok] / denom[ok]
    if single:
        return rv[0], rcor[0]
    return rv, rcor


# ---------------------------------------------------------------------------
# draw persistence
# ---------------------------------------------------------------------------


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_draws(path, draws: DrawStore) -> None:
    """Write the store: magic line, JSON header, fixed-width f64 rows.

    Full latent paths are an in-memory convenience (warm starts) and are
    not persisted; the per-draw day-T snapshots are.
    """
    n, p = draws.log_var_last.shape
    k = draws.fisher_last.shape[1]
    header = {
        "schema": _SCHEMA,
        "n_draws": int(draws.n_draws),
        "n_param": len(draws.names),
        "p": int(p),
        "n_pairs": int(k),
        "pair_order": [f"{i}>{j}" for i, j in corrmat.pair_indices(p)],
        "columns": list(draws.names),
        "has_shocks": draws.shock_last is not None,
        "accept_rates": _json_safe(draws.accept_rates),
        "meta": _json_safe(draws.meta),
    }
    blocks = [draws.params, draws.log_var_last, draws.fisher_last, draws.mean_last]
    if draws.shock_last is not None:
        blocks.append(draws.shock_last)
    rows = np.ascontiguousarray(np.hstack(blocks).astype("<f8", copy=False))
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {_SCHEMA}\n".encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(rows.tobytes())


def load_draws(path) -> DrawStore:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8", errors="replace").strip()
        if not magic.startswith(_MAGIC):
            raise DataError(f"{path} is not a draw-store file")
        try:
            header = json.loads(fh.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"bad draw-store header in {path}: {exc}") from exc
        body = fh.read()
    if header.get("schema") != _SCHEMA:
        raise DataError(f"unsupported draw-store schema {header.get('schema')!r}")
    n, n_param = header["n_draws"], header["n_param"]
    p, k = header["p"], header["n_pairs"]
    width = n_param + p + k + p + (p if header["has_shocks"] else 0)
    flat = np.frombuffer(body, dtype="<f8")
    if flat.size != n * width:
        raise DataError(f"draw-store body holds {flat.size} values, expected {n * width}")
    rows = flat.reshape(n, width).astype(np.float64)
    cuts = np.cumsum([n_param, p, k, p])
    params, h, g, m = np.split(rows[:, : cuts[3]], cuts[:3], axis=1)
    shocks = rows[:, cuts[3] :] if header["has_shocks"] else None
    return DrawStore(
        names=list(header["columns"]),
        params=params,
        log_var_last=h,
        fisher_last=g,
        mean_last=m,
        accept_rates=header["accept_rates"],
        meta=header["meta"],
        shock_last=shocks,
    )


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything one estimation or backtest run needs, flat-file friendly."""

    returns_path: str = ""
    rv_path: str = ""
    rcor_path: str = ""
    realized_cov_path: str = ""
    out_dir: str = "."
    seed: int = 0
    leverage: str = "none"  # none | full | pars:q
    sqrt: str = "spectral"  # spectral | cholesky
    mean: str = "rw"  # rw | const
    n_burnin: int = 1000
    n_keep: int = 2000
    thin: int = 1
    store_paths: bool = False
    path_stride: int = 10
    audit_pd: bool = False
    pd_tol: float = 1e-10
    progress_every: int = 0
    strict_rcor: bool = False
    pair_mask: str = ""  # comma-separated 0/1 per pair, blank = all pairs free
    window_len: int = 300
    n_steps: int = 30
    risk_free: float = 0.0
    target_mus: str = "0.1"
    warm_burnin: int = 200
    integrate_log_var_noise: bool = False
    sim_days: int = 500
    sim_assets: int = 3
    sim_missing: float = 0.0
    sim_leverage_scale: float = -0.06
    prior: dict = field(default_factory=dict)  # scalar overrides, prior.<field> keys

    def variant(self) -> ModelVariant:
        return ModelVariant.parse(leverage=self.leverage, sqrt=self.sqrt, mean=self.mean)

    def target_mu_list(self) -> tuple:
        return tuple(float(v) for v in str(self.target_mus).split(",") if str(v).strip())


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_scalar(text: str, kind: type):
    if kind is bool:
        try:
            return _BOOL_WORDS[text.strip().lower()]
        except KeyError:
            raise DataError(f"expected a boolean, got {text!r}") from None
    try:
        return kind(text.strip())
    except ValueError:
        raise DataError(f"expected {kind.__name__}, got {text!r}") from None


def read_config(path) -> RunConfig:
    """Parse flat key = value text with # comments into a RunConfig."""
    cfg = RunConfig()
    types = {f.name: f.type for f in dataclass_fields(RunConfig)}
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("prior."):
            cfg.prior[key[len("prior.") :]] = _parse_scalar(value, float)
            continue
        if key not in types or key == "prior":
            raise DataError(f"{path}:{lineno}: unknown configuration key {key!r}")
        setattr(cfg, key, _parse_scalar(value, kinds[types[key]]))
    return cfg


def write_config(path, cfg: RunConfig) -> None:
    lines = ["# mrsv run configuration"]
    for f in dataclass_fields(RunConfig):
        if f.name == "prior":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for key, value in sorted(cfg.prior.items()):
        lines.append(f"prior.{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_pair_mask(spec: str, n_pairs: int):
    """Comma-separated 0/1 flags in canonical pair order; blank means all free."""
    if not str(spec).strip():
        return None
    parts = [s.strip() for s in str(spec).split(",")]
    if len(parts) != n_pairs:
        raise DataError(f"pair mask has {len(parts)} entries, need {n_pairs}")
    try:
        return np.array([bool(int(s)) for s in parts])
    except ValueError:
        raise DataError(f"pair mask must be 0/1 flags, got {spec!r}") from None


def build_priors(cfg: RunConfig, p: int, variant: ModelVariant) -> Priors:
    """Defaults for (p, variant) with any scalar prior.<field> overrides applied.

    A scalar override fills vector fields, scales identity for matrix
    fields, and replaces scalar fields directly.
    """
    priors = Priors.default(p, variant)
    valid = {f.name for f in dataclass_fields(Priors)}
    for key, value in cfg.prior.items():
        if key not in valid:
            raise DataError(f"unknown prior field {key!r}")
        current = getattr(priors, key)
        if current is None:
            raise DataError(f"prior field {key!r} does not apply to the {variant.label()} variant")
        if isinstance(current, np.ndarray):
            if current.ndim == 2:
                setattr(priors, key, value * np.eye(current.shape[0]))
            else:
                setattr(priors, key, np.full(current.shape, value))
        else:
            setattr(priors, key, type(current)(value))
    return priors


def build_mcmc_config(cfg: RunConfig, priors: Priors | None = None) -> McmcConfig:
    return McmcConfig(
        n_burnin=cfg.n_burnin,
        n_keep=cfg.n_keep,
        thin=cfg.thin,
        seed=cfg.seed,
        variant=cfg.variant(),
        priors=priors,
        store_paths=cfg.store_paths,
        path_stride=cfg.path_stride,
        audit_pd=cfg.audit_pd,
        pd_tol=cfg.pd_tol,
        progress_every=cfg.progress_every,
    )
