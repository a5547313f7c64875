"""Command-line surface.

Subcommands: simulate (write a synthetic dataset + truth file), estimate
(run the chain, persist draws, summary table, acceptance report),
summarize (print a stored draw file as a reporting table), forecast
(one-step predictive moments from a draw file), backtest (rolling
minimum-variance run with a cumulative-objective table), and oracle
(evaluate the library's hand-checkable reference values).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Messages go to standard error; tables go to standard output and CSV files.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import corrmat
from .dataio import (
    DataError,
    RunConfig,
    build_mcmc_config,
    build_priors,
    compute_realized_measures,
    load_draws,
    parse_pair_mask,
    read_config,
    read_cov_series,
    read_dataset,
    save_draws,
    write_config,
    write_cov_series,
    write_dataset,
)
from .estimator import MRSVEstimator
from .forecast import (
    ForecastProtocol,
    PredictiveMoments,
    cumulative_objective,
    equal_weight_plan,
    min_variance_weights,
    rolling_forecast,
)
from .model import (
    Dataset,
    ModelVariant,
    corr_sqrt,
    flatten_params,
    param_names,
    stationary_init_cov,
)
from .samplers import run_mcmc
from .simulate import SimConfig, default_truth, simulate_dataset

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrsv", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(sp, config_required=False):
        sp.add_argument("--config", default=None, required=config_required, help="flat key = value run file")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("--out", default=None, help="override the configured output directory")
        sp.add_argument("--variant", default=None, help="none | full | pars:q")
        sp.add_argument("--sqrt", default=None, choices=["spectral", "cholesky"])
        sp.add_argument("--strict-rcor", action="store_true", help="error on |correlation| >= 1 instead of clamping")

    common(sub.add_parser("simulate", help="write a synthetic dataset, truth file, and covariance series"))
    common(sub.add_parser("estimate", help="run the sampler on the configured dataset"), config_required=True)
    sp = sub.add_parser("summarize", help="print a reporting table for a stored draw file")
    sp.add_argument("draws", help="draw-store file")
    sp.add_argument("--out", default=None, help="also write summary.csv here")
    sp = sub.add_parser("forecast", help="one-step predictive moments from a stored draw file")
    sp.add_argument("draws", help="draw-store file")
    sp.add_argument("--out", default=None, help="output directory (default: alongside the draw file)")
    common(sub.add_parser("backtest", help="rolling re-estimation and minimum-variance accounting"), config_required=True)
    sub.add_parser("oracle", help="evaluate and print the hand-checkable reference values")
    return parser


def _load_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "variant", None) is not None:
        cfg.leverage = args.variant
    if getattr(args, "sqrt", None) is not None:
        cfg.sqrt = args.sqrt
    if getattr(args, "strict_rcor", False):
        cfg.strict_rcor = True
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_configured_dataset(cfg: RunConfig) -> Dataset:
    for name in ("returns_path", "rv_path", "rcor_path"):
        if not getattr(cfg, name):
            raise DataError(f"configuration is missing {name}")
    data = read_dataset(cfg.returns_path, cfg.rv_path, cfg.rcor_path, strict_rcor=cfg.strict_rcor)
    mask = parse_pair_mask(cfg.pair_mask, data.n_pairs)
    if mask is not None:
        data = Dataset(y=data.y, x=data.x, w=data.w, pair_mask=mask, dates=data.dates, assets=data.assets).validate()
    return data


def _summary_frame(draws) -> pd.DataFrame:
    return MRSVEstimator.from_draws(draws).summary().reset_index()


def _print_summary(frame: pd.DataFrame) -> None:
    print(f"{'parameter':<16}{'mean':>12}{'sd':>12}{'2.5%':>12}{'97.5%':>12}{'IF':>10}")
    for row in frame.itertuples(index=False):
        iff = f"{row.inefficiency:10.1f}" if math.isfinite(row.inefficiency) else f"{'--':>10}"
        print(
            f"{row.parameter:<16}{row.mean:12.4f}{row.sd:12.4f}{row.ci_low:12.4f}{row.ci_high:12.4f}{iff}"
        )


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    variant = cfg.variant()
    truth = default_truth(cfg.sim_assets, variant, leverage_scale=cfg.sim_leverage_scale)
    sim = SimConfig(
        n_days=cfg.sim_days,
        n_assets=cfg.sim_assets,
        params=truth,
        variant=variant,
        missing_rate=cfg.sim_missing,
        seed=cfg.seed,
    )
    data, latents = simulate_dataset(sim)
    out = _outdir(cfg)
    write_dataset(data, out / "returns.csv", out / "rv.csv", out / "rcor.csv")
    p = cfg.sim_assets
    vhalf = np.exp(0.5 * latents.log_var)
    cov = np.stack(
        [
            vhalf[t][:, None] * corrmat.assemble(latents.fisher_corr[t], p) * vhalf[t][None, :]
            for t in range(cfg.sim_days)
        ]
    )
    dates = data.dates if data.dates is not None else np.arange(cfg.sim_days)
    assets = data.assets if data.assets is not None else [f"asset{i + 1}" for i in range(p)]
    write_cov_series(out / "realized_cov.csv", dates, assets, cov)
    lines = [f"# simulation truth (seed {cfg.seed}, variant {variant.label()})"]
    lines += [f"{n} = {float(v)!r}" for n, v in zip(param_names(p, variant), flatten_params(truth, variant))]
    (out / "truth.cfg").write_text("\n".join(lines) + "\n")
    cfg.returns_path = str(out / "returns.csv")
    cfg.rv_path = str(out / "rv.csv")
    cfg.rcor_path = str(out / "rcor.csv")
    cfg.realized_cov_path = str(out / "realized_cov.csv")
    write_config(out / "run.cfg", cfg)
    print(f"wrote {cfg.sim_days} days x {p} assets under {out}", file=sys.stderr)
    return 0


def _cmd_estimate(args) -> int:
    cfg = _load_config(args)
    data = _read_configured_dataset(cfg)
    p = data.y.shape[1]
    variant = cfg.variant()
    priors = build_priors(cfg, p, variant)
    draws = run_mcmc(data, build_mcmc_config(cfg, priors))
    out = _outdir(cfg)
    save_draws(out / "draws.bin", draws)
    frame = _summary_frame(draws)
    frame.to_csv(out / "summary.csv", index=False, float_format="%.17g")
    _print_summary(frame)
    report = [f"{name} {rate:.4f}" for name, rate in sorted(draws.accept_rates.items())]
    (out / "acceptance.txt").write_text("\n".join(report) + "\n")
    print(f"kept {draws.n_draws} draws -> {out / 'draws.bin'}", file=sys.stderr)
    return 0


def _cmd_summarize(args) -> int:
    draws = load_draws(args.draws)
    frame = _summary_frame(draws)
    _print_summary(frame)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "summary.csv", index=False, float_format="%.17g")
    return 0


def _cmd_forecast(args) -> int:
    pm = MRSVEstimator.from_draws(load_draws(args.draws)).predict_moments()
    out = Path(args.out) if args.out is not None else Path(args.draws).parent
    out.mkdir(parents=True, exist_ok=True)
    p = pm.mean.shape[0]
    names = [f"asset{i + 1}" for i in range(p)]
    frame = pd.DataFrame(np.column_stack([pm.mean, pm.cov]), index=names, columns=["mean"] + names)
    frame.index.name = "asset"
    frame.to_csv(out / "forecast.csv", float_format="%.17g")
    print(frame.to_string())
    return 0


def _cmd_backtest(args) -> int:
    cfg = _load_config(args)
    data = _read_configured_dataset(cfg)
    p = data.y.shape[1]
    if not cfg.realized_cov_path:
        raise DataError("configuration is missing realized_cov_path")
    dates = data.dates if data.dates is not None else np.arange(data.y.shape[0])
    assets = data.assets if data.assets is not None else [f"asset{i + 1}" for i in range(p)]
    realized = read_cov_series(cfg.realized_cov_path, dates, assets)
    priors = build_priors(cfg, p, cfg.variant())
    protocol = ForecastProtocol(
        window_len=cfg.window_len,
        n_steps=cfg.n_steps,
        mcmc=build_mcmc_config(cfg, priors),
        risk_free=cfg.risk_free,
        target_mus=cfg.target_mu_list(),
        realized_cov=realized,
        warm_burnin=cfg.warm_burnin,
        integrate_log_var_noise=cfg.integrate_log_var_noise,
    )
    plans = rolling_forecast(data, protocol)
    out = _outdir(cfg)
    held_out = realized[cfg.window_len : cfg.window_len + cfg.n_steps]
    table = {"strategy": ["model", "equal_weight"]}
    for plan in plans:
        plan_frame = pd.DataFrame(plan.weights, columns=assets)
        plan_frame.insert(0, "date", plan.dates)
        plan_frame["cash"] = plan.cash_weight
        plan_frame["realized_objective"] = plan.realized_objective
        plan_frame.to_csv(out / f"plan_mu{plan.target_mu:g}.csv", index=False, float_format="%.17g")
        baseline = equal_weight_plan(plan.dates, p, risk_free=cfg.risk_free)
        table[f"mu={plan.target_mu:g}"] = [
            cumulative_objective(plan, held_out),
            cumulative_objective(baseline, held_out),
        ]
    frame = pd.DataFrame(table)
    frame.to_csv(out / "cumulative.csv", index=False, float_format="%.17g")
    print(frame.to_string(index=False))
    return 0


def _oracle_checks() -> list[tuple[str, float, float]]:
    """(name, computed, expected) triples for the classic hand values."""
    checks = [
        ("fisher(0.5)", corrmat.fisher(0.5), 1.0986122886681098),
        ("fisher(-0.9)", corrmat.fisher(-0.9), -2.9444389791664403),
        ("inverse_fisher(log 3)", corrmat.inverse_fisher(1.0986122886681098), 0.5),
    ]
    R = corrmat.assemble(corrmat.fisher(np.array([0.0, 0.5, 0.5])), 3)
    lo, hi = corrmat.entry_bounds(R, 1, 0)
    checks += [("pd_bound_low", lo, -0.5), ("pd_bound_high", hi, 1.0)]
    Req = 0.4 * np.ones((3, 3)) + 0.6 * np.eye(3)
    eig = np.sort(np.linalg.eigvalsh(Req))
    checks += [("equicorr_eig_top", eig[-1], 1.8), ("equicorr_eig_low", eig[0], 0.6)]
    S = corr_sqrt(np.array([[1.0, 0.6], [0.6, 1.0]]), ModelVariant.parse(sqrt="cholesky").sqrt)
    checks += [("cholesky_21", S[1, 0], 0.6), ("cholesky_22", S[1, 1], 0.8)]
    checks.append(
        ("stationary_var(phi=0.9)", float(stationary_init_cov(np.array([0.9]), np.eye(1))[0, 0]), 1.0 / 0.19)
    )
    moments = PredictiveMoments(mean=np.array([0.01, 0.02]), cov=np.diag([1.0, 4.0]))
    w, kappa = min_variance_weights(moments, risk_free=0.0, target_mu=0.004)
    checks += [("portfolio_kappa", kappa, 0.0002), ("portfolio_w1", w[0], 0.2), ("portfolio_w2", w[1], 0.1)]
    rv, rcor = compute_realized_measures(np.array([[1.0, 1.0], [0.0, 1.0]]))
    checks += [
        ("two_bin_rv1", rv[0], 1.0),
        ("two_bin_rv2", rv[1], 2.0),
        ("two_bin_rcor", rcor[0], 1.0 / math.sqrt(2.0)),
    ]
    return checks


def _cmd_oracle(args) -> int:
    failed = 0
    for name, got, want in _oracle_checks():
        ok = abs(got - want) < 1e-8
        failed += not ok
        print(f"{'ok ' if ok else 'FAIL'} {name:<26} {got:.17g} (reference {want:.17g})")
    if failed:
        print(f"{failed} oracle value(s) off", file=sys.stderr)
        return 3
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "summarize": _cmd_summarize,
    "forecast": _cmd_forecast,
    "backtest": _cmd_backtest,
    "oracle": _cmd_oracle,
}


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (np.linalg.LinAlgError, ArithmeticError, RuntimeError)):
        return 3
    if isinstance(exc, (DataError, OSError, ValueError)):
        return 2
    raise exc


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - boundary: translate to exit codes
        code = _exit_code_for(exc)
        kind = "numerical failure" if code == 3 else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
