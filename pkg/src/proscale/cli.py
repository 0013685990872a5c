"""Command-line interface.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    PerturbationSpec,
    SweepSpec,
    end_to_end,
    parse_config,
    parse_service_spec,
    perturb_trace,
    run_sweep,
    sweep_rows_to_csv,
)
from .nhpp import TrainConfig, load_model, predict_intensity, save_model, train, tune_betas
from .periodicity import detect_period
from .planner import PlannerConfig, plan_schedule
from .sim import make_scaler, replay
from .trace import TraceFormatError, aggregate_qps, fixed_service, ingest_trace, write_trace


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dt", type=float, default=60.0, help="aggregation step in seconds")
    parser.add_argument("--out-dir", type=Path, default=Path("."))


def _parse_scaler(text: str):
    """Parse bp:<B>, adapbp:<mult>, hp:<target>, rt:<wait>, cost:<idle>."""
    kind, _, value = text.partition(":")
    if value == "":
        raise ConfigError(f"scaler spec {text!r} needs a parameter, e.g. bp:3")
    return kind.lower(), float(value)


def cmd_detect_period(args) -> int:
    events = ingest_trace(args.input)
    step = args.agg_window if args.agg_window else args.dt
    series = aggregate_qps(events, step)
    info = detect_period(series, args.max_period)
    print(json.dumps({"detected": info.detected, "period_bins": info.period_bins, "score": info.score}))
    return 0


def cmd_train(args) -> int:
    events = ingest_trace(args.input)
    series = aggregate_qps(events, args.dt)
    if args.period == "auto":
        period = detect_period(series, args.max_period)
    elif args.period.lower() == "none":
        period = None
    else:
        period = int(args.period)
    config = TrainConfig(beta1=args.beta1, beta2=args.beta2, rho=args.rho, max_iters=args.max_iters)
    if args.tune:
        config, _ = tune_betas(series, period, base_config=config)
    model = train(series, config, period=period)
    save_model(model, args.out)
    print(f"model written to {args.out}")
    return 0


def cmd_plan(args) -> int:
    model = load_model(args.model)
    pending = parse_service_spec(args.pending)
    if pending is None:
        raise ConfigError("plan requires a concrete pending model, e.g. fixed:13")
    mode, level = args.mode, args.level
    kwargs = dict(
        mu_tau=pending.mean,
        mu_s=args.mu_s,
        R=args.R,
        planning_interval=args.delta,
    )
    if mode == "hp":
        config = PlannerConfig(mode="hp", alpha=1.0 - level, **kwargs)
    elif mode == "rt":
        config = PlannerConfig(mode="rt", d=args.mu_s + level, **kwargs)
    else:
        config = PlannerConfig(mode="cost", budget=pending.mean + args.mu_s + level, **kwargs)
    intensity = predict_intensity(model, model.end, args.horizon, max_horizon=args.horizon + 1.0)
    # plan against the expected arrivals of the predicted process
    expected = int(np.floor(intensity.total_mass))
    if expected < 1:
        raise ConfigError("predicted intensity yields no expected arrivals within the horizon")
    masses = np.arange(1, expected + 1, dtype=float)
    arrivals = intensity.inverse_cumulative(masses)
    schedule = plan_schedule(arrivals - model.end, _shift(intensity, -model.end), config, pending, seed=args.seed)
    lines = ["index,creation_time_s"]
    lines += [f"{k + 1},{t!r}" for k, t in enumerate(schedule) if np.isfinite(t)]
    output = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(output)
    else:
        sys.stdout.write(output)
    return 0


def _shift(intensity, offset):
    from .arrivals import PiecewiseConstantIntensity

    return PiecewiseConstantIntensity(intensity.breakpoints + offset, intensity.rates)


def cmd_simulate(args) -> int:
    events = ingest_trace(args.input)
    pending = parse_service_spec(args.pending)
    processing = parse_service_spec(args.processing)
    kind, value = _parse_scaler(args.scaler)
    if kind in ("bp", "backup_pool"):
        scaler = make_scaler("backup_pool", B=int(value))
    elif kind in ("adapbp", "adaptive_backup_pool"):
        scaler = make_scaler("adaptive_backup_pool", multiplier=value)
    else:
        model = load_model(args.model) if args.model else None
        if model is None:
            raise ConfigError("robustscaler simulation requires --model")
        span = events[-1].arrival_time + args.horizon_slack
        intensity = predict_intensity(model, model.epoch, span, max_horizon=span + 1.0)
        mu_s = processing.mean if processing else float(
            np.mean([e.processing_time for e in events if e.processing_time is not None])
        )
        common = dict(mu_tau=pending.mean, mu_s=mu_s, R=args.R, planning_interval=args.delta)
        if kind == "hp":
            config = PlannerConfig(mode="hp", alpha=1.0 - value, **common)
        elif kind == "rt":
            config = PlannerConfig(mode="rt", d=mu_s + value, **common)
        elif kind == "cost":
            config = PlannerConfig(mode="cost", budget=pending.mean + mu_s + value, **common)
        else:
            raise ConfigError(f"unknown scaler kind {kind!r}")
        scaler = make_scaler(f"robustscaler_{config.mode}", config=config, intensity=intensity)
    result = replay(events, scaler, pending, processing, seed=args.seed)
    print(result.to_json(indent=2, sort_keys=True))
    if args.events_csv:
        result.trace.write_csv(args.events_csv)
    return 0


def cmd_sweep(args) -> int:
    events = ingest_trace(args.input)
    pending = parse_service_spec(args.pending)
    processing = parse_service_spec(args.processing)
    grid = tuple(float(v) for v in args.grid.split(","))
    model = load_model(args.model) if args.model else None
    spec = SweepSpec(
        scaler_kind=args.scaler,
        grid=grid,
        trace=tuple(events),
        split_time=args.split,
        pending_model=pending,
        processing_model=processing,
        model=model,
        seed=args.seed,
        R=args.R,
        planning_interval=args.delta,
    )
    rows = run_sweep(spec, workers=args.workers)
    csv_text = sweep_rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_perturb(args) -> int:
    events = ingest_trace(args.input)
    spec = PerturbationSpec(
        amplification=args.c,
        window_s=args.window,
        period_s=args.period,
        deletion_offset_s=None if args.no_delete else args.deletion_offset,
        injection_offset_s=args.injection_offset,
    )
    perturbed = perturb_trace(events, spec, seed=args.seed)
    if not perturbed:
        print("warning: perturbation removed every event", file=sys.stderr)
    write_trace(perturbed, args.out)
    print(f"{len(perturbed)} events written to {args.out}")
    return 0


def cmd_e2e(args) -> int:
    config = parse_config(Path(args.config).read_text())
    artifacts = end_to_end(config, args.out_dir, workers=args.workers)
    for name, path in artifacts.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proscale", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect-period", help="detect the dominant period of a trace")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--max-period", type=int, default=None)
    p.add_argument("--agg-window", type=float, default=None, help="aggregation window override")
    p.set_defaults(func=cmd_detect_period)

    p = sub.add_parser("train", help="fit the intensity model")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--beta1", type=float, default=10.0)
    p.add_argument("--beta2", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--period", default="auto", help="auto | none | <bins>")
    p.add_argument("--max-period", type=int, default=None)
    p.add_argument("--tune", action="store_true", help="grid-search betas by held-out likelihood")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="emit creation times for the predicted horizon")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("hp", "rt", "cost"), required=True)
    p.add_argument("--level", type=float, required=True,
                   help="hp: target hit rate; rt: wait target; cost: idle budget")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--pending", default="fixed:13")
    p.add_argument("--mu-s", type=float, default=20.0)
    p.add_argument("--R", type=int, default=1000)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="replay a trace under one scaler")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--scaler", required=True, help="bp:<B> | adapbp:<mult> | hp:<target> | rt:<wait> | cost:<idle>")
    p.add_argument("--model")
    p.add_argument("--pending", default="fixed:13")
    p.add_argument("--processing", default="trace")
    p.add_argument("--R", type=int, default=1000)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--horizon-slack", type=float, default=3600.0)
    p.add_argument("--events-csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="Pareto sweep of one scaler over a grid")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--scaler", required=True,
                   help="backup_pool | adaptive_backup_pool | robustscaler_{hp,rt,cost}")
    p.add_argument("--grid", required=True, help="comma-separated parameter values")
    p.add_argument("--split", type=float, default=0.0, help="test split start (s)")
    p.add_argument("--model")
    p.add_argument("--pending", default="fixed:13")
    p.add_argument("--processing", default="trace")
    p.add_argument("--R", type=int, default=1000)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perturb", help="delete/amplify periodic windows of a trace")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--c", type=int, required=True, help="burst amplification factor")
    p.add_argument("--window", type=float, default=300.0)
    p.add_argument("--period", type=float, default=3600.0)
    p.add_argument("--deletion-offset", type=float, default=0.0)
    p.add_argument("--injection-offset", type=float, default=360.0)
    p.add_argument("--no-delete", action="store_true")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("e2e", help="run the full pipeline from a config file")
    _add_common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_e2e)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
