"""Experiment orchestration: Pareto sweeps, trace perturbation, end-to-end runs.

Everything here is a thin shell over the library: each emitted row can be
re-derived by calling the corresponding library functions directly, and a
fixed (config, seed) pair reproduces byte-identical outputs.
"""

from __future__ import annotations

import configparser
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .arrivals import PiecewiseConstantIntensity
from .nhpp import IntensityModel, TrainConfig, predict_intensity, save_model, train, tune_betas
from .periodicity import PeriodInfo, detect_period
from .planner import PlannerConfig
from .sim import AdaptiveBackupPool, BackupPool, RobustScaler, SimResult, replay
from .trace import (
    QueryEvent,
    ServiceTimeModel,
    aggregate_qps,
    exponential_service,
    fixed_service,
    ingest_trace,
    philox_stream,
    write_trace,
)

logger = logging.getLogger(__name__)

_PERTURB_STREAM = 0x70657274

SWEEP_COLUMNS = (
    "param",
    "hit_rate",
    "relative_cost",
    "rt_avg",
    "total_cost",
    "hit_rate_windowed_variance",
    "rt_windowed_variance",
)


class ConfigError(ValueError):
    """Invalid harness configuration."""


@dataclass(frozen=True)
class SweepSpec:
    """One Pareto sweep: a scaler kind, its trade-off grid, and the replay setup.

    Grid semantics by kind:
      backup_pool            pool sizes B
      adaptive_backup_pool   QPS multipliers
      robustscaler_hp        target hit rates (alpha = 1 - value)
      robustscaler_rt        wait targets, i.e. d - mu_s
      robustscaler_cost      idle budgets, i.e. budget - mu_tau - mu_s
    """

    scaler_kind: str
    grid: tuple[float, ...]
    trace: tuple[QueryEvent, ...]
    split_time: float
    pending_model: ServiceTimeModel
    processing_model: ServiceTimeModel | None = None
    model: IntensityModel | None = None
    intensity: PiecewiseConstantIntensity | None = None
    seed: int = 0
    R: int = 1000
    planning_interval: float | None = 1.0
    m: int = 1
    kappa_policy: str = "local_intensity"
    horizon_slack: float = 3600.0
    resample_processing: bool = False

    def __post_init__(self) -> None:
        if len(self.grid) == 0:
            raise ConfigError("sweep grid must be non-empty")
        if len(self.trace) == 0:
            raise ConfigError("sweep trace must be non-empty")
        last = self.trace[-1].arrival_time
        if not (0.0 <= self.split_time <= last):
            raise ConfigError(f"split {self.split_time} outside the trace span [0, {last}]")
        if not any(e.arrival_time >= self.split_time for e in self.trace):
            raise ConfigError("test split is empty")
        if self.scaler_kind.startswith("robustscaler") and (
            self.model is None and self.intensity is None
        ):
            raise ConfigError("robustscaler sweeps need a trained model or an intensity")

    @property
    def test_events(self) -> list[QueryEvent]:
        """Test-split events re-zeroed at the split time."""
        return [
            QueryEvent(e.arrival_time - self.split_time, e.processing_time)
            for e in self.trace
            if e.arrival_time >= self.split_time
        ]


def _shift_intensity(
    intensity: PiecewiseConstantIntensity, offset: float
) -> PiecewiseConstantIntensity:
    return PiecewiseConstantIntensity(intensity.breakpoints + offset, intensity.rates)


def _sweep_intensity(spec: SweepSpec, test_span: float) -> PiecewiseConstantIntensity | None:
    """Predicted (or supplied) intensity over the re-zeroed test window."""
    if not spec.scaler_kind.startswith("robustscaler"):
        return None
    horizon = test_span + spec.horizon_slack
    if spec.intensity is not None:
        clipped_end = min(spec.intensity.end, spec.split_time + horizon)
        bp = spec.intensity.breakpoints
        keep = (bp >= spec.split_time) & (bp <= clipped_end)
        # rebuild on [split, end] with exact edge cells
        edges = np.unique(np.concatenate([[spec.split_time], bp[keep], [clipped_end]]))
        mids = 0.5 * (edges[:-1] + edges[1:])
        rates = np.array([spec.intensity.rate_at(min(t, spec.intensity.end - 1e-9)) for t in mids])
        return _shift_intensity(PiecewiseConstantIntensity(edges, rates), -spec.split_time)
    pred = predict_intensity(spec.model, spec.split_time, horizon, max_horizon=horizon + 1.0)
    return _shift_intensity(pred, -spec.split_time)


def _planner_config(spec: SweepSpec, param: float) -> PlannerConfig:
    mu_tau = spec.pending_model.mean
    mu_s = spec.processing_model.mean if spec.processing_model is not None else float(
        np.mean([e.processing_time for e in spec.trace if e.processing_time is not None])
    )
    common = dict(
        mu_tau=mu_tau,
        mu_s=mu_s,
        R=spec.R,
        planning_interval=spec.planning_interval,
        m=spec.m,
        kappa_policy=spec.kappa_policy,
    )
    if spec.scaler_kind == "robustscaler_hp":
        return PlannerConfig(mode="hp", alpha=1.0 - param, **common)
    if spec.scaler_kind == "robustscaler_rt":
        return PlannerConfig(mode="rt", d=mu_s + param, **common)
    if spec.scaler_kind == "robustscaler_cost":
        return PlannerConfig(mode="cost", budget=mu_tau + mu_s + param, **common)
    raise ConfigError(f"unknown robustscaler kind {spec.scaler_kind!r}")


def _sweep_point(spec: SweepSpec, param: float) -> dict:
    events = spec.test_events
    span = events[-1].arrival_time if events else 0.0
    if spec.scaler_kind in ("backup_pool", "bp"):
        scaler = BackupPool(int(param))
    elif spec.scaler_kind in ("adaptive_backup_pool", "adapbp"):
        scaler = AdaptiveBackupPool(param)
    else:
        scaler = RobustScaler(_planner_config(spec, param), _sweep_intensity(spec, span))
    try:
        result = replay(
            events,
            scaler,
            spec.pending_model,
            spec.processing_model,
            seed=spec.seed,
            resample_processing=spec.resample_processing,
        )
    except Exception as exc:
        raise RuntimeError(f"sweep point {spec.scaler_kind}={param} failed: {exc}") from exc
    return {
        "param": param,
        "hit_rate": result.hit_rate,
        "relative_cost": result.relative_cost,
        "rt_avg": result.rt_avg,
        "total_cost": result.total_cost,
        "hit_rate_windowed_variance": result.hit_rate_windowed_variance,
        "rt_windowed_variance": result.rt_windowed_variance,
    }


def run_sweep(spec: SweepSpec, workers: int = 1) -> list[dict]:
    """One replay per grid point on the test split; rows follow grid order."""
    if workers <= 1:
        return [_sweep_point(spec, param) for param in spec.grid]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_sweep_point, spec, param) for param in spec.grid]
        return [f.result() for f in futures]


def sweep_rows_to_csv(rows: list[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(float(row[c])) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PerturbationSpec:
    """Periodic deletion windows plus amplified bursts.

    Every ``period_s`` seconds, events inside the window starting at
    ``deletion_offset_s`` are dropped, and each event inside the window
    starting at ``injection_offset_s`` gains ``amplification`` jittered
    replicas.
    """

    amplification: int
    window_s: float = 300.0
    period_s: float = 3600.0
    deletion_offset_s: float | None = 0.0
    injection_offset_s: float = 360.0

    def __post_init__(self) -> None:
        if self.amplification < 0 or int(self.amplification) != self.amplification:
            raise ValueError(f"amplification must be a non-negative integer, got {self.amplification}")
        if not (0 < self.window_s <= self.period_s):
            raise ValueError("need 0 < window_s <= period_s")
        for off in (self.deletion_offset_s, self.injection_offset_s):
            if off is not None and not (0 <= off and off + self.window_s <= self.period_s):
                raise ValueError("offset windows must fit inside one period")


def _in_window(arrivals: np.ndarray, offset: float, window: float, period: float) -> np.ndarray:
    phase = np.mod(arrivals - offset, period)
    return (arrivals >= offset) & (phase < window)


def perturb_trace(
    events: list[QueryEvent], spec: PerturbationSpec, seed: int = 0
) -> list[QueryEvent]:
    """Apply periodic deletions and amplified bursts to a trace."""
    arrivals = np.array([e.arrival_time for e in events], dtype=float)
    keep = np.ones(arrivals.size, dtype=bool)
    if spec.deletion_offset_s is not None:
        keep &= ~_in_window(arrivals, spec.deletion_offset_s, spec.window_s, spec.period_s)
    out = [e for e, k in zip(events, keep) if k]
    if spec.amplification > 0:
        rng = philox_stream(seed, _PERTURB_STREAM)
        inject = _in_window(arrivals, spec.injection_offset_s, spec.window_s, spec.period_s)
        for e in (ev for ev, m in zip(events, inject) if m):
            window_start = (
                np.floor((e.arrival_time - spec.injection_offset_s) / spec.period_s) * spec.period_s
                + spec.injection_offset_s
            )
            jitter = rng.uniform(0.0, spec.window_s, size=spec.amplification)
            out.extend(QueryEvent(float(window_start + u), e.processing_time) for u in jitter)
    out.sort(key=lambda e: e.arrival_time)
    if not out:
        logger.warning("perturbation removed every event; returning an empty trace")
    return out


# --------------------------------------------------------------------------
# end-to-end configuration


@dataclass(frozen=True)
class EndToEndConfig:
    trace_input: str
    dt: float = 60.0
    period_mode: str = "auto"  # auto | none | integer bins
    max_period: int | None = None
    beta1: float = 10.0
    beta2: float = 1.0
    rho: float = 1.0
    max_iters: int = 500
    tol: float = 1e-6
    tune: bool = False
    pending: str = "fixed:13"
    processing: str = "trace"
    sweep_scaler: str = "backup_pool"
    sweep_grid: tuple[float, ...] = (0.0, 1.0, 2.0)
    split: float = 0.0
    R: int = 1000
    delta: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.trace_input:
            raise ConfigError("[trace] input is required")
        if self.period_mode not in ("auto", "none") and not self.period_mode.isdigit():
            raise ConfigError(f"[periodicity] mode must be auto, none or an integer, got {self.period_mode!r}")


def parse_service_spec(text: str) -> ServiceTimeModel | None:
    text = text.strip()
    if text == "trace":
        return None
    kind, _, value = text.partition(":")
    if kind == "fixed":
        return fixed_service(float(value))
    if kind == "exponential":
        return exponential_service(float(value))
    raise ConfigError(f"unknown service-time spec {text!r} (use trace, fixed:<s> or exponential:<s>)")


_CONFIG_LAYOUT = {
    "trace": (("input", "trace_input", str), ("dt", "dt", float)),
    "periodicity": (("mode", "period_mode", str), ("max_period", "max_period", int)),
    "train": (
        ("beta1", "beta1", float),
        ("beta2", "beta2", float),
        ("rho", "rho", float),
        ("max_iters", "max_iters", int),
        ("tol", "tol", float),
        ("tune", "tune", bool),
    ),
    "workload": (("pending", "pending", str), ("processing", "processing", str)),
    "sweep": (
        ("scaler", "sweep_scaler", str),
        ("grid", "sweep_grid", tuple),
        ("split", "split", float),
        ("R", "R", int),
        ("delta", "delta", float),
        ("seed", "seed", int),
    ),
}


def parse_config(text: str) -> EndToEndConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values: dict = {}
    for section, fields in _CONFIG_LAYOUT.items():
        if not parser.has_section(section):
            continue
        for key, attr, typ in fields:
            if not parser.has_option(section, key):
                continue
            raw = parser.get(section, key).strip()
            if raw == "":
                continue
            try:
                if typ is bool:
                    values[attr] = raw.lower() in ("1", "true", "yes", "on")
                elif typ is tuple:
                    values[attr] = tuple(float(v) for v in raw.split(",") if v.strip() != "")
                else:
                    values[attr] = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        config = EndToEndConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"incomplete config: {exc}") from exc
    config.validate()
    return config


def serialize_config(config: EndToEndConfig) -> str:
    parser = configparser.ConfigParser()
    data = asdict(config)
    for section, fields in _CONFIG_LAYOUT.items():
        parser.add_section(section)
        for key, attr, typ in fields:
            value = data[attr]
            if value is None:
                continue
            if typ is tuple:
                text = ",".join(f"{v:g}" for v in value)
            elif typ is bool:
                text = "true" if value else "false"
            elif typ is float:
                text = f"{value:g}"
            else:
                text = str(value)
            parser.set(section, key, text)
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def end_to_end(config: EndToEndConfig, out_dir: str | Path, workers: int = 1) -> dict[str, Path]:
    """Run detect-period -> train -> sweep and write the artifact bundle.

    Returns the paths of the written artifacts. Fully reproducible from
    (config, seed): reruns produce byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}

    def stage(name: str):
        class _Stage:
            def __enter__(self_inner):
                return None

            def __exit__(self_inner, exc_type, exc, tb):
                if exc is not None and not isinstance(exc, ConfigError):
                    raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
                return False

        return _Stage()

    with stage("ingest"):
        events = ingest_trace(config.trace_input)
        series = aggregate_qps(events, config.dt)
        train_series = series
        if config.split > 0:
            head = [e for e in events if e.arrival_time < config.split]
            if not head:
                raise ConfigError("train split is empty")
            train_series = aggregate_qps(head, config.dt)

    with stage("detect-period"):
        if config.period_mode == "none":
            period: PeriodInfo | int | None = None
        elif config.period_mode == "auto":
            period = detect_period(train_series, config.max_period)
        else:
            period = int(config.period_mode)
        period_payload = {
            "detected": bool(getattr(period, "detected", period is not None)),
            "period_bins": getattr(period, "period_bins", period),
            "score": getattr(period, "score", 1.0 if period is not None else 0.0),
        }
        artifacts["period"] = out_dir / "period.json"
        artifacts["period"].write_text(json.dumps(period_payload, sort_keys=True))

    with stage("train"):
        base = TrainConfig(
            beta1=config.beta1, beta2=config.beta2, rho=config.rho,
            max_iters=config.max_iters, tol_primal=config.tol, tol_dual=config.tol,
        )
        if config.tune:
            base, _ = tune_betas(train_series, period, base_config=base)
        model = train(train_series, base, period=period)
        artifacts["model"] = out_dir / "model.json"
        save_model(model, artifacts["model"])

    with stage("sweep"):
        spec = SweepSpec(
            scaler_kind=config.sweep_scaler,
            grid=config.sweep_grid,
            trace=tuple(events),
            split_time=config.split,
            pending_model=parse_service_spec(config.pending) or fixed_service(13.0),
            processing_model=parse_service_spec(config.processing),
            model=model if config.sweep_scaler.startswith("robustscaler") else None,
            seed=config.seed,
            R=config.R,
            planning_interval=config.delta,
        )
        rows = run_sweep(spec, workers=workers)
        artifacts["sweep"] = out_dir / "sweep.csv"
        artifacts["sweep"].write_text(sweep_rows_to_csv(rows))

    with stage("report"):
        log = {
            "config": serialize_config(config),
            "n_events": len(events),
            "n_bins": len(series),
            "period": period_payload,
            "train": {"beta1": base.beta1, "beta2": base.beta2, "rho": base.rho},
        }
        artifacts["run_log"] = out_dir / "run_log.json"
        artifacts["run_log"].write_text(json.dumps(log, sort_keys=True, indent=2))
    return artifacts
