"""Instance-creation planning under stochastic QoS/cost constraints.

Creating the i-th instance at time x trades idle cost against readiness:
push x late and the instance is rarely ready when its query arrives; push it
early and it idles. The three solvers pick x per upcoming arrival index:

  hp    largest x with P(arrival > x + pending) >= 1 - alpha, i.e. the alpha
        quantile of (arrival - pending)
  rt    x with expected residual wait == d - mu_s
  cost  x = now when the idle budget is slack at the origin, else the root of
        expected idle == budget - mu_tau - mu_s

The sequential scheme plans ahead of arrivals: a lookahead threshold kappa
guarantees that by the time an instance is needed its creation was scheduled
at least kappa+1 arrivals in advance, which is what makes the hit-probability
target attainable per query.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .arrivals import (
    ArrivalSampleSet,
    HorizonExhausted,
    PiecewiseConstantIntensity,
    arrival_quantile,
    gamma_quantile,
    sample_arrivals,
)
from .trace import ServiceTimeModel, philox_stream

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_KAPPA_STREAM = 0x6B617070
_GOLDEN64 = 0x9E3779B97F4A7C15


def _round_seed(seed: int, round_index: int) -> int:
    return (seed ^ ((round_index + 1) * _GOLDEN64)) & _MASK64


@dataclass(frozen=True)
class Creation:
    """A single creation decision; ``infeasible`` marks a target unreachable
    even when creating immediately (the time is then clamped to now)."""

    time: float
    infeasible: bool = False


@dataclass(frozen=True)
class PlannerConfig:
    """Mode, target level, and Monte Carlo / scheduling knobs.

    Exactly one of ``alpha`` (hp), ``d`` (rt), ``budget`` (cost) must be set,
    matching ``mode``. ``planning_interval`` selects interval-based rounds
    every delta seconds; ``None`` selects count-based rounds every ``m``
    arrivals. ``kappa_alpha`` is the lookahead miss level used to size kappa
    in rt/cost modes, which have no alpha of their own.
    """

    mode: str
    alpha: float | None = None
    d: float | None = None
    budget: float | None = None
    mu_tau: float = 1.0
    mu_s: float = 1.0
    R: int = 1000
    planning_interval: float | None = 1.0
    m: int = 1
    kappa_policy: str = "local_intensity"
    kappa_alpha: float = 0.1
    latency_compensation: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", self.mode.lower())
        if self.mode not in ("hp", "rt", "cost"):
            raise ValueError(f"mode must be hp, rt or cost, got {self.mode!r}")
        levels = {"hp": self.alpha, "rt": self.d, "cost": self.budget}
        if levels[self.mode] is None:
            raise ValueError(f"mode {self.mode!r} requires its target level to be set")
        others = [v for k, v in levels.items() if k != self.mode and v is not None]
        if others:
            raise ValueError("exactly one of alpha/d/budget may be set, matching the mode")
        if self.mode == "hp" and not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.mode == "rt" and not (self.d > self.mu_s):
            raise ValueError(f"rt mode requires d > mu_s, got d={self.d}, mu_s={self.mu_s}")
        if self.mode == "cost" and not (self.budget > self.mu_tau + self.mu_s):
            raise ValueError(
                f"cost mode requires budget > mu_tau + mu_s, got budget={self.budget}"
            )
        if not (self.mu_tau > 0 and self.mu_s > 0):
            raise ValueError("mu_tau and mu_s must be > 0")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.planning_interval is not None and not (self.planning_interval > 0):
            raise ValueError("planning_interval must be > 0 (or None for count-based rounds)")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.kappa_policy not in ("local_intensity", "global_bound"):
            raise ValueError(f"unknown kappa_policy {self.kappa_policy!r}")
        if not (0.0 < self.kappa_alpha < 1.0):
            raise ValueError("kappa_alpha must be in (0, 1)")
        if self.latency_compensation < 0:
            raise ValueError("latency_compensation must be >= 0")

    @property
    def count_based(self) -> bool:
        return self.planning_interval is None

    @property
    def planning_alpha(self) -> float:
        """Miss level that sizes the kappa lookahead."""
        return self.alpha if self.mode == "hp" else self.kappa_alpha


@dataclass(frozen=True)
class ScalingPlan:
    """Creation times for the contiguous query-index range [first_index, last_index]."""

    creation_times: tuple[float, ...]
    first_index: int
    last_index: int
    computed_at: float
    infeasible: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        n = self.last_index - self.first_index + 1
        if len(self.creation_times) != max(n, 0):
            raise ValueError("creation_times length must match the index range")
        if any(t < self.computed_at for t in self.creation_times):
            raise ValueError("creation times must not precede computed_at")
        if any(b < a for a, b in zip(self.creation_times, self.creation_times[1:])):
            raise ValueError("creation times must be ascending")
        if self.infeasible and len(self.infeasible) != len(self.creation_times):
            raise ValueError("infeasible flags must match creation_times")

    def __len__(self) -> int:
        return len(self.creation_times)


@dataclass
class SequentialState:
    """Mutable bookkeeping of the sequential scheme."""

    N: int = 0
    kappa: int = 0
    planned_through: int = 0
    round_index: int = 0
    outstanding: list[tuple[int, float]] = field(default_factory=list)

    def record_arrivals(self, count: int, new_time: float | None = None) -> None:
        if count < 0:
            raise ValueError("arrival count must be >= 0")
        self.N += count
        self.outstanding = [(i, t) for i, t in self.outstanding if i > self.N]

    @property
    def outstanding_times(self) -> list[float]:
        return sorted(t for _, t in self.outstanding)


@dataclass(frozen=True)
class CalibrationMap:
    """Nominal levels and the levels a planner actually achieved on training data."""

    nominal: np.ndarray
    achieved: np.ndarray

    def __post_init__(self) -> None:
        nom = np.asarray(self.nominal, dtype=float)
        ach = np.asarray(self.achieved, dtype=float)
        if nom.shape != ach.shape or nom.ndim != 1 or nom.size < 1:
            raise ValueError("nominal and achieved must be matching non-empty vectors")
        if np.any(np.diff(nom) <= 0) or np.any(np.diff(ach) <= 0):
            raise ValueError("nominal and achieved levels must be strictly increasing")
        for name, arr in (("nominal", nom), ("achieved", ach)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def calibrate(cal_map: CalibrationMap, desired_actual: float) -> float:
    """Nominal level whose achieved level interpolates to ``desired_actual``."""
    lo, hi = float(cal_map.achieved[0]), float(cal_map.achieved[-1])
    if not (lo <= desired_actual <= hi):
        raise ValueError(
            f"desired level {desired_actual} outside the achieved range [{lo}, {hi}]"
        )
    return float(np.interp(desired_actual, cal_map.achieved, cal_map.nominal))


def sort_and_search(xi: np.ndarray, tau: np.ndarray, target: float) -> float:
    """Root of the empirical expected-wait curve E(x) = mean((tau - (xi - x)_+)_+).

    E is piecewise linear and non-decreasing with slope changing by +1/R past
    each xi - tau and -1/R past each xi (ties process the xi breakpoint
    first). Returns the linear interpolation where E crosses ``target``; when
    the target exceeds the curve's maximum, returns the largest arrival
    sample. Sorting dominates: O(R log R).
    """
    xi = np.asarray(xi, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if xi.ndim != 1 or xi.shape != tau.shape or xi.size < 1:
        raise ValueError("xi and tau must be matching non-empty vectors")
    if target < 0:
        raise ValueError(f"target must be >= 0, got {target}")
    r = xi.size
    values = np.concatenate([xi, xi - tau])
    # tie rank 0 => xi-type processed first at equal positions
    tie_rank = np.concatenate([np.zeros(r), np.ones(r)])
    deltas = np.concatenate([np.full(r, -1.0 / r), np.full(r, 1.0 / r)])
    order = np.lexsort((tie_rank, values))
    v = values[order]
    slopes = np.cumsum(deltas[order])
    curve = np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(v))])
    if target > curve[-1]:
        return float(np.max(xi))
    k = int(np.searchsorted(curve, target, side="left"))
    if k == 0:
        return float(v[0])
    slope = slopes[k - 1]
    if slope <= 0:  # flat segment exactly at the target: leftmost point
        return float(v[k - 1])
    return float(v[k - 1] + (target - curve[k - 1]) / slope)


def _empirical_quantile(values: np.ndarray, p: float) -> float:
    return float(np.quantile(values, p, method="inverted_cdf"))


def solve_hp(
    arrivals: ArrivalSampleSet | PiecewiseConstantIntensity,
    alpha: float,
    i: int,
    now: float | None = None,
    pending: float | ServiceTimeModel | None = None,
) -> Creation:
    """Creation time for the i-th upcoming query at hit-probability target 1 - alpha.

    With Monte Carlo samples this is the empirical alpha quantile of
    (arrival - pending); with an exact intensity and a deterministic pending
    delay it is the exact arrival quantile shifted by the delay. Quantiles in
    the past are clamped to now and flagged infeasible at the target.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if isinstance(arrivals, ArrivalSampleSet):
        xi, tau = arrivals.column(i)
        raw = _empirical_quantile(xi - tau, alpha)
        ref = arrivals.reference_time
    else:
        if now is None or pending is None:
            raise ValueError("exact solve needs `now` and a deterministic `pending` delay")
        delay = pending.mean if isinstance(pending, ServiceTimeModel) else float(pending)
        if isinstance(pending, ServiceTimeModel) and not pending.deterministic:
            raise ValueError("exact solve requires a deterministic pending model")
        raw = arrival_quantile(arrivals, now, i, alpha) - delay
        ref = now
    return Creation(time=max(raw, ref), infeasible=raw < ref)


def solve_rt(samples: ArrivalSampleSet, d: float, mu_s: float, i: int) -> Creation:
    """Creation time meeting the expected response-time threshold d.

    Solves mean((tau - (xi - x)_+)_+) == d - mu_s on the sample paths. If the
    wait at immediate creation already exceeds the slack the decision is
    clamped to now and flagged infeasible. d == mu_s is the zero-wait
    boundary: feasible only when every sampled path has the arrival after the
    pending completes.
    """
    if d < mu_s:
        raise ValueError(f"rt target requires d >= mu_s, got d={d}, mu_s={mu_s}")
    target = d - mu_s
    xi, tau = samples.column(i)
    now = samples.reference_time
    wait_at_now = float(np.mean(np.maximum(tau - (xi - now), 0.0)))
    if wait_at_now > target:
        return Creation(time=now, infeasible=True)
    x_hat = sort_and_search(xi, tau, target)
    return Creation(time=max(x_hat, now), infeasible=False)


def solve_cost(
    samples: ArrivalSampleSet, budget: float, mu_tau: float, mu_s: float, i: int
) -> Creation:
    """Creation time meeting the per-instance lifecycle budget.

    The controllable part of the cost is the expected idle time
    mean((xi - tau - x)_+), a decreasing piecewise-linear curve; creation
    happens immediately when the budget is slack at now, otherwise at the
    root of idle == budget - mu_tau - mu_s.
    """
    slack = budget - mu_tau - mu_s
    if not (slack > 0):
        raise ValueError(f"cost target requires budget > mu_tau + mu_s, got budget={budget}")
    xi, tau = samples.column(i)
    now = samples.reference_time
    points = np.sort(xi - tau)
    n = points.size
    idle_at_now = float(np.mean(np.maximum(points - now, 0.0)))
    if idle_at_now <= slack:
        return Creation(time=now, infeasible=False)
    # idle(x) = sum_{p > x} (p - x) / n, knots at the sorted points
    suffix = np.concatenate([np.cumsum(points[::-1])[::-1], [0.0]])
    counts = n - np.arange(n)
    idle_at_knots = (suffix[:n] - counts * points) / n
    j = int(np.searchsorted(-idle_at_knots, -slack, side="left"))
    if j >= n:
        j = n - 1
    remaining = n - j
    x_root = points[j] - (slack - idle_at_knots[j]) * n / remaining
    return Creation(time=max(float(x_root), now), infeasible=False)


def compute_kappa(
    lambda_bar: float,
    alpha: float,
    pending_model: ServiceTimeModel,
    R: int = 1000,
    seed: int = 0,
    max_kappa: int = 10_000_000,
) -> int:
    """Lookahead threshold: the largest i whose alpha quantile of
    (Gamma(i, 1)/lambda_bar - pending) is still negative.

    Queries at most kappa ahead can still be served in time from the current
    position; planning must stay at least kappa+1 arrivals ahead. For a
    deterministic pending delay the Gamma quantile condition is inverted by
    bisection; otherwise a Monte Carlo scan walks i upward on shared paths
    (cumulative exponential sums keep the scanned quantile monotone).
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not (lambda_bar >= 0):
        raise ValueError(f"lambda_bar must be >= 0, got {lambda_bar}")
    if lambda_bar == 0.0:
        return 0
    if pending_model.deterministic:
        bound = lambda_bar * pending_model.mean
        if gamma_quantile(1, alpha) >= bound:
            return 0
        lo, hi = 1, 2
        while gamma_quantile(hi, alpha) < bound:
            lo, hi = hi, hi * 2
            if hi > max_kappa:
                raise RuntimeError(f"kappa exceeds the cap {max_kappa}")
        while hi - lo > 1:  # invariant: q(lo) < bound <= q(hi)
            mid = (lo + hi) // 2
            if gamma_quantile(mid, alpha) < bound:
                lo = mid
            else:
                hi = mid
        return lo
    rng = philox_stream(seed, _KAPPA_STREAM)
    tau = pending_model.sample(rng, R)
    gamma_paths = np.zeros(R)
    i = 0
    while i < max_kappa:
        i += 1
        gamma_paths = gamma_paths + rng.standard_exponential(R)
        q = _empirical_quantile(gamma_paths / lambda_bar - tau, alpha)
        if q >= 0.0:
            return i - 1
    raise RuntimeError(f"kappa exceeds the cap {max_kappa}")


def _solve_index(
    config: PlannerConfig,
    i: int,
    samples: ArrivalSampleSet | None,
    intensity: PiecewiseConstantIntensity,
    now: float,
    pending_model: ServiceTimeModel,
) -> Creation:
    if config.mode == "hp":
        if samples is None:
            return solve_hp(intensity, config.alpha, i, now=now, pending=pending_model)
        return solve_hp(samples, config.alpha, i)
    if config.mode == "rt":
        return solve_rt(samples, config.d, config.mu_s, i)
    return solve_cost(samples, config.budget, config.mu_tau, config.mu_s, i)


def _refresh_kappa(
    state: SequentialState,
    intensity: PiecewiseConstantIntensity,
    config: PlannerConfig,
    now: float,
    pending_model: ServiceTimeModel,
    seed: int,
    cache: dict | None = None,
) -> None:
    if config.kappa_policy == "local_intensity":
        lam = intensity.rate_at(now) if intensity.start <= now < intensity.end else 0.0
    else:
        lam = intensity.max_rate(from_time=max(now, intensity.start))
    key = (lam, config.planning_alpha)
    if cache is not None and key in cache:
        state.kappa = cache[key]
        return
    kappa = compute_kappa(lam, config.planning_alpha, pending_model, R=config.R, seed=seed)
    if cache is not None:
        cache[key] = kappa
    state.kappa = kappa


def sequential_plan_step(
    state: SequentialState,
    intensity: PiecewiseConstantIntensity,
    config: PlannerConfig,
    now: float,
    pending_model: ServiceTimeModel,
    seed: int = 0,
    max_index: int | None = None,
    _kappa_cache: dict | None = None,
) -> ScalingPlan:
    """One planning round: emit creation times for the next batch of queries.

    Count-based rounds cover indices N+kappa+1 .. N+kappa+m (the first round
    starts at 1); interval-based rounds cover every index whose creation time
    falls inside [now, now + delta). Indices already planned are never
    rescheduled; if kappa grew between rounds the gap is planned as well.
    """
    _refresh_kappa(state, intensity, config, now, pending_model, seed, _kappa_cache)
    state.planned_through = max(state.planned_through, state.N)
    first = state.planned_through + 1
    use_exact = config.mode == "hp" and pending_model.deterministic

    round_seed = _round_seed(seed, state.round_index)
    state.round_index += 1

    samples: ArrivalSampleSet | None = None

    def ensure_samples(min_k: int) -> ArrivalSampleSet:
        nonlocal samples
        if samples is None or samples.n_arrivals < min_k:
            k = max(min_k, 8)
            if samples is not None:
                k = max(k, samples.n_arrivals * 2)
            samples = sample_arrivals(intensity, now, k, config.R, pending_model, round_seed)
        return samples

    times: list[float] = []
    flags: list[bool] = []

    def emit(decision: Creation) -> None:
        # Monte Carlo noise can locally invert the per-index quantiles; the
        # emitted schedule stays ascending via a running maximum
        t = decision.time if not times else max(decision.time, times[-1])
        times.append(t)
        flags.append(decision.infeasible)

    if config.count_based:
        last = state.N + state.kappa + config.m
        if max_index is not None:
            last = min(last, max_index)
        for j in range(first, last + 1):
            i = j - state.N
            smp = None if use_exact else ensure_samples(state.kappa + config.m)
            emit(_solve_index(config, i, smp, intensity, now, pending_model))
    else:
        window_end = now + config.planning_interval + config.latency_compensation
        lo = min(max(now, intensity.start), intensity.end)
        hi = min(max(window_end, intensity.start), intensity.end)
        expected = intensity.cumulative_at(hi) - intensity.cumulative_at(lo)
        guess = state.kappa + int(math.ceil(expected)) + 8
        j = first
        while True:
            if max_index is not None and j > max_index:
                break
            i = j - state.N
            smp = None if use_exact else ensure_samples(max(i, guess))
            decision = _solve_index(config, i, smp, intensity, now, pending_model)
            if decision.time >= window_end:
                break
            emit(decision)
            j += 1
        last = j - 1

    plan = ScalingPlan(
        creation_times=tuple(times),
        first_index=first,
        last_index=first + len(times) - 1,
        computed_at=now,
        infeasible=tuple(flags),
    )
    if config.count_based:
        state.planned_through = max(state.planned_through, last)
    else:
        state.planned_through = max(state.planned_through, plan.last_index)
    state.outstanding.extend(zip(range(plan.first_index, plan.last_index + 1), times))
    return plan


def plan_schedule(
    arrivals: np.ndarray,
    intensity: PiecewiseConstantIntensity,
    config: PlannerConfig,
    pending_model: ServiceTimeModel,
    seed: int = 0,
) -> np.ndarray:
    """Drive the sequential scheme over a known arrival sequence.

    Returns one creation time per query (index-aligned); queries the scheme
    never planned (e.g. past the intensity horizon) get +inf, which the
    simulator treats as reactive creation.
    """
    arrivals = np.asarray(arrivals, dtype=float)
    n = arrivals.size
    if n == 0:
        raise ValueError("cannot plan for an empty arrival sequence")
    if np.any(np.diff(arrivals) < 0):
        raise ValueError("arrivals must be sorted")
    schedule = np.full(n, np.inf)
    state = SequentialState()
    kappa_cache: dict = {}

    def apply(plan: ScalingPlan) -> None:
        for j, t in zip(range(plan.first_index, plan.last_index + 1), plan.creation_times):
            if 1 <= j <= n:
                schedule[j - 1] = t

    try:
        if config.count_based:
            now = 0.0
            while True:
                apply(
                    sequential_plan_step(
                        state, intensity, config, now, pending_model, seed,
                        max_index=n, _kappa_cache=kappa_cache,
                    )
                )
                if state.N + config.m > n:
                    break
                state.record_arrivals(config.m)
                now = float(arrivals[state.N - 1])
        else:
            delta = config.planning_interval
            k = 0
            while k * delta <= arrivals[-1]:
                now = k * delta
                state.N = int(np.searchsorted(arrivals, now, side="right"))
                state.outstanding = [(i, t) for i, t in state.outstanding if i > state.N]
                apply(
                    sequential_plan_step(
                        state, intensity, config, now, pending_model, seed,
                        max_index=n, _kappa_cache=kappa_cache,
                    )
                )
                k += 1
    except HorizonExhausted as exc:
        logger.warning("planning stopped early, remaining queries fall back to reactive: %s", exc)
    return schedule
