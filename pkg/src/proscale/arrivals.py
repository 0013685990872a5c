"""Probabilistic machinery over a predicted piecewise-constant intensity.

Everything here rests on time rescaling: mapping a non-homogeneous Poisson
process through its cumulative intensity turns it into a unit-rate process,
so the i-th arrival corresponds to a Gamma(i, 1) mass. Integration and its
inverse are exact for piecewise-constant rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from .trace import ServiceTimeModel, philox_stream

_MASK64 = (1 << 64) - 1
_XI_BLOCK = 0  # counter block for arrival draws within a row stream
_TAU_BLOCK = 1  # counter block for pending draws within a row stream


class HorizonExhausted(RuntimeError):
    """The requested probability mass lies beyond the intensity's horizon."""


@dataclass(frozen=True)
class PiecewiseConstantIntensity:
    """A rate function that is constant on each cell of a breakpoint grid.

    ``rates[j]`` applies on ``[breakpoints[j], breakpoints[j+1])``; the
    function is undefined outside ``[breakpoints[0], breakpoints[-1])``.
    """

    breakpoints: np.ndarray
    rates: np.ndarray

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        if bp.ndim != 1 or rates.ndim != 1 or bp.size != rates.size + 1:
            raise ValueError("need len(breakpoints) == len(rates) + 1")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if np.any(~np.isfinite(rates)) or np.any(rates < 0):
            raise ValueError("rates must be finite and >= 0")
        # Lambda at each breakpoint, cached for O(log n) queries
        cum = np.concatenate([[0.0], np.cumsum(rates * np.diff(bp))])
        for name, arr in (("breakpoints", bp), ("rates", rates), ("_cum", cum)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def constant(cls, rate: float, start: float, end: float) -> "PiecewiseConstantIntensity":
        return cls(np.array([start, end]), np.array([rate]))

    @classmethod
    def from_callable(
        cls, fn: Callable[[float], float], start: float, end: float, step: float
    ) -> "PiecewiseConstantIntensity":
        """Discretize a callable rate on a uniform grid (midpoint values)."""
        n = max(1, int(np.ceil((end - start) / step)))
        edges = np.minimum(start + np.arange(n + 1, dtype=float) * step, end)
        mids = 0.5 * (edges[:-1] + edges[1:])
        return cls(edges, np.array([fn(float(t)) for t in mids]))

    @property
    def start(self) -> float:
        return float(self.breakpoints[0])

    @property
    def end(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def total_mass(self) -> float:
        return float(self._cum[-1])

    def rate_at(self, t: float) -> float:
        if not (self.start <= t < self.end):
            raise ValueError(f"t={t} outside the intensity support [{self.start}, {self.end})")
        j = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return float(self.rates[j])

    def max_rate(self, from_time: float | None = None) -> float:
        if from_time is None:
            return float(self.rates.max())
        j = max(0, int(np.searchsorted(self.breakpoints, from_time, side="right")) - 1)
        return float(self.rates[j:].max())

    def cumulative_at(self, t: float | np.ndarray) -> np.ndarray | float:
        """Integral of the rate from the first breakpoint to t (exact)."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.start) or np.any(t_arr > self.end):
            raise ValueError("time outside the intensity support")
        j = np.clip(np.searchsorted(self.breakpoints, t_arr, side="right") - 1, 0, self.rates.size - 1)
        out = self._cum[j] + self.rates[j] * (t_arr - self.breakpoints[j])
        return float(out) if np.isscalar(t) else out

    def inverse_cumulative(self, mass: float | np.ndarray) -> np.ndarray | float:
        """Smallest t with cumulative_at(t) == mass; exact per linear piece."""
        m = np.asarray(mass, dtype=float)
        if np.any(m < 0):
            raise ValueError("mass must be >= 0")
        if np.any(m > self.total_mass):
            raise HorizonExhausted(
                f"requested mass up to {float(np.max(m)):.6g} exceeds the available "
                f"{self.total_mass:.6g} before the horizon at t={self.end:.6g}"
            )
        j = np.searchsorted(self._cum[1:], m, side="left")
        j = np.clip(j, 0, self.rates.size - 1)
        rate = self.rates[j]
        # zero-rate cells are flat in the cumulative: land on their left edge
        out = np.where(
            rate > 0,
            self.breakpoints[j] + (m - self._cum[j]) / np.where(rate > 0, rate, 1.0),
            self.breakpoints[j],
        )
        return float(out) if np.isscalar(mass) else out


@dataclass(frozen=True)
class CumulativeIntensity:
    """Integrated intensity anchored at a reference time (``value(reference_time) == 0``)."""

    breakpoints: np.ndarray
    cumulative: np.ndarray
    reference_time: float

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=float)
        cum = np.asarray(self.cumulative, dtype=float)
        if bp.shape != cum.shape or bp.ndim != 1 or bp.size < 2:
            raise ValueError("breakpoints and cumulative must be matching 1-d arrays")
        if np.any(np.diff(bp) <= 0) or np.any(np.diff(cum) < 0):
            raise ValueError("breakpoints must ascend and cumulative must be non-decreasing")
        if not (bp[0] <= self.reference_time <= bp[-1]):
            raise ValueError("reference_time must lie within the breakpoints")
        ref_val = float(np.interp(self.reference_time, bp, cum))
        cum = cum - ref_val
        for name, arr in (("breakpoints", bp), ("cumulative", cum)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_intensity(
        cls, intensity: PiecewiseConstantIntensity, reference_time: float
    ) -> "CumulativeIntensity":
        return cls(intensity.breakpoints, intensity._cum, reference_time)

    def value(self, t: float) -> float:
        if not (self.breakpoints[0] <= t <= self.breakpoints[-1]):
            raise ValueError("time outside the cumulative support")
        return float(np.interp(t, self.breakpoints, self.cumulative))


def integrate(intensity: PiecewiseConstantIntensity, from_time: float, to_time: float) -> float:
    """Exact integral of a piecewise-constant rate over [from_time, to_time]."""
    if from_time > to_time:
        raise ValueError(f"from_time {from_time} exceeds to_time {to_time}")
    if from_time == to_time:
        return 0.0
    return float(intensity.cumulative_at(to_time) - intensity.cumulative_at(from_time))


def inverse_integrate(intensity: PiecewiseConstantIntensity, from_time: float, mass: float) -> float:
    """Smallest t with integrate(intensity, from_time, t) == mass."""
    if mass < 0:
        raise ValueError(f"mass must be >= 0, got {mass}")
    if mass == 0:
        return from_time
    base = float(intensity.cumulative_at(from_time))
    return float(intensity.inverse_cumulative(base + mass))


@lru_cache(maxsize=65536)
def gamma_quantile(shape: int, p: float) -> float:
    """p-quantile of Gamma(shape, scale=1), shape a positive integer.

    Inverts the regularized lower incomplete gamma by bracketed root finding
    (absolute tolerance 1e-9).
    """
    if shape < 1 or int(shape) != shape:
        raise ValueError(f"shape must be a positive integer, got {shape}")
    if not (0.0 < p < 1.0):
        raise ValueError(f"p must be in (0, 1), got {p}")
    shape = int(shape)

    def cdf_gap(q: float) -> float:
        return float(special.gammainc(shape, q)) - p

    hi = shape + 10.0 * np.sqrt(shape) + 10.0
    while cdf_gap(hi) < 0.0:
        hi *= 2.0
    return float(optimize.brentq(cdf_gap, 0.0, hi, xtol=1e-9))


@dataclass(frozen=True)
class ArrivalSampleSet:
    """Monte Carlo draws of the next K arrivals (rows are independent paths).

    ``samples[r, i-1]`` is the i-th arrival time after ``reference_time`` on
    path r; ``pending[r, i-1]`` the matching instance pending time.
    """

    samples: np.ndarray
    pending: np.ndarray
    seed: int
    reference_time: float = 0.0

    def __post_init__(self) -> None:
        xs = np.asarray(self.samples, dtype=float)
        taus = np.asarray(self.pending, dtype=float)
        if xs.shape != taus.shape or xs.ndim != 2:
            raise ValueError("samples and pending must be matching R x K matrices")
        if np.any(np.diff(xs, axis=1) <= 0):
            raise ValueError("arrival times must be strictly increasing within each row")
        if np.any(xs < self.reference_time):
            raise ValueError("arrival times must not precede the reference time")
        if np.any(taus <= 0):
            raise ValueError("pending times must be > 0")
        xs.setflags(write=False)
        taus.setflags(write=False)
        object.__setattr__(self, "samples", xs)
        object.__setattr__(self, "pending", taus)

    @property
    def n_rows(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_arrivals(self) -> int:
        return int(self.samples.shape[1])

    def column(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Arrival and pending draws for the i-th upcoming query (1-based)."""
        if not (1 <= i <= self.n_arrivals):
            raise ValueError(f"arrival index {i} outside 1..{self.n_arrivals}")
        return self.samples[:, i - 1], self.pending[:, i - 1]


def _row_stream(seed: int, row: int, block: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, row & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, block & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class _KeyedStreams:
    """One reusable generator repositioned per (row, block) counter stream.

    Equivalent to constructing a fresh Philox per stream (verified draw-level
    identical) but without the per-object setup cost, which dominates when a
    planning round touches a thousand rows.
    """

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._bg = np.random.Philox(key=np.array([self._seed, 0], dtype=np.uint64))
        self._generator = np.random.Generator(self._bg)
        self._template = self._bg.state

    def at(self, row: int, block: int) -> np.random.Generator:
        state = dict(self._template)
        state["state"] = {
            "counter": np.array([0, 0, block & _MASK64, 0], dtype=np.uint64),
            "key": np.array([self._seed, row & _MASK64], dtype=np.uint64),
        }
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        self._bg.state = state
        return self._generator


def sample_arrivals(
    intensity: PiecewiseConstantIntensity,
    now: float,
    K: int,
    R: int,
    pending_model: ServiceTimeModel,
    seed: int,
) -> ArrivalSampleSet:
    """Draw R independent paths of the first K arrivals after ``now``.

    Each path maps cumulative unit-exponential sums through the inverse
    cumulative intensity. Per-row keyed counter streams (with separate blocks
    for arrival and pending draws) make every (row, index) sample stable under
    changes of R or K: enlarging either only appends new draws.
    """
    if K < 1 or R < 1:
        raise ValueError(f"K and R must be >= 1, got K={K}, R={R}")
    base = float(intensity.cumulative_at(now))
    budget = intensity.total_mass - base
    streams = _KeyedStreams(seed)
    mass = np.empty((R, K))
    for r in range(R):
        mass[r] = streams.at(r, _XI_BLOCK).standard_exponential(K)
    np.cumsum(mass, axis=1, out=mass)
    worst = float(mass[:, -1].max())
    if worst > budget:
        raise HorizonExhausted(
            f"a path needs mass {worst:.6g} for {K} arrivals but only "
            f"{budget:.6g} remains before the horizon at t={intensity.end:.6g}"
        )
    samples = np.asarray(intensity.inverse_cumulative(base + mass.ravel())).reshape(R, K)
    if pending_model.deterministic:
        pending = np.full((R, K), pending_model.mean)
    else:
        pending = np.empty((R, K))
        for r in range(R):
            pending[r] = pending_model.sample(streams.at(r, _TAU_BLOCK), K)
    return ArrivalSampleSet(samples=samples, pending=pending, seed=seed, reference_time=now)


def arrival_quantile(intensity: PiecewiseConstantIntensity, now: float, i: int, p: float) -> float:
    """Exact p-quantile of the i-th arrival after ``now`` under the NHPP.

    Time rescaling makes the i-th arrival's mass Gamma(i, 1)-distributed, so
    the quantile is the inverse integrated intensity at the Gamma quantile.
    """
    if i < 1:
        raise ValueError(f"arrival index must be >= 1, got {i}")
    return inverse_integrate(intensity, now, gamma_quantile(i, p))
