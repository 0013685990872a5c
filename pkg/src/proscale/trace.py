"""Query-trace ingestion, QPS aggregation, service-time models, and synthetic
trace generation.

A trace is a sorted sequence of :class:`QueryEvent` on a single epoch-relative
clock (seconds, starting at 0). The on-disk format is CSV with header
``arrival_s`` and an optional second column ``processing_s``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed or violates basic invariants."""


def philox_stream(seed: int, stream: int = 0, substream: int = 0) -> np.random.Generator:
    """Counter-based generator for a (seed, stream, substream) triple.

    Distinct triples yield statistically independent streams, so callers can
    carve off reproducible sub-generators without coordinating draw counts.
    """
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, substream & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True, order=True)
class QueryEvent:
    """A single query arrival, optionally carrying its processing duration."""

    arrival_time: float
    processing_time: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.arrival_time) or self.arrival_time < 0:
            raise ValueError(f"arrival_time must be finite and >= 0, got {self.arrival_time}")
        if self.processing_time is not None and not (
            math.isfinite(self.processing_time) and self.processing_time > 0
        ):
            raise ValueError(f"processing_time must be finite and > 0, got {self.processing_time}")


@dataclass(frozen=True)
class QpsSeries:
    """Per-bin query counts at a fixed step.

    ``counts[t]`` holds the number of arrivals in ``[epoch + t*step,
    epoch + (t+1)*step)``.
    """

    counts: np.ndarray
    step: float
    epoch: float = 0.0

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("counts must be a non-empty 1-d array")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if not (self.step > 0):
            raise ValueError(f"step must be > 0, got {self.step}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return int(self.counts.size)

    @property
    def end(self) -> float:
        return self.epoch + len(self) * self.step


@dataclass(frozen=True)
class ServiceTimeModel:
    """Distribution of positive durations (processing or instance pending times).

    kind:
        ``fixed``        every draw equals ``mean``
        ``exponential``  exponential with the given mean
        ``empirical``    resampling with replacement from ``samples``
    """

    kind: str
    mean_s: float | None = None
    samples: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "exponential", "empirical"):
            raise ValueError(f"unknown service-time kind {self.kind!r}")
        if self.kind == "empirical":
            if self.samples is None or len(self.samples) == 0:
                raise ValueError("empirical model requires a non-empty sample list")
            samples = np.asarray(self.samples, dtype=float)
            if np.any(~np.isfinite(samples)) or np.any(samples <= 0):
                raise ValueError("empirical samples must be finite and > 0")
            samples.setflags(write=False)
            object.__setattr__(self, "samples", samples)
            object.__setattr__(self, "mean_s", float(samples.mean()))
        else:
            if self.mean_s is None or not (self.mean_s > 0):
                raise ValueError(f"mean_s must be > 0, got {self.mean_s}")

    @property
    def mean(self) -> float:
        return float(self.mean_s)

    @property
    def deterministic(self) -> bool:
        return self.kind == "fixed"

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(size, self.mean_s, dtype=float)
        if self.kind == "exponential":
            return rng.exponential(self.mean_s, size)
        return rng.choice(self.samples, size=size, replace=True)


def fixed_service(mean_s: float) -> ServiceTimeModel:
    return ServiceTimeModel("fixed", mean_s=mean_s)


def exponential_service(mean_s: float) -> ServiceTimeModel:
    return ServiceTimeModel("exponential", mean_s=mean_s)


def empirical_service(samples: Sequence[float]) -> ServiceTimeModel:
    return ServiceTimeModel("empirical", samples=np.asarray(samples, dtype=float))


def ingest_trace(path: str | Path, columns: tuple[str, str] = ("arrival_s", "processing_s")) -> list[QueryEvent]:
    """Read a CSV trace and return its events sorted by arrival time.

    Malformed rows (unparseable fields, negative arrivals, non-positive
    durations) are rejected in one pass; the raised error lists every
    offending data-row number (1-based, header excluded).
    """
    path = Path(path)
    arrival_col, processing_col = columns
    events: list[QueryEvent] = []
    bad_rows: list[tuple[int, str]] = []
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or arrival_col not in reader.fieldnames:
                raise TraceFormatError(f"{path}: missing required column {arrival_col!r}")
            has_processing = processing_col in reader.fieldnames
            for row_no, row in enumerate(reader, start=1):
                try:
                    arrival = float(row[arrival_col])
                    processing = None
                    if has_processing and row.get(processing_col) not in (None, ""):
                        processing = float(row[processing_col])
                    events.append(QueryEvent(arrival, processing))
                except (TypeError, ValueError) as exc:
                    bad_rows.append((row_no, str(exc)))
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc
    if bad_rows:
        listing = "; ".join(f"row {n}: {msg}" for n, msg in bad_rows[:20])
        raise TraceFormatError(f"{path}: {len(bad_rows)} malformed row(s): {listing}")
    if not events:
        raise TraceFormatError(f"{path}: trace is empty")
    events.sort(key=lambda e: e.arrival_time)
    return events


def write_trace(events: Iterable[QueryEvent], path: str | Path) -> None:
    """Write events in the same CSV format that :func:`ingest_trace` reads."""
    events = list(events)
    with_processing = any(e.processing_time is not None for e in events)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arrival_s", "processing_s"] if with_processing else ["arrival_s"])
        for e in events:
            if with_processing:
                writer.writerow([repr(e.arrival_time), "" if e.processing_time is None else repr(e.processing_time)])
            else:
                writer.writerow([repr(e.arrival_time)])


def aggregate_qps(events: Sequence[QueryEvent], step: float, epoch: float = 0.0) -> QpsSeries:
    """Bin arrivals into fixed-width counts: ``counts[t] = #{i : t*step <= xi_i - epoch < (t+1)*step}``.

    Bins run from ``epoch`` through the bin containing the last event, so
    interior gaps show up as zero counts.
    """
    if not (step > 0):
        raise ValueError(f"step must be > 0, got {step}")
    if len(events) == 0:
        raise ValueError("cannot aggregate an empty event list")
    arrivals = np.array([e.arrival_time for e in events], dtype=float)
    offsets = arrivals - epoch
    if np.any(offsets < 0):
        raise ValueError("events precede the aggregation epoch")
    bins = np.floor(offsets / step).astype(np.int64)
    n_bins = int(bins.max()) + 1
    counts = np.bincount(bins, minlength=n_bins)
    return QpsSeries(counts=counts, step=step, epoch=epoch)


def generate_nhpp_trace(
    intensity: Callable[[float], float],
    horizon: float,
    seed: int,
    grid_step: float = 1.0,
    processing_model: ServiceTimeModel | None = None,
) -> list[QueryEvent]:
    """Sample arrivals on ``[0, horizon)`` from a non-homogeneous Poisson process.

    Uses time rescaling: the cumulative intensity is accumulated on a uniform
    grid (midpoint rule, exact for rates constant on each grid cell), unit-rate
    exponential sums are drawn, and each sum is mapped back through the
    piecewise-linear inverse of the cumulative. Deterministic for a fixed seed.
    """
    if not (horizon > 0):
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if not (grid_step > 0):
        raise ValueError(f"grid_step must be > 0, got {grid_step}")
    n_cells = max(1, int(math.ceil(horizon / grid_step)))
    edges = np.minimum(np.arange(n_cells + 1, dtype=float) * grid_step, horizon)
    mids = 0.5 * (edges[:-1] + edges[1:])
    rates = np.asarray([intensity(float(t)) for t in mids], dtype=float)
    if np.any(~np.isfinite(rates)):
        raise ValueError("intensity is non-finite on the sampling grid")
    if np.any(rates < 0):
        raise ValueError("intensity must be non-negative")
    cum = np.concatenate([[0.0], np.cumsum(rates * np.diff(edges))])
    total_mass = float(cum[-1])

    rng = philox_stream(seed, stream=0x7261636512)  # trace-generation stream
    masses: list[np.ndarray] = []
    drawn = 0.0
    # draw exponential(1) increments in chunks until the total mass is exceeded
    chunk = int(total_mass + 6.0 * math.sqrt(total_mass + 1.0) + 64)
    while drawn <= total_mass:
        incr = rng.standard_exponential(chunk)
        csum = drawn + np.cumsum(incr)
        masses.append(csum)
        drawn = float(csum[-1])
    mass = np.concatenate(masses)
    mass = mass[mass < total_mass]

    # invert the piecewise-linear cumulative; guard zero-rate cells
    idx = np.searchsorted(cum, mass, side="right") - 1
    idx = np.clip(idx, 0, n_cells - 1)
    cell_rates = rates[idx]
    arrivals = np.where(
        cell_rates > 0,
        edges[idx] + (mass - cum[idx]) / np.where(cell_rates > 0, cell_rates, 1.0),
        edges[idx],
    )
    arrivals = np.sort(arrivals)

    processing: np.ndarray | None = None
    if processing_model is not None:
        proc_rng = philox_stream(seed, stream=0x7072636512)
        processing = processing_model.sample(proc_rng, arrivals.size)
    return [
        QueryEvent(float(a), None if processing is None else float(processing[k]))
        for k, a in enumerate(arrivals)
    ]
