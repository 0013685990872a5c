"""Dominant-period detection on aggregated query counts.

Detection is autocorrelation-first: find local ACF maxima above a white-noise
significance band, prefer the smallest lag whose integer multiples are also
significant (the fundamental rather than a harmonic), then cross-check the
winner against the periodogram's dominant frequency. Either check failing
means "no period".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trace import QpsSeries

# two-sided 99% normal quantile for the ACF white-noise band
_Z99 = 2.5758293035489004


@dataclass(frozen=True)
class PeriodInfo:
    detected: bool
    period_bins: int | None = None
    score: float = 0.0

    def __post_init__(self) -> None:
        if self.detected and (self.period_bins is None or self.period_bins < 2):
            raise ValueError("detected periods must have period_bins >= 2")


def _autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased sample ACF at lags 0..max_lag of a zero-mean series."""
    n = x.size
    denom = float(np.dot(x, x))
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for k in range(1, max_lag + 1):
        acf[k] = float(np.dot(x[:-k], x[k:])) / denom
    return acf


def _dominant_periodogram_period(x: np.ndarray) -> float:
    """Period (in bins) of the strongest non-DC periodogram component."""
    power = np.abs(np.fft.rfft(x)) ** 2
    power[0] = 0.0
    k = int(np.argmax(power))
    if k == 0:
        return float("inf")
    return x.size / k


def _periodogram_consistent(lag: int, pg_period: float, max_harmonic: int = 4) -> bool:
    """The candidate lag must be the fundamental of the dominant frequency.

    Accepts pg_period ~ lag / j for a small integer j (the periodogram may
    peak on a harmonic of a non-sinusoidal shape) within a tight tolerance.
    """
    if not np.isfinite(pg_period) or pg_period <= 0:
        return False
    j = round(lag / pg_period)
    if not (1 <= j <= max_harmonic):
        return False
    return abs(j * pg_period - lag) <= max(1.5, 0.05 * lag)


def detect_period(series: QpsSeries, max_period: int | None = None) -> PeriodInfo:
    """Detect a dominant period length (in bins) of a count series.

    Parameters
    ----------
    series : QpsSeries
        Aggregated counts; at least ``2 * max_period`` bins long.
    max_period : int, optional
        Largest candidate lag. Defaults to a third of the series length.

    Returns
    -------
    PeriodInfo
        ``detected=False`` when no lag clears the significance band or the
        ACF winner disagrees with the periodogram.
    """
    counts = np.asarray(series.counts, dtype=float)
    n = counts.size
    if max_period is None:
        max_period = max(2, n // 3)
    if max_period < 2:
        raise ValueError(f"max_period must be >= 2, got {max_period}")
    if n < 2 * max_period:
        raise ValueError(f"series of length {n} is too short for max_period={max_period} (need >= {2 * max_period})")
    if not np.all(np.isfinite(counts)):
        raise ValueError("series contains non-finite values")
    if np.ptp(counts) == 0:
        return PeriodInfo(detected=False)

    # linear detrend so slow drift does not masquerade as long-lag correlation
    t = np.arange(n, dtype=float)
    slope, intercept = np.polyfit(t, counts, 1)
    x = counts - (slope * t + intercept)
    if not np.any(x):
        return PeriodInfo(detected=False)

    lag_cap = min(max_period, (n - 1) // 2)
    acf = _autocorrelation(x, lag_cap)
    band = _Z99 / np.sqrt(n)

    # significant local maxima of the ACF
    candidates: list[int] = []
    for lag in range(2, lag_cap + 1):
        if acf[lag] <= band:
            continue
        left = acf[lag - 1]
        right = acf[lag + 1] if lag + 1 <= lag_cap else -np.inf
        if acf[lag] >= left and acf[lag] >= right:
            candidates.append(lag)
    if not candidates:
        return PeriodInfo(detected=False)

    def hill_climb(lag: int) -> int:
        # broad peaks carry noise wiggles; walk to the neighborhood argmax
        for _ in range(64):
            w = max(2, lag // 50)
            lo, hi = max(2, lag - w), min(lag_cap, lag + w)
            top = lo + int(np.argmax(acf[lo : hi + 1]))
            if top == lag:
                return lag
            lag = top
        return lag

    candidates = sorted({hill_climb(lag) for lag in candidates})

    def multiples_significant(lag: int) -> bool:
        mults = range(2 * lag, lag_cap + 1, lag)
        return all(acf[m] > band for m in mults)

    pg_period = _dominant_periodogram_period(x)
    # lags with testable multiples need them all significant (picks the
    # fundamental over harmonics and crushes chance peaks); lags too long for
    # that are accepted only on a direct periodogram match
    fundamental = [
        lag
        for lag in candidates
        if (2 * lag <= lag_cap and multiples_significant(lag))
        or (2 * lag > lag_cap and abs(pg_period - lag) <= max(1.5, 0.05 * lag))
    ]
    if not fundamental:
        return PeriodInfo(detected=False)
    best = min(fundamental)
    if not _periodogram_consistent(best, pg_period):
        return PeriodInfo(detected=False)

    # the dominant frequency pins the period more sharply than a broad ACF
    # peak; snap to it when it sits on a near-integer fundamental
    j = round(best / pg_period)
    fundamental_pg = j * pg_period
    snapped = round(fundamental_pg)
    if (
        abs(fundamental_pg - snapped) <= 0.25
        and abs(snapped - best) <= max(2.0, 0.04 * best)
        and 2 <= snapped <= lag_cap
    ):
        best = snapped

    score = float(np.clip(acf[best], 0.0, 1.0))
    return PeriodInfo(detected=True, period_bins=int(best), score=score)
