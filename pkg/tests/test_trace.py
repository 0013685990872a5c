import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import proscale as ps
from proscale.trace import TraceFormatError


def write(tmp_path, text, name="trace.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestIngest:
    def test_sorts_by_arrival(self, tmp_path):
        path = write(tmp_path, "arrival_s\n10.0\n5.0\n")
        events = ps.ingest_trace(path)
        assert [e.arrival_time for e in events] == [5.0, 10.0]

    def test_negative_arrival_lists_row(self, tmp_path):
        path = write(tmp_path, "arrival_s\n1.0\n-1\n2.0\n")
        with pytest.raises(TraceFormatError, match="row 2"):
            ps.ingest_trace(path)

    def test_parses_durations(self, tmp_path):
        path = write(tmp_path, "arrival_s,processing_s\n0.5,20\n1.5,20\n1.7,20\n")
        events = ps.ingest_trace(path)
        assert [e.arrival_time for e in events] == [0.5, 1.5, 1.7]
        assert all(e.processing_time == 20.0 for e in events)

    def test_empty_trace_rejected(self, tmp_path):
        path = write(tmp_path, "arrival_s\n")
        with pytest.raises(TraceFormatError, match="empty"):
            ps.ingest_trace(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TraceFormatError):
            ps.ingest_trace(tmp_path / "nope.csv")

    def test_garbage_field_lists_rows(self, tmp_path):
        path = write(tmp_path, "arrival_s\n1.0\nabc\nxyz\n")
        with pytest.raises(TraceFormatError, match="2 malformed"):
            ps.ingest_trace(path)

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "whenever\n1.0\n")
        with pytest.raises(TraceFormatError, match="arrival_s"):
            ps.ingest_trace(path)

    def test_roundtrip_identity(self, tmp_path):
        events = [ps.QueryEvent(0.25, 3.5), ps.QueryEvent(1.75, 0.125), ps.QueryEvent(9.0, 2.0)]
        path = tmp_path / "rt.csv"
        ps.write_trace(events, path)
        assert ps.ingest_trace(path) == events

    def test_roundtrip_without_durations(self, tmp_path):
        events = [ps.QueryEvent(0.1), ps.QueryEvent(2.3)]
        path = tmp_path / "rt2.csv"
        ps.write_trace(events, path)
        assert ps.ingest_trace(path) == events


class TestAggregate:
    def test_bin_counting(self):
        events = [ps.QueryEvent(t) for t in (0.5, 1.5, 1.7)]
        series = ps.aggregate_qps(events, 1.0)
        assert series.counts.tolist() == [1, 2]

    def test_single_event_wide_bin(self):
        series = ps.aggregate_qps([ps.QueryEvent(0.5)], 60.0)
        assert series.counts.tolist() == [1]

    def test_four_week_minute_bins(self):
        # 21059 events across 4 weeks at dt=60 -> 40320 bins, count-preserving
        four_weeks = 4 * 7 * 24 * 3600.0
        rng = np.random.default_rng(0)
        times = np.sort(rng.uniform(0.0, four_weeks, size=21057))
        events = [ps.QueryEvent(0.0)] + [ps.QueryEvent(float(t)) for t in times]
        events.append(ps.QueryEvent(four_weeks - 1.0))
        series = ps.aggregate_qps(sorted(events), 60.0)
        assert len(series) == 40320
        assert int(series.counts.sum()) == 21059

    def test_interior_gaps_zero_filled(self):
        series = ps.aggregate_qps([ps.QueryEvent(0.5), ps.QueryEvent(10.5)], 1.0)
        assert len(series) == 11
        assert series.counts[3] == 0

    def test_empty_events_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ps.aggregate_qps([], 1.0)

    def test_bad_step(self):
        with pytest.raises(ValueError, match="step"):
            ps.aggregate_qps([ps.QueryEvent(1.0)], 0.0)

    @given(
        arrivals=st.lists(st.floats(min_value=0.0, max_value=1e4, allow_nan=False), min_size=1, max_size=200),
        step=st.floats(min_value=0.01, max_value=500.0, allow_nan=False),
    )
    @settings(max_examples=60, deadline=None)
    def test_count_preserving(self, arrivals, step):
        events = [ps.QueryEvent(t) for t in sorted(arrivals)]
        series = ps.aggregate_qps(events, step)
        assert int(series.counts.sum()) == len(events)


class TestGeneration:
    def test_constant_rate_count(self):
        events = ps.generate_nhpp_trace(lambda t: 2.0, 1e6, seed=17, grid_step=100.0)
        expected = 2e6
        assert abs(len(events) - expected) < 3 * math.sqrt(expected)

    def test_zero_intensity_empty(self):
        assert ps.generate_nhpp_trace(lambda t: 0.0, 100.0, seed=1) == []

    def test_negative_intensity_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            ps.generate_nhpp_trace(lambda t: -1.0, 10.0, seed=1)

    def test_nonfinite_intensity_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            ps.generate_nhpp_trace(lambda t: float("nan"), 10.0, seed=1)

    def test_deterministic_per_seed(self):
        a = ps.generate_nhpp_trace(lambda t: 1.5, 1000.0, seed=5)
        b = ps.generate_nhpp_trace(lambda t: 1.5, 1000.0, seed=5)
        assert a == b
        c = ps.generate_nhpp_trace(lambda t: 1.5, 1000.0, seed=6)
        assert a != c

    def test_interarrivals_exponential_ks(self):
        # inter-arrival times of a unit-rate process vs Exp(1), alpha = 0.01
        lam = 1.0
        events = ps.generate_nhpp_trace(lambda t: lam, 10_500.0, seed=99)
        gaps = np.diff([e.arrival_time for e in events[:10_001]])
        assert len(gaps) == 10_000
        result = stats.kstest(gaps, "expon", args=(0.0, 1.0 / lam))
        assert result.pvalue > 0.01

    def test_daily_peak_intensity_shape(self):
        # seven daily peaks: midday mass dominates the day edges in every day
        day = 86400.0

        def lam(t):
            u = (t % day) / day
            return 4.0**10 * u**10 * (1 - u) ** 10 + 0.1

        events = ps.generate_nhpp_trace(lam, 7 * day, seed=4, grid_step=60.0)
        arr = np.array([e.arrival_time for e in events])
        for d in range(7):
            mid = np.count_nonzero((arr >= d * day + 0.4 * day) & (arr < d * day + 0.6 * day))
            edge = np.count_nonzero((arr >= d * day) & (arr < d * day + 0.2 * day))
            assert mid > 3 * edge

    def test_processing_model_attached(self):
        events = ps.generate_nhpp_trace(
            lambda t: 1.0, 200.0, seed=8, processing_model=ps.fixed_service(7.5)
        )
        assert all(e.processing_time == 7.5 for e in events)


class TestServiceTimeModel:
    def test_kinds_validate(self):
        with pytest.raises(ValueError):
            ps.ServiceTimeModel("weibull", mean_s=1.0)
        with pytest.raises(ValueError):
            ps.fixed_service(0.0)
        with pytest.raises(ValueError):
            ps.empirical_service([])
        with pytest.raises(ValueError):
            ps.empirical_service([1.0, -2.0])

    def test_empirical_mean_and_resampling(self):
        model = ps.empirical_service([2.0, 4.0])
        assert model.mean == 3.0
        rng = np.random.default_rng(0)
        draws = model.sample(rng, 1000)
        assert set(np.unique(draws)) == {2.0, 4.0}

    def test_fixed_is_deterministic(self):
        model = ps.fixed_service(13.0)
        assert model.deterministic
        assert np.all(model.sample(np.random.default_rng(0), 5) == 13.0)


def test_query_event_validation():
    with pytest.raises(ValueError):
        ps.QueryEvent(-1.0)
    with pytest.raises(ValueError):
        ps.QueryEvent(1.0, 0.0)
