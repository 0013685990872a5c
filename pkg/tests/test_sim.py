import numpy as np
import pytest

import proscale as ps
from proscale.arrivals import PiecewiseConstantIntensity
from proscale.planner import PlannerConfig
from proscale.sim import (
    AdaptiveBackupPool,
    BackupPool,
    RobustScaler,
    ScheduledCreations,
    compute_metrics,
    make_scaler,
    replay,
)


def events_at(arrivals, processing=20.0):
    return [ps.QueryEvent(float(t), processing) for t in arrivals]


def poisson_trace(rate, horizon, seed, processing=None):
    return ps.generate_nhpp_trace(lambda t: rate, horizon, seed=seed, processing_model=processing)


class TestReplayBranches:
    def test_ready_pending_reactive_closed_forms(self):
        events = events_at([10.0, 30.0, 50.0])
        result = replay(events, ScheduledCreations([5.0, 29.0, np.inf]), ps.fixed_service(3.0))
        records = list(result.trace.events())
        assert [(e.rt, e.cost, e.hit) for e in records] == [
            (20.0, 25.0, True),     # ready: x + tau = 8 <= 10
            (22.0, 23.0, False),    # pending: waits 29 + 3 - 30 = 2
            (23.0, 23.0, False),    # reactive: never scheduled
        ]

    def test_late_schedule_is_canceled_and_reactive(self):
        events = events_at([10.0])
        result = replay(events, ScheduledCreations([12.0]), ps.fixed_service(3.0))
        event = next(result.trace.events())
        assert not event.hit and event.rt == 23.0 and event.cost == 23.0
        assert result.trace.canceled == 1
        assert result.trace.created_reactive == 1

    def test_per_event_identity_closed_forms(self):
        events = poisson_trace(0.8, 2000.0, seed=12, processing=ps.exponential_service(15.0))
        result = replay(events, BackupPool(3), ps.exponential_service(5.0), seed=4)
        tr = result.trace
        wait = np.maximum(tr.pending - np.maximum(tr.arrival - tr.creation, 0.0), 0.0)
        assert np.array_equal(tr.rt, tr.processing + wait)
        assert np.array_equal(
            tr.cost, np.maximum(tr.arrival - tr.creation - tr.pending, 0.0) + tr.pending + tr.processing
        )
        assert np.array_equal(tr.hit, tr.creation + tr.pending <= tr.arrival)


class TestBackupPool:
    def test_b0_is_pure_reactive(self):
        events = poisson_trace(0.5, 3000.0, seed=1, processing=ps.exponential_service(20.0))
        result = replay(events, BackupPool(0), ps.fixed_service(13.0), seed=7)
        assert result.hit_rate == 0.0
        assert result.relative_cost == 1.0

    def test_large_pool_hits_everything(self):
        events = [e for e in poisson_trace(0.5, 4000.0, seed=2, processing=ps.exponential_service(20.0))
                  if e.arrival_time > 15.0]
        result = replay(events, BackupPool(400), ps.fixed_service(13.0), seed=7)
        assert result.hit_rate >= 0.99

    def test_pareto_monotonicity(self):
        events = poisson_trace(0.5, 2000.0, seed=3, processing=ps.exponential_service(20.0))
        prev_hit, prev_cost = -1.0, -1.0
        for B in range(0, 9):
            r = replay(events, BackupPool(B), ps.fixed_service(13.0), seed=7)
            assert r.hit_rate >= prev_hit
            assert r.total_cost >= prev_cost
            prev_hit, prev_cost = r.hit_rate, r.total_cost

    def test_pool_size_validation(self):
        with pytest.raises(ValueError):
            BackupPool(-1)
        with pytest.raises(ValueError):
            BackupPool(1.5)


class TestAdaptiveBackupPool:
    def test_target_arithmetic(self):
        # 120 queries within the last 600 s at multiplier 10 -> ceil(0.2 * 10) = 2
        adapter = AdaptiveBackupPool(10.0)
        arrivals = np.linspace(0.0, 599.0, 120)
        assert adapter.target(arrivals, 600.0) == 2

    def test_cold_start_uses_available_history(self):
        adapter = AdaptiveBackupPool(10.0, reset_interval=600.0)
        arrivals = np.linspace(0.0, 299.0, 60)
        # at t=300 only 300 s of history exist: qps = 60/300 = 0.2
        assert adapter.target(arrivals, 300.0) == 2

    def test_tracks_load_better_than_fixed_pool_on_bursts(self):
        # piecewise load: quiet then busy; AdapBP should adapt pool size
        lam = lambda t: 0.05 if t < 3600 else 2.0
        events = ps.generate_nhpp_trace(lam, 7200.0, seed=5, processing_model=ps.exponential_service(20.0))
        adaptive = replay(events, AdaptiveBackupPool(30.0), ps.fixed_service(13.0), seed=9)
        assert 0.0 < adaptive.hit_rate < 1.0

    def test_multiplier_validation(self):
        with pytest.raises(ValueError):
            AdaptiveBackupPool(-2.0)


class TestMetrics:
    def test_half_hits(self):
        events = events_at([10.0, 20.0])
        result = replay(events, ScheduledCreations([2.0, 19.5]), ps.fixed_service(3.0))
        assert result.hit_rate == 0.5

    def test_all_reactive_relative_cost_one(self):
        events = events_at([1.0, 2.0, 3.0])
        result = replay(events, ScheduledCreations([np.inf] * 3), ps.fixed_service(3.0))
        assert result.relative_cost == 1.0

    def test_nearest_rank_quantiles(self):
        events = events_at(np.arange(1.0, 11.0), processing=1.0)
        schedule = np.array([t - 10.0 for t in np.arange(1.0, 11.0)])  # all hits
        result = replay(events, ScheduledCreations(schedule), ps.fixed_service(1.0))
        # rt values are exactly the processing times; build a spread via processing
        events2 = [ps.QueryEvent(float(t), float(t)) for t in np.arange(1.0, 11.0)]
        result2 = replay(events2, ScheduledCreations(schedule), ps.fixed_service(1.0))
        assert result2.rt_quantiles["75"] == 8.0  # ceil(0.75 * 10) = 8th order stat
        assert result2.rt_quantiles["99"] == 10.0
        assert result2.rt_quantiles["99.9"] == 10.0

    def test_windowed_variance_window_of_50(self):
        rng = np.random.default_rng(0)
        arrivals = np.cumsum(rng.exponential(1.0, 250))
        events = [ps.QueryEvent(float(t), 20.0) for t in arrivals]
        result = replay(events, BackupPool(2), ps.exponential_service(5.0), seed=1)
        rt = result.trace.rt
        means = rt[:250].reshape(5, 50).mean(axis=1)
        assert result.rt_windowed_variance == pytest.approx(float(np.var(means)))

    def test_windowed_variance_needs_two_windows(self):
        events = events_at([1.0, 2.0])
        result = replay(events, BackupPool(0), ps.fixed_service(1.0))
        assert np.isnan(result.rt_windowed_variance)

    def test_json_round_trip(self):
        events = events_at([1.0, 2.0])
        result = replay(events, BackupPool(0), ps.fixed_service(1.0))
        import json

        payload = json.loads(result.to_json())
        assert payload["hit_rate"] == 0.0
        assert payload["rt_windowed_variance"] is None


class TestConservation:
    def test_every_query_consumes_one_instance(self):
        events = poisson_trace(1.0, 1500.0, seed=8, processing=ps.exponential_service(10.0))
        config = PlannerConfig(mode="hp", alpha=0.3, mu_tau=5.0, mu_s=10.0, planning_interval=1.0)
        intensity = PiecewiseConstantIntensity.constant(1.0, 0.0, 4000.0)
        result = replay(events, RobustScaler(config, intensity), ps.fixed_service(5.0), seed=8)
        tr = result.trace
        assert tr.created_scheduled + tr.created_reactive == len(events)
        # canceled schedules are counted but never consume an instance
        assert tr.canceled == int(np.count_nonzero(np.isfinite(tr.creation) & (tr.creation > tr.arrival)))


class TestDeterminism:
    def test_bit_identical_results(self):
        events = poisson_trace(1.0, 800.0, seed=10, processing=ps.exponential_service(10.0))
        config = PlannerConfig(mode="rt", d=12.0, mu_tau=5.0, mu_s=10.0, planning_interval=2.0, R=200)
        intensity = PiecewiseConstantIntensity.constant(1.0, 0.0, 2500.0)
        pend = ps.exponential_service(5.0)
        a = replay(events, RobustScaler(config, intensity), pend, seed=13)
        b = replay(events, RobustScaler(config, intensity), pend, seed=13)
        assert a.to_json() == b.to_json()
        assert np.array_equal(a.trace.creation, b.trace.creation)
        assert np.array_equal(a.trace.pending, b.trace.pending)
        assert np.array_equal(a.trace.rt, b.trace.rt)


class TestAdapterPlumbing:
    def test_make_scaler_kinds(self):
        assert make_scaler("bp", B=3).kind == "backup_pool"
        assert make_scaler("adaptive_backup_pool", multiplier=2.0).kind == "adaptive_backup_pool"
        config = PlannerConfig(mode="hp", alpha=0.1, mu_tau=1.0, mu_s=1.0)
        intensity = PiecewiseConstantIntensity.constant(1.0, 0.0, 100.0)
        assert make_scaler("robustscaler_hp", config=config, intensity=intensity).kind == "robustscaler_hp"
        with pytest.raises(ValueError):
            make_scaler("mystery")

    def test_scaler_fault_propagates_with_context(self):
        class Broken:
            kind = "broken"

            def schedule(self, arrivals, pending_model, seed):
                raise KeyError("boom")

        with pytest.raises(RuntimeError, match="broken"):
            replay(events_at([1.0]), Broken(), ps.fixed_service(1.0))

    def test_wrong_schedule_length(self):
        with pytest.raises(RuntimeError, match="1 entries for 2 queries"):
            replay(events_at([1.0, 2.0]), ScheduledCreations([1.0]), ps.fixed_service(1.0))


class TestReplayValidation:
    def test_empty_trace(self):
        with pytest.raises(ValueError, match="empty"):
            replay([], BackupPool(0), ps.fixed_service(1.0))

    def test_unsorted_events(self):
        bad = [ps.QueryEvent(5.0, 1.0), ps.QueryEvent(1.0, 1.0)]
        with pytest.raises(ValueError, match="sorted"):
            replay(bad, BackupPool(0), ps.fixed_service(1.0))

    def test_missing_processing_model(self):
        with pytest.raises(ValueError, match="processing"):
            replay([ps.QueryEvent(1.0)], BackupPool(0), ps.fixed_service(1.0))

    def test_resample_processing_overrides_trace(self):
        events = events_at([1.0, 2.0], processing=99.0)
        result = replay(
            events, BackupPool(0), ps.fixed_service(1.0),
            processing_model=ps.fixed_service(7.0), resample_processing=True,
        )
        assert np.all(result.trace.processing == 7.0)
