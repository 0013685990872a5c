import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import proscale as ps
from proscale.nhpp import (
    AdmmState,
    TrainConfig,
    fit_admm,
    lag_difference,
    loss,
    second_difference,
    soft_threshold,
    _SpdSolver,
)
from scipy import sparse


def poisson_series(lam, T, dt, seed=0):
    rng = np.random.default_rng(seed)
    return ps.QpsSeries(rng.poisson(np.asarray(lam) * dt, size=T), dt)


class TestSoftThreshold:
    @pytest.mark.parametrize("x,c,expected", [(0.5, 1.0, 0.0), (3.0, 1.0, 2.0), (-3.0, 1.0, -2.0)])
    def test_examples(self, x, c, expected):
        assert soft_threshold(x, c) == expected

    @given(x=st.floats(-1e6, 1e6), c=st.floats(0.0, 1e6))
    @settings(max_examples=100)
    def test_shrinkage_property(self, x, c):
        out = soft_threshold(x, c)
        assert abs(out) == max(abs(x) - c, 0.0)
        assert out * x >= 0.0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(1.0, -0.1)


class TestLoss:
    def test_three_term_hand_value(self):
        series = ps.QpsSeries(np.array([2, 2, 2]), 1.0)
        r = np.full(3, math.log(2.0))
        value = loss(series, r, TrainConfig(beta1=0.0, beta2=0.0))
        assert value == pytest.approx(3 * (2 - 2 * math.log(2.0)), rel=1e-12)

    def test_zero_counts_zero_rates(self):
        series = ps.QpsSeries(np.zeros(3, dtype=int), 1.0)
        assert loss(series, np.zeros(3), TrainConfig(beta1=0.0, beta2=0.0)) == 3.0

    def test_penalties_ignore_constant_shifts(self):
        rng = np.random.default_rng(1)
        series = ps.QpsSeries(rng.poisson(4.0, 30), 1.0)
        r = rng.normal(size=30)
        cfg = TrainConfig(beta1=1.0, beta2=2.0)
        cfg0 = TrainConfig(beta1=0.0, beta2=0.0)
        penalty = loss(series, r, cfg, L=6) - loss(series, r, cfg0)
        penalty_shifted = loss(series, r + 3.7, cfg, L=6) - loss(series, r + 3.7, cfg0)
        assert penalty_shifted == pytest.approx(penalty, rel=1e-9, abs=1e-9)

    def test_dimension_mismatch(self):
        series = ps.QpsSeries(np.array([1, 2, 3]), 1.0)
        with pytest.raises(ValueError, match="shape"):
            loss(series, np.zeros(4), TrainConfig())

    def test_beta2_requires_period(self):
        series = ps.QpsSeries(np.array([1, 2, 3]), 1.0)
        with pytest.raises(ValueError, match="period"):
            loss(series, np.zeros(3), TrainConfig(beta2=1.0))


class TestTrain:
    def test_unpenalized_mle_is_log_qps(self):
        series = ps.QpsSeries(np.full(100, 5), 1.0)
        state = fit_admm(series, TrainConfig(beta1=0.0, beta2=0.0))
        assert np.max(np.abs(state.r - math.log(5.0))) < 1e-6

    def test_periodicity_penalty_dominance(self):
        rng = np.random.default_rng(3)
        T, L = 240, 24
        lam = 3.0 + 2.0 * np.sin(2 * np.pi * np.arange(T) / L)
        series = ps.QpsSeries(rng.poisson(lam * 5.0), 5.0)
        cfg = TrainConfig(beta1=1.0, beta2=1e6, rho=100.0, max_iters=500, tol_primal=1e-7, tol_dual=1e-7)
        state = fit_admm(series, cfg, L=L)
        assert np.linalg.norm(lag_difference(T, L) @ state.r) < 1e-3

    def test_converged_state_is_fixed_point(self):
        series = poisson_series(4.0, 60, 1.0, seed=5)
        cfg = TrainConfig(beta1=1.0, beta2=1.0, max_iters=20_000, tol_primal=1e-8, tol_dual=1e-8)
        state = fit_admm(series, cfg, L=12)
        assert state.converged
        again = fit_admm(series, cfg, L=12, state0=state, max_iters=1)
        assert again.converged
        assert max(again.primal_residuals) < cfg.tol_primal

    def test_shift_covariance_under_count_scaling(self):
        rng = np.random.default_rng(9)
        counts = rng.poisson(6.0, 80) + 1
        cfg = TrainConfig(beta1=0.0, beta2=0.0)
        base = fit_admm(ps.QpsSeries(counts, 1.0), cfg).r
        scaled = fit_admm(ps.QpsSeries(counts * 3, 1.0), cfg).r
        assert np.max(np.abs(scaled - base - math.log(3.0))) < 1e-6

    def test_residuals_below_tol_on_fixtures(self):
        for seed, L in [(0, None), (1, 10), (2, 24)]:
            series = poisson_series(3.0, 120, 2.0, seed=seed)
            cfg = TrainConfig(beta1=2.0, beta2=1.0, max_iters=30_000, tol_primal=1e-6, tol_dual=1e-6)
            state = fit_admm(series, cfg, L=L)
            assert state.converged
            assert max(state.primal_residuals) < cfg.tol_primal

    def test_objective_matches_convex_oracle_small(self):
        cvxpy = pytest.importorskip("cvxpy")
        rng = np.random.default_rng(77)
        T, L, dt = 30, 6, 1.5
        series = ps.QpsSeries(rng.poisson(4.0, T), dt)
        cfg = TrainConfig(beta1=2.0, beta2=3.0, max_iters=20_000, tol_primal=1e-9, tol_dual=1e-9)
        state = fit_admm(series, cfg, L=L)
        ours = loss(series, state.r, cfg, L)
        r = cvxpy.Variable(T)
        objective = (
            -series.counts.astype(float) @ r
            + dt * cvxpy.sum(cvxpy.exp(r))
            + cfg.beta1 * cvxpy.norm1(second_difference(T).toarray() @ r)
            + cfg.beta2 / 2 * cvxpy.sum_squares(lag_difference(T, L).toarray() @ r)
        )
        problem = cvxpy.Problem(cvxpy.Minimize(objective))
        problem.solve(solver=cvxpy.CLARABEL)
        assert abs(ours - problem.value) <= 1e-4 * abs(problem.value)

    def test_train_wires_period_info(self):
        series = poisson_series(3.0, 100, 1.0, seed=2)
        model = ps.train(series, TrainConfig(beta1=1.0, beta2=1.0, max_iters=50), period=ps.PeriodInfo(True, 20, 0.9))
        assert model.period_bins == 20 and model.extrapolation == "periodic"
        model2 = ps.train(series, TrainConfig(beta1=1.0, beta2=1.0, max_iters=50), period=ps.PeriodInfo(False))
        assert model2.period_bins is None and model2.extrapolation == "mean_window"


class TestBandedSolver:
    @pytest.mark.parametrize("T,L", [(40, 5), (200, 24), (200, 60)])
    def test_matches_dense_solve(self, T, L):
        rng = np.random.default_rng(T + L)
        D2 = second_difference(T)
        DL = lag_difference(T, L)
        G = (1.3 * (D2.T @ D2) + 1.3 * (DL.T @ DL)).tocsc()
        solver = _SpdSolver(G, bandwidth=max(2, L))
        diag = rng.uniform(0.5, 4.0, T)
        b = rng.normal(size=T)
        x = solver.solve(diag, b)
        dense = G.toarray() + np.diag(diag)
        assert np.max(np.abs(x - np.linalg.solve(dense, b))) < 1e-8

    def test_iteration_time_scales_linearly_in_t(self):
        # doubling T at fixed L should cost at most ~2.5x per iteration
        L, iters = 24, 12
        cfg = TrainConfig(beta1=2.0, beta2=2.0, max_iters=iters, tol_primal=1e-14, tol_dual=1e-14)

        def fit_time(T):
            series = poisson_series(3.0, T, 1.0, seed=T)
            best = math.inf
            for _ in range(3):
                t0 = time.perf_counter()
                fit_admm(series, cfg, L=L)
                best = min(best, time.perf_counter() - t0)
            return best

        fit_time(500)  # warm-up
        assert fit_time(6000) <= 2.5 * fit_time(3000) + 0.05


class TestPredict:
    def test_constant_extrapolation(self):
        model = ps.IntensityModel(np.full(10, math.log(2.0)), step=1.0)
        intensity = ps.predict_intensity(model, 0.0, 30.0)
        for t in (0.5, 9.5, 15.0, 29.0):
            assert intensity.rate_at(t) == pytest.approx(2.0, rel=1e-12)

    def test_periodic_tiling_identity(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=48)
        L, dt = 24, 60.0
        model = ps.IntensityModel(r, step=dt, period_bins=L, extrapolation="periodic")
        start = model.end
        intensity = ps.predict_intensity(model, start, 4 * L * dt, max_horizon=1e9)
        for u in (30.0, 900.0, 1300.0):
            base = intensity.rate_at(start + u)
            for k in (1, 2, 3):
                assert intensity.rate_at(start + k * L * dt + u) == pytest.approx(base, rel=1e-12)

    def test_mean_window_extrapolation(self):
        r = np.log(np.concatenate([np.full(40, 1.0), np.full(60, 3.0)]))
        model = ps.IntensityModel(r, step=1.0, mean_window_bins=60)
        intensity = ps.predict_intensity(model, model.end, 10.0)
        assert intensity.rate_at(model.end + 5.0) == pytest.approx(3.0, rel=1e-12)

    def test_horizon_cap(self):
        model = ps.IntensityModel(np.zeros(10), step=1.0)
        with pytest.raises(ValueError, match="cap"):
            ps.predict_intensity(model, model.end, 86400.0 * 2)
        ps.predict_intensity(model, model.end, 86400.0 * 2, max_horizon=86400.0 * 2 + 1)

    def test_historical_window_used_directly(self):
        r = np.log(np.arange(1, 11, dtype=float))
        model = ps.IntensityModel(r, step=2.0)
        intensity = ps.predict_intensity(model, 0.0, 20.0, max_horizon=1.0)
        assert intensity.rate_at(3.0) == pytest.approx(2.0)
        assert intensity.rate_at(19.0) == pytest.approx(10.0)

    def test_invalid_horizon(self):
        model = ps.IntensityModel(np.zeros(10), step=1.0)
        with pytest.raises(ValueError):
            ps.predict_intensity(model, 0.0, 0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        model = ps.IntensityModel(
            np.array([0.1, -0.5, 1.25]), step=60.0, epoch=120.0, period_bins=2,
            extrapolation="periodic", mean_window_bins=30,
        )
        path = tmp_path / "model.json"
        ps.save_model(model, path)
        loaded = ps.load_model(path)
        assert np.array_equal(loaded.log_intensity, model.log_intensity)
        assert (loaded.step, loaded.epoch, loaded.period_bins) == (60.0, 120.0, 2)
        assert loaded.extrapolation == "periodic"
        payload = json.loads(path.read_text())
        assert set(payload) >= {"step", "epoch", "period_bins", "log_intensity", "extrapolation"}


def test_tune_betas_prefers_periodic_penalty():
    rng = np.random.default_rng(8)
    T, L = 288, 24
    lam = 1.0 + 0.9 * np.sin(2 * np.pi * np.arange(T) / L)
    series = ps.QpsSeries(rng.poisson(lam * 20.0), 20.0)
    cfg, score = ps.nhpp.tune_betas(
        series, L, beta1_grid=(1.0, 10.0), beta2_grid=(0.1, 10.0),
        base_config=TrainConfig(max_iters=150),
    )
    assert math.isfinite(score)
    assert cfg.beta1 in (1.0, 10.0) and cfg.beta2 in (0.1, 10.0)
