"""Periodicity-regularized Poisson intensity fitting.

The per-bin log rate vector r minimizes

    -Q'r + dt * sum(exp(r)) + beta1 * ||D2 r||_1 + beta2/2 * ||DL r||_2^2

where D2 is the second-order difference operator (curvature smoothing) and DL
the L-step forward difference (bins one period apart should agree). The solver
is an ADMM with auxiliary variables y = D2 r and z = DL r; the r-subproblem is
replaced by its second-order Taylor model around the current iterate, which
turns it into one banded SPD solve per iteration (bandwidth max(2, L), so
O(T L^2) work).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded
from scipy.sparse.linalg import splu

from .arrivals import PiecewiseConstantIntensity
from .periodicity import PeriodInfo
from .trace import QpsSeries

logger = logging.getLogger(__name__)

# bandwidths up to this use the dense-banded Cholesky path; beyond it a sparse
# LU exploits the gap between the +/-2 band and the +/-L band
_BANDED_SOLVER_MAX_BANDWIDTH = 48


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the ADMM fit.

    Residual tolerances compare dimension-scaled norms: the fit stops once
    ``||y - D2 r|| / sqrt(dim)`` and ``||z - DL r|| / sqrt(dim)`` are below
    ``tol_primal`` and the dual residual ``rho * ||D2'(dy) + DL'(dz)|| /
    sqrt(T)`` is below ``tol_dual``. Log rates are clamped at ``r_floor`` so
    empty bins cannot drive them to -inf.
    """

    beta1: float = 10.0
    beta2: float = 1.0
    rho: float = 1.0
    max_iters: int = 500
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    r_floor: float = -20.0

    def __post_init__(self) -> None:
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be >= 0")
        if not (self.rho > 0):
            raise ValueError("rho must be > 0")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ValueError("tolerances must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class AdmmState:
    """Iterates and residuals of the ADMM; z-block arrays are None without a period."""

    r: np.ndarray
    y: np.ndarray | None
    z: np.ndarray | None
    nu_y: np.ndarray | None
    nu_z: np.ndarray | None
    iteration: int
    primal_residuals: tuple[float, float]
    dual_residuals: float
    converged: bool


@dataclass(frozen=True)
class IntensityModel:
    """Fitted per-bin log intensity (natural log of the per-second rate)."""

    log_intensity: np.ndarray
    step: float
    epoch: float = 0.0
    period_bins: int | None = None
    extrapolation: str = "mean_window"
    mean_window_bins: int = 60

    def __post_init__(self) -> None:
        r = np.asarray(self.log_intensity, dtype=float)
        if r.ndim != 1 or r.size < 1:
            raise ValueError("log_intensity must be a non-empty vector")
        if np.any(~np.isfinite(r)):
            raise ValueError("log_intensity must be finite")
        if not (self.step > 0):
            raise ValueError("step must be > 0")
        if self.period_bins is not None and not (2 <= self.period_bins < r.size):
            raise ValueError(f"period_bins must satisfy 2 <= L < T, got {self.period_bins}")
        if self.extrapolation not in ("periodic", "mean_window"):
            raise ValueError(f"unknown extrapolation rule {self.extrapolation!r}")
        r.setflags(write=False)
        object.__setattr__(self, "log_intensity", r)

    @property
    def n_bins(self) -> int:
        return int(self.log_intensity.size)

    @property
    def end(self) -> float:
        return self.epoch + self.n_bins * self.step


def soft_threshold(x: float | np.ndarray, c: float) -> float | np.ndarray:
    """Proximal operator of the L1 norm: sign(x) * max(|x| - c, 0)."""
    if c < 0:
        raise ValueError(f"threshold must be >= 0, got {c}")
    return np.sign(x) * np.maximum(np.abs(x) - c, 0.0)


def second_difference(T: int) -> sparse.csr_matrix:
    """(T-2) x T operator with rows (1, -2, 1)."""
    if T < 3:
        return sparse.csr_matrix((0, T))
    ones = np.ones(T - 2)
    return sparse.diags([ones, -2.0 * ones, ones], offsets=[0, 1, 2], shape=(T - 2, T)).tocsr()


def lag_difference(T: int, L: int) -> sparse.csr_matrix:
    """(T-L) x T operator with +1 at column t and -1 at column t+L."""
    if not (2 <= L < T):
        raise ValueError(f"period must satisfy 2 <= L < T, got L={L}, T={T}")
    ones = np.ones(T - L)
    return sparse.diags([ones, -ones], offsets=[0, L], shape=(T - L, T)).tocsr()


def loss(series: QpsSeries, r: np.ndarray, config: TrainConfig, L: int | None = None) -> float:
    """Regularized negative log-likelihood of the count series at log rates r."""
    r = np.asarray(r, dtype=float)
    T = len(series)
    if r.shape != (T,):
        raise ValueError(f"r has shape {r.shape}, expected ({T},)")
    if config.beta2 > 0 and L is None:
        raise ValueError("beta2 > 0 requires a period length L")
    q = series.counts.astype(float)
    value = -float(q @ r) + series.step * float(np.exp(r).sum())
    if config.beta1 > 0 and T >= 3:
        value += config.beta1 * float(np.abs(second_difference(T) @ r).sum())
    if config.beta2 > 0:
        dl = lag_difference(T, L) @ r
        value += 0.5 * config.beta2 * float(dl @ dl)
    return value


class _SpdSolver:
    """Solves (G + diag(d)) x = b for a fixed sparse SPD part G.

    The matrix is banded with the bandwidth set by the regularizers; narrow
    bands go through LAPACK's banded Cholesky, wide ones (large periods)
    through a sparse LU that skips the zero gap between the bands.
    """

    def __init__(self, G: sparse.csc_matrix, bandwidth: int):
        self.bandwidth = int(bandwidth)
        self.T = G.shape[0]
        self.use_banded = self.bandwidth <= _BANDED_SOLVER_MAX_BANDWIDTH
        if self.use_banded:
            ab = np.zeros((self.bandwidth + 1, self.T))
            for k in range(self.bandwidth + 1):
                diag_k = G.diagonal(k)
                if k == 0:
                    ab[self.bandwidth] = diag_k
                elif diag_k.size:
                    ab[self.bandwidth - k, k:] = diag_k
            self._ab = ab
        else:
            self._G = G.tocsc()

    def solve(self, diag: np.ndarray, b: np.ndarray) -> np.ndarray:
        try:
            if self.use_banded:
                ab = self._ab.copy()
                ab[-1] += diag
                return solveh_banded(ab, b, lower=False)
            A = (self._G + sparse.diags(diag)).tocsc()
            return splu(A).solve(b)
        except Exception as exc:  # pragma: no cover - guarded, should not occur for rho > 0
            raise RuntimeError(f"linear system solve failed: {exc}") from exc


def fit_admm(
    series: QpsSeries,
    config: TrainConfig,
    L: int | None = None,
    state0: AdmmState | None = None,
    max_iters: int | None = None,
) -> AdmmState:
    """Run the ADMM on a count series and return the final iterate.

    ``L`` enables the periodicity block; blocks whose regularization weight is
    zero are dropped entirely. ``state0`` warm-starts from a previous state.
    """
    T = len(series)
    if T < 3:
        raise ValueError(f"need at least 3 bins to fit, got {T}")
    q = series.counts.astype(float)
    dt = series.step
    rho = config.rho
    iters = config.max_iters if max_iters is None else max_iters

    use_y = config.beta1 > 0 and T >= 3
    use_z = config.beta2 > 0 and L is not None
    D2 = second_difference(T) if use_y else None
    DL = lag_difference(T, L) if use_z else None

    G = sparse.csc_matrix((T, T))
    bandwidth = 0
    if use_y:
        G = G + rho * (D2.T @ D2)
        bandwidth = 2
    if use_z:
        G = G + rho * (DL.T @ DL)
        bandwidth = max(bandwidth, L)
    solver = _SpdSolver(G.tocsc(), bandwidth)

    if state0 is not None:
        r = np.array(state0.r, dtype=float)
        y = None if state0.y is None else np.array(state0.y, dtype=float)
        z = None if state0.z is None else np.array(state0.z, dtype=float)
        nu_y = None if state0.nu_y is None else np.array(state0.nu_y, dtype=float)
        nu_z = None if state0.nu_z is None else np.array(state0.nu_z, dtype=float)
    else:
        r = np.log((q + 1.0) / dt)
        y = D2 @ r if use_y else None
        z = DL @ r if use_z else None
        nu_y = np.zeros(T - 2) if use_y else None
        nu_z = np.zeros(T - L) if use_z else None

    sq_t = math.sqrt(T)
    sq_y = math.sqrt(T - 2) if use_y else 1.0
    sq_z = math.sqrt(T - L) if use_z else 1.0
    primal_y = primal_z = dual = math.inf
    iteration = 0
    converged = False

    for iteration in range(1, iters + 1):
        exp_r = np.exp(r)
        b = q - dt * exp_r + dt * exp_r * r
        if use_y:
            b = b + D2.T @ (nu_y + rho * y)
        if use_z:
            b = b + DL.T @ (nu_z + rho * z)
        r_new = solver.solve(dt * exp_r, b)
        np.maximum(r_new, config.r_floor, out=r_new)
        if not np.all(np.isfinite(r_new)):
            raise RuntimeError("ADMM iterate diverged to non-finite values")

        dual_vec = np.zeros(T)
        if use_y:
            d2r = D2 @ r_new
            y_new = soft_threshold(d2r - nu_y / rho, config.beta1 / rho)
            dual_vec += D2.T @ (y_new - y)
            nu_y = nu_y + rho * (y_new - d2r)
            y = y_new
            primal_y = float(np.linalg.norm(y - d2r)) / sq_y
        if use_z:
            dlr = DL @ r_new
            z_new = (rho * dlr - nu_z) / (config.beta2 + rho)
            dual_vec += DL.T @ (z_new - z)
            nu_z = nu_z + rho * (z_new - dlr)
            z = z_new
            primal_z = float(np.linalg.norm(z - dlr)) / sq_z

        if use_y or use_z:
            dual = rho * float(np.linalg.norm(dual_vec)) / sq_t
        else:
            # pure Newton on the likelihood: use the step norm
            dual = float(np.linalg.norm(r_new - r)) / sq_t
        r = r_new

        primal_ok = (not use_y or primal_y < config.tol_primal) and (
            not use_z or primal_z < config.tol_primal
        )
        if primal_ok and dual < config.tol_dual:
            converged = True
            break

    if not converged:
        logger.warning(
            "ADMM stopped at max_iters=%d without converging "
            "(primal residuals %.3e / %.3e, dual residual %.3e)",
            iters,
            primal_y if use_y else 0.0,
            primal_z if use_z else 0.0,
            dual,
        )
    return AdmmState(
        r=r,
        y=y,
        z=z,
        nu_y=nu_y,
        nu_z=nu_z,
        iteration=iteration,
        primal_residuals=(primal_y if use_y else 0.0, primal_z if use_z else 0.0),
        dual_residuals=dual,
        converged=converged,
    )


def train(
    series: QpsSeries,
    config: TrainConfig | None = None,
    period: PeriodInfo | int | None = None,
    mean_window_bins: int = 60,
) -> IntensityModel:
    """Fit an :class:`IntensityModel` to a count series.

    ``period`` may be a :class:`PeriodInfo` (used only when detected), a bare
    lag in bins, or None. Without a period the periodicity block is dropped
    and the model extrapolates with a trailing-window mean.
    """
    config = config or TrainConfig()
    L: int | None = None
    if isinstance(period, PeriodInfo):
        L = period.period_bins if period.detected else None
    elif period is not None:
        L = int(period)
    if L is not None and not (2 <= L < len(series)):
        raise ValueError(f"period_bins must satisfy 2 <= L < T, got L={L}, T={len(series)}")
    state = fit_admm(series, config, L=L if config.beta2 > 0 else None)
    return IntensityModel(
        log_intensity=state.r,
        step=series.step,
        epoch=series.epoch,
        period_bins=L,
        extrapolation="periodic" if L is not None else "mean_window",
        mean_window_bins=mean_window_bins,
    )


def _bin_rates(model: IntensityModel, bin_indices: np.ndarray) -> np.ndarray:
    """Per-second rate for absolute bin indices, extrapolating past the fit."""
    rates = np.empty(bin_indices.size)
    T = model.n_bins
    hist = bin_indices < T
    rates[hist] = np.exp(model.log_intensity[bin_indices[hist]])
    future = ~hist
    if np.any(future):
        if model.extrapolation == "periodic" and model.period_bins is not None:
            L = model.period_bins
            tail = np.exp(model.log_intensity[T - L :])
            rates[future] = tail[(bin_indices[future] - T) % L]
        else:
            w = min(model.mean_window_bins, T)
            rates[future] = float(np.exp(model.log_intensity[-w:]).mean())
    return rates


def predict_intensity(
    model: IntensityModel,
    from_time: float,
    horizon: float,
    max_horizon: float = 86400.0,
) -> PiecewiseConstantIntensity:
    """Piecewise-constant rate on [from_time, from_time + horizon).

    Within the fitted window the per-bin rates are used directly; beyond it
    the last full period is tiled forward (periodic models) or the trailing
    window mean is held constant. ``max_horizon`` caps how far past the fitted
    window the prediction may extend.
    """
    if not (horizon > 0):
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if from_time < model.epoch:
        raise ValueError("from_time precedes the model epoch")
    end_time = from_time + horizon
    if end_time > model.end + max_horizon:
        raise ValueError(
            f"prediction would extend {end_time - model.end:.6g} s past the fitted window; "
            f"cap is {max_horizon:.6g} s (pass max_horizon to override)"
        )
    j0 = int(math.floor((from_time - model.epoch) / model.step))
    j1 = int(math.ceil((end_time - model.epoch) / model.step))
    j1 = max(j1, j0 + 1)
    grid = model.epoch + np.arange(j0, j1 + 1, dtype=float) * model.step
    grid[0] = from_time
    grid[-1] = end_time
    keep = np.concatenate([[True], np.diff(grid) > 0])
    grid = grid[keep]
    bins = np.clip(np.floor((grid[:-1] - model.epoch) / model.step).astype(int), j0, j1 - 1)
    return PiecewiseConstantIntensity(grid, _bin_rates(model, bins))


def save_model(model: IntensityModel, path: str | Path) -> None:
    payload = {
        "step": model.step,
        "epoch": model.epoch,
        "period_bins": model.period_bins,
        "log_intensity": [float(v) for v in model.log_intensity],
        "extrapolation": model.extrapolation,
        "mean_window_bins": model.mean_window_bins,
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> IntensityModel:
    payload = json.loads(Path(path).read_text())
    return IntensityModel(
        log_intensity=np.asarray(payload["log_intensity"], dtype=float),
        step=float(payload["step"]),
        epoch=float(payload["epoch"]),
        period_bins=payload["period_bins"],
        extrapolation=payload["extrapolation"],
        mean_window_bins=int(payload.get("mean_window_bins", 60)),
    )


def holdout_nll(model: IntensityModel, holdout: QpsSeries, max_horizon: float = math.inf) -> float:
    """Poisson negative log-likelihood of held-out counts under extrapolated rates."""
    intensity = predict_intensity(
        model, holdout.epoch, len(holdout) * holdout.step, max_horizon=max_horizon
    )
    edges = holdout.epoch + np.arange(len(holdout) + 1) * holdout.step
    masses = np.diff(intensity.cumulative_at(edges))
    q = holdout.counts.astype(float)
    return float(masses.sum() - q @ np.log(np.maximum(masses, 1e-300)))


def tune_betas(
    series: QpsSeries,
    period: PeriodInfo | int | None,
    beta1_grid: Iterable[float] = (1.0, 10.0, 100.0),
    beta2_grid: Iterable[float] = (0.1, 1.0, 10.0, 100.0),
    holdout_fraction: float = 0.25,
    base_config: TrainConfig | None = None,
) -> tuple[TrainConfig, float]:
    """Grid-search beta1/beta2 by held-out negative log-likelihood.

    The series tail (``holdout_fraction``) is scored with the extrapolated
    intensity of a model fitted on the head. Returns the winning config and
    its held-out score.
    """
    base = base_config or TrainConfig()
    split = int(len(series) * (1.0 - holdout_fraction))
    if split < 3 or split >= len(series):
        raise ValueError("series too short for the requested holdout fraction")
    head = QpsSeries(series.counts[:split], series.step, series.epoch)
    tail = QpsSeries(series.counts[split:], series.step, series.epoch + split * series.step)

    L: int | None = None
    if isinstance(period, PeriodInfo):
        L = period.period_bins if period.detected else None
    elif period is not None:
        L = int(period)

    best: tuple[TrainConfig, float] | None = None
    beta2_options = list(beta2_grid) if L is not None and L < split else [0.0]
    for beta1 in beta1_grid:
        for beta2 in beta2_options:
            cfg = replace(base, beta1=float(beta1), beta2=float(beta2))
            model = train(head, cfg, period=L if beta2 > 0 else None)
            score = holdout_nll(model, tail)
            if best is None or score < best[1]:
                best = (cfg, score)
    return best
