"""Proactive autoscaling for scaling-per-query workloads.

The pipeline: aggregate a query trace into per-bin counts, detect a dominant
period, fit a periodicity-regularized Poisson intensity by ADMM, extrapolate
it forward, derive instance-creation times under QoS/cost constraints, and
replay everything in a deterministic discrete-event simulator.
"""

from .trace import (
    QueryEvent,
    QpsSeries,
    ServiceTimeModel,
    TraceFormatError,
    aggregate_qps,
    empirical_service,
    exponential_service,
    fixed_service,
    generate_nhpp_trace,
    ingest_trace,
    write_trace,
)
from .periodicity import PeriodInfo, detect_period
from .arrivals import (
    ArrivalSampleSet,
    CumulativeIntensity,
    HorizonExhausted,
    PiecewiseConstantIntensity,
    arrival_quantile,
    gamma_quantile,
    integrate,
    inverse_integrate,
    sample_arrivals,
)
from .nhpp import (
    AdmmState,
    IntensityModel,
    TrainConfig,
    load_model,
    loss,
    predict_intensity,
    save_model,
    soft_threshold,
    train,
)
from .planner import (
    CalibrationMap,
    Creation,
    PlannerConfig,
    ScalingPlan,
    SequentialState,
    calibrate,
    compute_kappa,
    plan_schedule,
    sequential_plan_step,
    solve_cost,
    solve_hp,
    solve_rt,
    sort_and_search,
)
from .sim import (
    AdaptiveBackupPool,
    BackupPool,
    RobustScaler,
    SimResult,
    SimTrace,
    compute_metrics,
    make_scaler,
    replay,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
