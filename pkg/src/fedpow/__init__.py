"""Federated averaging with biased client selection (power-of-choice).

Tasks, selection strategies, the FedAvg engine, selection-skew and
error-bound tools, and a spec-driven experiment harness.
"""

from .engine import (
    DivergenceError,
    LRSchedule,
    RoundRecord,
    RunConfig,
    aggregate,
    local_sgd,
    read_metrics,
    rounds_to_target,
    run_training,
    write_metrics,
)
from .estimators import FedAvgClassifier, SelectionSkewEstimator
from .selection import (
    AvailabilityModel,
    SelectionConfig,
    SelectionState,
    frequency_profile,
    select,
)
from .skew import (
    BoundInputs,
    GridSpec,
    SkewEstimate,
    TheoryParams,
    estimate_rho_bounds,
    estimate_theory_params,
    local_global_gap,
    selection_skew_at,
    theorem1_bound,
    theorem2_bound,
)
from .tasks import QuadraticTask, SyntheticDataset, generate_quadratic, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "AvailabilityModel", "BoundInputs", "DivergenceError", "FedAvgClassifier", "GridSpec",
    "LRSchedule", "QuadraticTask", "RoundRecord", "RunConfig", "SelectionConfig",
    "SelectionSkewEstimator", "SelectionState", "SkewEstimate", "SyntheticDataset",
    "TheoryParams", "aggregate", "estimate_rho_bounds", "estimate_theory_params",
    "frequency_profile", "generate_quadratic", "generate_synthetic", "local_global_gap",
    "local_sgd", "read_metrics", "rounds_to_target", "run_training", "select",
    "selection_skew_at", "theorem1_bound", "theorem2_bound", "write_metrics",
]
