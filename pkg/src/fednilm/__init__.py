"""Federated deep learning for non-intrusive load monitoring.

Disaggregates household-level power readings into per-appliance ON/OFF
states with a 1-D convolutional encoder / temporal-pooling / decoder network
trained by synchronous federated averaging, runnable as a deterministic
in-process simulation or as real networked clients and a parameter server.
"""

from .data import (
    DEFAULT_APPLIANCES,
    ApplianceSpec,
    RawSeries,
    SplitPlan,
    WindowSample,
    make_windows,
    plan_split,
    synth_households,
    threshold_states,
)
from .estimators import FederatedNilmStateClassifier, NilmStateClassifier
from .federation import (
    FederationConfig,
    RoundReport,
    fedavg,
    households_update,
    run_centralized,
    run_federated,
)
from .metrics import ConfusionCounts, ScoreSet, aggregate_experiment, confusion, scores
from .model import (
    ModelConfig,
    NilmModel,
    build_model,
    load_checkpoint,
    predict_states,
    save_checkpoint,
)
from .tensor import OptimizerState, ParamVector, Tensor, finite_diff_check, sgd_momentum_step

__version__ = "0.1.0"

__all__ = [
    "ApplianceSpec",
    "ConfusionCounts",
    "DEFAULT_APPLIANCES",
    "FederatedNilmStateClassifier",
    "FederationConfig",
    "ModelConfig",
    "NilmModel",
    "NilmStateClassifier",
    "OptimizerState",
    "ParamVector",
    "RawSeries",
    "RoundReport",
    "ScoreSet",
    "SplitPlan",
    "Tensor",
    "WindowSample",
    "aggregate_experiment",
    "build_model",
    "confusion",
    "fedavg",
    "finite_diff_check",
    "households_update",
    "load_checkpoint",
    "make_windows",
    "plan_split",
    "predict_states",
    "run_centralized",
    "run_federated",
    "save_checkpoint",
    "scores",
    "sgd_momentum_step",
    "synth_households",
    "threshold_states",
]
