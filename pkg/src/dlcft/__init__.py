"""Linearised continual fine-tuning with Kronecker-factored quadratic penalties."""

__version__ = "0.1.0"

from .curvature import (  # noqa: E402
    CurvatureStore,
    KroneckerBlock,
    accumulate,
    estimate_curvature,
    estimate_fisher_diagonal,
    estimate_kfac,
    exact_fim,
    expand_classifier_curvature,
    penalty,
    softmax_hessian_analytic,
    tkfac_rescale,
)
from .engine import (  # noqa: E402
    MetricsMatrix,
    ReplayBuffer,
    Scenario,
    TaskBatch,
    compute_acc_bwt,
    knn_probe,
    reservoir_update,
    run_scenario,
    train_task,
)
from .linearization import DualTensor, LinearizedModel  # noqa: E402
from .nn import LayerSpec, Network, OptimizerState, ParameterVector, mse_loss, optimizer_step, sce_loss  # noqa: E402
from .numerics import make_rng  # noqa: E402

__all__ = [
    "CurvatureStore",
    "KroneckerBlock",
    "accumulate",
    "estimate_curvature",
    "estimate_fisher_diagonal",
    "estimate_kfac",
    "exact_fim",
    "expand_classifier_curvature",
    "penalty",
    "softmax_hessian_analytic",
    "tkfac_rescale",
    "MetricsMatrix",
    "ReplayBuffer",
    "Scenario",
    "TaskBatch",
    "compute_acc_bwt",
    "knn_probe",
    "reservoir_update",
    "run_scenario",
    "train_task",
    "DualTensor",
    "LinearizedModel",
    "LayerSpec",
    "Network",
    "OptimizerState",
    "ParameterVector",
    "mse_loss",
    "optimizer_step",
    "sce_loss",
    "make_rng",
]
