"""Unfolded dynamic ISTA network."""

from .model import (
    Checkpoint,
    FingerprintError,
    ModelConfig,
    Network,
    TrainingAborted,
    build_network_graph,
    infer,
    loss,
    train,
)
from .stage import (
    ActivationCache,
    ParameterError,
    dynamic_conv,
    dynamic_threshold,
    dynamic_transform,
    dynamic_weight,
    gradient_update,
    init_stage_params,
    stage_forward,
)

__all__ = [
    "ActivationCache",
    "Checkpoint",
    "FingerprintError",
    "ModelConfig",
    "Network",
    "ParameterError",
    "TrainingAborted",
    "build_network_graph",
    "dynamic_conv",
    "dynamic_threshold",
    "dynamic_transform",
    "dynamic_weight",
    "gradient_update",
    "infer",
    "init_stage_params",
    "loss",
    "stage_forward",
    "train",
]
