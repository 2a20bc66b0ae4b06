from shardpipe.nn.model import (
    Activation,
    Compute,
    LayerSpec,
    Loss,
    ModelParams,
    ModelSpec,
    SgdConfig,
    SpecError,
    compute_loss,
    init_params,
    model_backward,
    model_forward,
    sgd_step,
)
from shardpipe.nn.tensor import DimensionError, Tensor, as_tensor, detected_cores, matmul

__all__ = [
    "Activation",
    "Compute",
    "DimensionError",
    "LayerSpec",
    "Loss",
    "ModelParams",
    "ModelSpec",
    "SgdConfig",
    "SpecError",
    "Tensor",
    "as_tensor",
    "compute_loss",
    "detected_cores",
    "init_params",
    "matmul",
    "model_backward",
    "model_forward",
    "sgd_step",
]
