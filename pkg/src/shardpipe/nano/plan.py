"""Execution planning and plan-driven inference."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from shardpipe.nn.model import Compute, ModelParams, ModelSpec, model_forward
from shardpipe.nn.tensor import DimensionError, Tensor, as_tensor, detected_cores
from shardpipe.nano.quant import QuantizedModel

log = logging.getLogger(__name__)

# Heuristic constants; the CLI exposes overrides.
ROWS_PER_THREAD = 16
LARGE_DIM = 256
SMALL_BLOCK, LARGE_BLOCK = 32, 64


class Precision(str, enum.Enum):
    FP32 = "fp32"
    INT8 = "int8"


@dataclass(frozen=True)
class ExecPlan:
    threads: int = 1
    precision: Precision = Precision.FP32
    block_size: int = SMALL_BLOCK
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "precision", Precision(self.precision))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def compute(self) -> Compute:
        return Compute(self.threads, self.block_size)


BASELINE = ExecPlan(1, Precision.FP32, SMALL_BLOCK)


def select_plan(
    cores: int | None,
    spec: ModelSpec,
    batch: int,
    want_int8: bool = False,
    have_quantized: bool = False,
    rows_per_thread: int = ROWS_PER_THREAD,
    large_dim: int = LARGE_DIM,
) -> ExecPlan:
    cores = detected_cores() if cores is None else max(1, int(cores))
    threads = max(1, min(cores, math.ceil(batch / rows_per_thread)))
    widest = max(max(l.input_dim, l.output_dim) for l in spec.layers)
    block = LARGE_BLOCK if widest >= large_dim else SMALL_BLOCK
    warnings = ()
    precision = Precision.FP32
    if want_int8:
        if have_quantized:
            precision = Precision.INT8
        else:
            warnings = ("int8 requested but no quantized model is available; using fp32",)
            log.warning(warnings[0])
    return ExecPlan(threads, precision, block, warnings)


def infer(model, batch, plan: ExecPlan = BASELINE) -> Tensor:
    """Run a forward pass under ``plan``.

    ``model`` is either a :class:`QuantizedModel` (INT8 plans) or a
    ``(ModelSpec, ModelParams)`` pair (FP32 plans).
    """
    if isinstance(model, QuantizedModel):
        if plan.precision is not Precision.INT8:
            raise ValueError("fp32 plan given a quantized model")
        return model.forward(batch, threads=plan.threads, block=plan.block_size)
    spec, params = model
    if not isinstance(spec, ModelSpec) or not isinstance(params, ModelParams):
        raise TypeError("model must be a QuantizedModel or a (ModelSpec, ModelParams) pair")
    if plan.precision is Precision.INT8:
        raise ValueError("int8 plan needs a quantized model")
    x = as_tensor(batch)
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"batch has {x.shape[1]} columns, model expects {spec.input_dim}")
    if x.shape[0] == 0:
        return np.zeros((0, spec.output_dim), dtype=np.float32)
    return model_forward(spec, params, x, plan.compute)


def max_relative_deviation(out, reference) -> float:
    """max|out - ref| / max|ref| (0 when both are empty)."""
    out = np.asarray(out, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == 0:
        return 0.0
    denom = max(float(np.abs(reference).max()), np.finfo(np.float32).tiny)
    return float(np.abs(out - reference).max() / denom)
