from shardpipe.nano.bench import BenchReport, PlanResult, benchmark
from shardpipe.nano.plan import BASELINE, ExecPlan, Precision, infer, max_relative_deviation, select_plan
from shardpipe.nano.quant import (
    CalibrationError,
    QuantizedModel,
    QuantizedTensor,
    QuantParams,
    calibrate,
    dequantize,
    quantize_model,
    quantize_tensor,
    quantized_matmul,
)

__all__ = [
    "BASELINE",
    "BenchReport",
    "CalibrationError",
    "ExecPlan",
    "PlanResult",
    "Precision",
    "QuantParams",
    "QuantizedModel",
    "QuantizedTensor",
    "benchmark",
    "calibrate",
    "dequantize",
    "infer",
    "max_relative_deviation",
    "quantize_model",
    "quantize_tensor",
    "quantized_matmul",
    "select_plan",
]
