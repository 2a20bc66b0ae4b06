"""Inference benchmark harness.

Each plan gets one untimed warmup call, then ``repeats`` timed calls; latency is
the median. Speedups are relative to the fp32 single-thread baseline, which is
always measured (added to the plan list if the caller left it out).
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

from shardpipe.nn.model import ModelParams, ModelSpec
from shardpipe.nn.tensor import as_tensor, detected_cores
from shardpipe.nano.plan import BASELINE, ExecPlan, Precision, infer, max_relative_deviation
from shardpipe.nano.quant import QuantizedModel

DEFAULT_BATCH = 256
DEFAULT_REPEATS = 5


@dataclass
class PlanResult:
    threads: int
    precision: str
    block: int
    latency_ms: float
    throughput_rps: float
    speedup: float
    max_dev: float


@dataclass
class BenchReport:
    plans: list[PlanResult] = field(default_factory=list)
    host_cores: int = 1

    def to_json(self) -> str:
        return json.dumps({"plans": [asdict(p) for p in self.plans], "host_cores": self.host_cores})

    @classmethod
    def from_json(cls, text: str) -> BenchReport:
        raw = json.loads(text)
        return cls([PlanResult(**p) for p in raw["plans"]], int(raw["host_cores"]))

    def find(self, threads: int, precision: str) -> PlanResult:
        for p in self.plans:
            if p.threads == threads and p.precision == precision:
                return p
        raise KeyError((threads, precision))


BENCH_SCHEMA = {
    "type": "object",
    "required": ["plans", "host_cores"],
    "additionalProperties": False,
    "properties": {
        "host_cores": {"type": "integer", "minimum": 1},
        "plans": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["threads", "precision", "block", "latency_ms", "throughput_rps", "speedup", "max_dev"],
                "properties": {
                    "threads": {"type": "integer", "minimum": 1},
                    "precision": {"enum": ["fp32", "int8"]},
                    "block": {"type": "integer", "minimum": 1},
                    "latency_ms": {"type": "number"},
                    "throughput_rps": {"type": "number"},
                    "speedup": {"type": "number"},
                    "max_dev": {"type": "number"},
                },
            },
        },
    },
}


def _time_plan(model, data, plan: ExecPlan, repeats: int) -> tuple[float, object]:
    out = infer(model, data, plan)  # warmup, also compiles kernels
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = infer(model, data, plan)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), out


def benchmark(
    spec: ModelSpec,
    params: ModelParams,
    data,
    plans: list[ExecPlan],
    repeats: int = DEFAULT_REPEATS,
    quantized: QuantizedModel | None = None,
) -> BenchReport:
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    x = as_tensor(data)
    fp32 = (spec, params)
    base_plan = ExecPlan(1, Precision.FP32, plans[0].block_size if plans else BASELINE.block_size)
    ordered = [base_plan] + [
        p for p in plans if not (p.threads == 1 and p.precision is Precision.FP32 and p.block_size == base_plan.block_size)
    ]
    base_latency, reference = _time_plan(fp32, x, base_plan, repeats)
    report = BenchReport(host_cores=detected_cores())
    for plan in ordered:
        if plan is base_plan:
            latency, out = base_latency, reference
        else:
            if plan.precision is Precision.INT8:
                if quantized is None:
                    raise ValueError("int8 plan requested without a quantized model")
                model = quantized
            else:
                model = fp32
            latency, out = _time_plan(model, x, plan, repeats)
        report.plans.append(PlanResult(
            threads=plan.threads,
            precision=plan.precision.value,
            block=plan.block_size,
            latency_ms=latency * 1e3,
            throughput_rps=x.shape[0] / latency if latency > 0 else float("inf"),
            speedup=1.0 if plan is base_plan else base_latency / latency,
            max_dev=0.0 if plan is base_plan else max_relative_deviation(out, reference),
        ))
    return report
