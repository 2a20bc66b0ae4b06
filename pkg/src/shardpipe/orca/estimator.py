"""sklearn-style Estimator: one model replica per worker, gradients averaged every step."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from shardpipe.cluster.driver import ClusterContext, ClusterError, State
from shardpipe.cluster.tasks import lookup
from shardpipe.nn import checkpoint
from shardpipe.nn.model import ModelParams, ModelSpec, SgdConfig, init_params
from shardpipe.nano.plan import BASELINE, ExecPlan
from shardpipe.orca.training import LocalReplica
from shardpipe.xshards import RecordBatch, ShardError, Shards

log = logging.getLogger("shardpipe.orca")

METRICS = ("accuracy", "mse", "loss")


class ReplicaMismatch(ClusterError):
    """Replicas disagreed on their parameters after an optimizer step."""


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 1
    batch_size: int = 32  # rows per worker per step
    seed: int = 0
    shuffle: bool = False
    debug: bool = False  # compare replica checksums after every step
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    wall_time: float
    steps: int


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checksum_steps: int = 0  # steps verified in debug mode
    checksum_mismatches: int = 0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def total_steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "total_steps": self.total_steps,
            "checksum_steps": self.checksum_steps,
            "checksum_mismatches": self.checksum_mismatches,
        }


def _check_columns(data: Shards, cols) -> None:
    names = {name for name, _ in data.schema}
    missing = [c for c in cols if c not in names]
    if missing:
        raise ShardError(f"columns not in data: {missing}; available: {sorted(names)}")


class Estimator:
    """Data-parallel trainer over a cluster, or in-process when ``cluster`` is None."""

    def __init__(self, spec: ModelSpec, sgd: SgdConfig, params: ModelParams, cluster: ClusterContext | None = None):
        params.check(spec)
        self.spec = spec
        self.sgd = sgd
        self.params = params
        self.cluster = cluster
        self._local = LocalReplica() if cluster is None else None
        self._sync_replicas()

    @classmethod
    def from_model(cls, spec: ModelSpec, sgd: SgdConfig, cluster: ClusterContext | None = None) -> Estimator:
        return cls(spec, sgd, init_params(spec, sgd.seed), cluster)

    @property
    def n_workers(self) -> int:
        return 1 if self.cluster is None else self.cluster.n_workers

    # -- replica plumbing --------------------------------------------------

    def _require_cluster(self) -> None:
        if self.cluster is not None and self.cluster.state is not State.READY:
            raise ClusterError(f"cluster is {self.cluster.state.value}, not ready")

    def _run(self, name: str, args=None) -> list:
        if self.cluster is None:
            return [lookup(name).func(self._local, args)]
        return self.cluster.run_task(name, args)

    def _sync_replicas(self) -> None:
        """Push the driver's params to every replica."""
        self._require_cluster()
        blob = checkpoint.dumps(self.spec, self.params)
        if self.cluster is None:
            self._local.state["broadcast"] = blob
        else:
            self.cluster.broadcast(blob)
        sums = self._run("load_params")
        if len(set(sums)) != 1:
            raise ReplicaMismatch(f"replicas loaded different params: {sums}")

    def _pull_params(self) -> None:
        spec, params = checkpoint.loads(self._run("get_params")[0])
        self.params = params

    def replica_checksums(self) -> list[str]:
        return self._run("params_checksum")

    def _place(self, data: Shards) -> list[int]:
        """Give replica i partition i; returns per-replica row counts."""
        if self.cluster is None:
            batch = data.collect()
            self._local.state["partition"] = batch
            return [batch.num_rows]
        if data.num_partitions() != self.n_workers:
            raise ShardError(
                f"data has {data.num_partitions()} partitions but the cluster has {self.n_workers} workers; "
                f"repartition({self.n_workers}) first"
            )
        return self.cluster.scatter_shards(data)

    # -- public API --------------------------------------------------------

    def fit(self, data: Shards, feature_cols, label_cols, cfg: FitConfig = FitConfig()) -> TrainReport:
        feature_cols, label_cols = list(feature_cols), list(label_cols)
        _check_columns(data, feature_cols + label_cols)
        self._require_cluster()
        rows = self._place(data)
        empty = [i for i, r in enumerate(rows) if r == 0]
        if empty:
            raise ShardError(f"worker partition(s) {empty} are empty; repartition the data")
        steps = min(math.ceil(r / cfg.batch_size) for r in rows)
        report = TrainReport()
        for epoch in range(cfg.epochs):
            args = {
                "features": feature_cols,
                "labels": label_cols,
                "batch_size": cfg.batch_size,
                "steps": steps,
                "epoch": epoch,
                "seed": cfg.seed,
                "shuffle": cfg.shuffle,
                "learning_rate": self.sgd.learning_rate,
                "threads": cfg.threads,
                "debug": cfg.debug,
            }
            t0 = time.perf_counter()
            results = self._run("train_epoch", args)
            wall = time.perf_counter() - t0
            loss = float(np.mean([r["loss"] for r in results]))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            if cfg.debug:
                for s, sums in enumerate(zip(*(r["checksums"] for r in results))):
                    report.checksum_steps += 1
                    if len(set(sums)) != 1:
                        report.checksum_mismatches += 1
                        raise ReplicaMismatch(f"replica params diverged at epoch {epoch} step {s}")
            report.epochs.append(EpochStats(epoch, loss, wall, steps))
            log.info("epoch %d: loss %.6g (%d steps, %.3fs)", epoch, loss, steps, wall)
        self._pull_params()
        return report

    def predict(self, data: Shards, feature_cols, plan: ExecPlan = BASELINE, prefix: str = "prediction") -> Shards:
        """Returns ``data`` with ``{prefix}_{j}`` output columns added, partition by partition."""
        feature_cols = list(feature_cols)
        _check_columns(data, feature_cols)
        self._require_cluster()
        if self.cluster is None:
            outs = []
            for part in data.partitions:
                self._local.state["partition"] = part
                outs.append(self._run("predict_partition", (feature_cols, plan))[0])
        else:
            self._place(data)
            outs = self._run("predict_partition", (feature_cols, plan))
        parts = []
        for part, out in zip(data.partitions, outs):
            cols = {name: part[name] for name in part.columns}
            for j in range(self.spec.output_dim):
                cols[f"{prefix}_{j}"] = np.asarray(out[:, j], dtype=np.float64)
            parts.append(RecordBatch(cols))
        return Shards(parts, schema=_prediction_schema(data, prefix, self.spec.output_dim))

    def evaluate(self, data: Shards, feature_cols, label_cols, metric: str = "accuracy") -> float:
        metric = metric.lower()
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        feature_cols, label_cols = list(feature_cols), list(label_cols)
        _check_columns(data, feature_cols + label_cols)
        self._require_cluster()
        args = (feature_cols, label_cols, metric)
        if self.cluster is None:
            terms = []
            for part in data.partitions:
                self._local.state["partition"] = part
                terms.extend(self._run("evaluate_partition", args))
        else:
            self._place(data)
            terms = self._run("evaluate_partition", args)
        total = sum(t for t, _ in terms)
        count = sum(c for _, c in terms)
        if count == 0:
            raise ValueError("cannot evaluate on empty data")
        return total / count

    def save(self, path) -> None:
        checkpoint.save(path, self.spec, self.params)

    @classmethod
    def load(cls, path, cluster: ClusterContext | None = None, sgd: SgdConfig | None = None) -> Estimator:
        """Load a checkpoint and push it to every replica (any worker count)."""
        spec, params = checkpoint.load(path)
        return cls(spec, sgd or SgdConfig(), params, cluster)


def _prediction_schema(data: Shards, prefix: str, width: int):
    from shardpipe.xshards import Kind

    return tuple(data.schema) + tuple((f"{prefix}_{j}", Kind.FLOAT) for j in range(width))
