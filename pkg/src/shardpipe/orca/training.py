"""Replica-side tasks for the estimator.

Each function takes a replica (a cluster worker, or :class:`LocalReplica` in
local mode) exposing ``worker_id``, ``n_workers``, ``state`` and
``allreduce(vec, op)``. Local mode calls the very same functions in-process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from shardpipe.cluster.tasks import task
from shardpipe.nn import checkpoint
from shardpipe.nn.model import Compute, Loss, SgdConfig, compute_loss, model_backward, sgd_step
from shardpipe.nano.plan import ExecPlan, infer


class ReplicaError(RuntimeError):
    pass


@dataclass
class LocalReplica:
    """In-process stand-in for a single worker; allreduce over one rank is the identity."""

    worker_id: int = 0
    n_workers: int = 1
    state: dict = field(default_factory=dict)
    allreduce_rounds: int = 0

    def allreduce(self, local, op="sum"):
        return np.asarray(local, dtype=np.float32).reshape(-1).copy()


def _model(replica):
    try:
        return replica.state["spec"], replica.state["params"]
    except KeyError:
        raise ReplicaError(f"worker {replica.worker_id} has no model loaded") from None


def _partition(replica):
    part = replica.state.get("partition")
    if part is None:
        raise ReplicaError(f"worker {replica.worker_id} holds no data partition")
    return part


def _arrays(replica, features, labels):
    """Feature/target matrices of the held partition, cached per column set."""
    part = _partition(replica)
    key = (tuple(features), tuple(labels))
    cached = replica.state.get("_arrays")
    if cached is not None and cached[0] is part and cached[1] == key:
        return cached[2], cached[3]
    x = part.matrix(features)
    y = part.matrix(labels) if labels else None
    replica.state["_arrays"] = (part, key, x, y)
    return x, y


def _targets(spec, y):
    return y.reshape(-1) if spec.loss is Loss.CROSS_ENTROPY else y


@task("load_params")
def load_params(replica, args):
    """Install the model from the last broadcast checkpoint bytes; returns its checksum."""
    spec, params = checkpoint.loads(replica.state["broadcast"])
    replica.state["spec"], replica.state["params"] = spec, params
    return checkpoint.params_checksum(params)


@task("get_params")
def get_params(replica, args):
    spec, params = _model(replica)
    return checkpoint.dumps(spec, params)


@task("params_checksum")
def params_checksum(replica, args):
    return checkpoint.params_checksum(_model(replica)[1])


def epoch_order(rows: int, seed: int, worker_id: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(rows)
    rng = np.random.default_rng((int(seed) ^ int(worker_id) ^ int(epoch)) & 0xFFFFFFFFFFFFFFFF)
    return rng.permutation(rows)


@task("train_epoch", collective=True)
def train_epoch(replica, args):
    """One epoch of synchronous data-parallel SGD.

    ``args`` keys: features, labels, batch_size, steps, epoch, seed, shuffle,
    learning_rate, threads, debug. Returns the mean of this replica's step
    losses, the step count and (debug only) the params checksum after every step.
    A diverging loss is reported, not raised, so the ring stays in lockstep and
    the driver decides.
    """
    spec, params = _model(replica)
    x, y = _arrays(replica, args["features"], args["labels"])
    b, steps = int(args["batch_size"]), int(args["steps"])
    rows = x.shape[0]
    if rows == 0:
        raise ReplicaError(f"worker {replica.worker_id} has an empty partition; repartition the data")
    if math.ceil(rows / b) < steps:
        raise ReplicaError(f"worker {replica.worker_id} has {rows} rows, too few for {steps} steps of {b}")
    sgd = SgdConfig(args["learning_rate"], args["seed"])
    compute = Compute(threads=int(args.get("threads", 1)))
    order = epoch_order(rows, args["seed"], replica.worker_id, args["epoch"], args["shuffle"])
    n = replica.n_workers
    losses, checksums = [], []
    for s in range(steps):
        idx = order[s * b:(s + 1) * b]
        loss, grads = model_backward(spec, params, x[idx], _targets(spec, y[idx]), compute)
        flat = grads.flatten()
        if n > 1:
            flat = replica.allreduce(flat, "mean")
            grads.assign_flat(flat)
        sgd_step(params, grads, sgd)
        losses.append(loss)
        if args.get("debug"):
            checksums.append(checkpoint.params_checksum(params))
    return {"loss": float(np.mean(losses)), "steps": steps, "checksums": checksums}


@task("predict_partition")
def predict_partition(replica, args):
    """``args``: (feature columns, ExecPlan). Returns the output matrix for the held partition."""
    features, plan = args
    spec, params = _model(replica)
    x, _ = _arrays(replica, features, ())
    return infer((spec, params), x, plan or ExecPlan())


def metric_terms(spec, output, targets, metric: str) -> tuple[float, int]:
    """(sum, count) whose ratio is the metric; sums combine exactly across partitions."""
    rows = output.shape[0]
    if rows == 0:
        return 0.0, 0
    if metric == "accuracy":
        if output.shape[1] == 1:
            pred = (output[:, 0] >= 0.5).astype(np.int64)
        else:
            pred = np.argmax(output, axis=1)
        truth = np.asarray(targets).reshape(rows, -1)[:, 0].astype(np.int64)
        return float(np.sum(pred == truth)), rows
    if metric == "mse":
        diff = output.astype(np.float64) - np.asarray(targets, dtype=np.float64).reshape(output.shape)
        return float(np.sum(diff * diff)), diff.size
    if metric == "loss":
        return compute_loss(spec, output, _targets(spec, targets)) * rows, rows
    raise ValueError(f"unknown metric {metric!r}; expected accuracy, mse or loss")


@task("evaluate_partition")
def evaluate_partition(replica, args):
    """``args``: (features, labels, metric). Returns (sum, count)."""
    features, labels, metric = args
    spec, params = _model(replica)
    x, y = _arrays(replica, features, labels)
    out = infer((spec, params), x, ExecPlan())
    return metric_terms(spec, out, y, metric)
