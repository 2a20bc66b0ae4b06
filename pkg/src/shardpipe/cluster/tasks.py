"""Static task table shared by driver and worker.

Tasks are plain functions ``f(worker, args) -> picklable result`` looked up by
name; no code travels over the wire. Collective tasks use the ring and must be
run on every worker at once.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Callable


@dataclass(frozen=True)
class Task:
    name: str
    func: Callable
    collective: bool = False


_REGISTRY: dict[str, Task] = {}


class UnknownTask(KeyError):
    pass


def task(name: str, collective: bool = False):
    def register(func):
        _REGISTRY[name] = Task(name, func, collective)
        return func

    return register


def lookup(name: str) -> Task:
    _load_builtin_modules()
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownTask(f"no task named {name!r}") from None


def is_collective(name: str) -> bool:
    t = _REGISTRY.get(name)
    return bool(t and t.collective)


def names() -> list[str]:
    _load_builtin_modules()
    return sorted(_REGISTRY)


def _load_builtin_modules() -> None:
    # Training tasks live with the estimator; importing registers them.
    import shardpipe.orca.training  # noqa: F401


@task("echo")
def _echo(worker, args):
    return worker.worker_id


@task("fail_on")
def _fail_on(worker, args):
    if worker.worker_id in set(args):
        raise RuntimeError(f"injected failure on worker {worker.worker_id}")
    return worker.worker_id


@task("sleep")
def _sleep(worker, args):
    time.sleep(float(args))
    return worker.worker_id


@task("set_state")
def _set_state(worker, args):
    worker.state.update(args)
    return sorted(args)


@task("get_state")
def _get_state(worker, args):
    return {k: worker.state.get(k) for k in args}


@task("broadcast_digest")
def _broadcast_digest(worker, args):
    return hashlib.sha256(worker.state.get("broadcast", b"")).hexdigest()


@task("partition_rows")
def _partition_rows(worker, args):
    part = worker.state.get("partition")
    return None if part is None else part.num_rows


@task("allreduce", collective=True)
def _allreduce(worker, args):
    """``args``: (float32 vector, op). Returns the result bytes and round count."""
    vec, op = args
    before = worker.allreduce_rounds
    out = worker.allreduce(vec, op)
    return out.tobytes(), worker.allreduce_rounds - before
