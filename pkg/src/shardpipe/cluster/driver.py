"""Driver side of the cluster runtime: launch, supervise, collectives, shutdown.

Failure model is crash-stop and fail-fast: a dead worker (socket EOF, process
exit, or missed heartbeats) is never revived, and any collective it was part of
raises :class:`WorkerDied`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import pickle
import queue
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from shardpipe.cluster.protocol import (
    ConnectionClosed,
    Frame,
    MsgType,
    ProtocolError,
    read_frame,
    write_frame,
)

log = logging.getLogger("shardpipe.cluster")

SHUTDOWN_GRACE = 2.0


class ClusterError(RuntimeError):
    pass


class LaunchError(ClusterError):
    def __init__(self, message: str, missing: list[int] | None = None):
        super().__init__(message)
        self.missing = missing or []


class WorkerDied(ClusterError):
    def __init__(self, worker_id: int, during: str):
        super().__init__(f"worker {worker_id} died during {during}")
        self.worker_id = worker_id


class TaskError(ClusterError):
    def __init__(self, worker_id: int, message: str):
        super().__init__(f"task failed on worker {worker_id}: {message}")
        self.worker_id = worker_id
        self.worker_message = message


class State(str, enum.Enum):
    LAUNCHING = "launching"
    READY = "ready"
    SHUTTING_DOWN = "shutting_down"
    DOWN = "down"


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int = 2
    host: str = "127.0.0.1"
    base_port: int = 0  # 0 picks a free port
    handshake_timeout: float = 30.0
    heartbeat_interval: float = 0.5
    heartbeat_timeout: float = 15.0
    connect_address: tuple[str, int] | None = None  # what workers dial; defaults to the listen address

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if not self.handshake_timeout > 0:
            raise ValueError("handshake_timeout must be > 0")
        if not self.heartbeat_interval > 0 or not self.heartbeat_timeout > 0:
            raise ValueError("heartbeat settings must be > 0")


@dataclass
class WorkerHandle:
    worker_id: int
    process: subprocess.Popen
    sock: socket.socket | None = None
    inbox: queue.Queue = field(default_factory=queue.Queue)
    last_heartbeat: float = field(default_factory=time.monotonic)
    alive: bool = True
    send_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def pid(self) -> int:
        return self.process.pid

    def mark_dead(self) -> None:
        # Monotone: once dead, a worker never comes back.
        if self.alive:
            self.alive = False
            self.inbox.put(None)


def _worker_env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def worker_command(worker_id: int, driver: str, heartbeat: float) -> list[str]:
    return [
        sys.executable, "-m", "shardpipe",
        "--worker", "--id", str(worker_id), "--driver", driver,
        "--heartbeat", repr(heartbeat),
    ]


class ClusterContext:
    """Driver-side handle on a set of worker processes.

    Public operations are not thread-safe with respect to each other; callers
    serialize them (``shutdown`` is the exception and may be called from
    another thread or a signal handler path).
    """

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.state = State.LAUNCHING
        self.workers: list[WorkerHandle] = []
        self.ring_ok = True
        self._listener: socket.socket | None = None
        self._stop = threading.Event()
        self._shutdown_lock = threading.Lock()

    # -- properties ------------------------------------------------------

    @property
    def n_workers(self) -> int:
        return self.config.n_workers

    @property
    def pids(self) -> list[int]:
        return [w.pid for w in self.workers]

    def liveness(self) -> dict[int, bool]:
        return {w.worker_id: w.alive for w in self.workers}

    def __enter__(self) -> ClusterContext:
        return self

    def __exit__(self, *exc) -> None:
        shutdown(self)

    def _require_ready(self, what: str) -> None:
        if self.state is not State.READY:
            raise ClusterError(f"cannot {what}: cluster is {self.state.value}")
        dead = [w.worker_id for w in self.workers if not w.alive]
        if dead:
            raise WorkerDied(dead[0], what)

    # -- plumbing --------------------------------------------------------

    def _send(self, w: WorkerHandle, msg_type: MsgType, payload: bytes = b"") -> None:
        try:
            with w.send_lock:
                write_frame(w.sock, msg_type, payload)
        except OSError:
            w.mark_dead()
            raise WorkerDied(w.worker_id, msg_type.name.lower()) from None

    def _expect(self, w: WorkerHandle, types: tuple[MsgType, ...], during: str, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if not w.alive and w.inbox.empty():
                raise WorkerDied(w.worker_id, during)
            try:
                frame = w.inbox.get(timeout=0.05)
            except queue.Empty:
                if deadline is not None and time.monotonic() > deadline:
                    raise ClusterError(f"timed out waiting for worker {w.worker_id} during {during}")
                continue
            if frame is None:
                raise WorkerDied(w.worker_id, during)
            if frame.msg_type in types:
                return frame
            if frame.msg_type is MsgType.ERROR and MsgType.ERROR not in types:
                raise ClusterError(f"worker {w.worker_id} reported: {frame.payload.decode(errors='replace')}")
            raise ProtocolError(f"worker {w.worker_id} sent {frame.msg_type.name} during {during}")

    def _reader(self, w: WorkerHandle) -> None:
        try:
            while not self._stop.is_set():
                frame = read_frame(w.sock)
                if frame.msg_type is MsgType.HEARTBEAT:
                    w.last_heartbeat = time.monotonic()
                    continue
                w.last_heartbeat = time.monotonic()
                w.inbox.put(frame)
        except (ConnectionClosed, OSError, ProtocolError) as exc:
            if not self._stop.is_set():
                log.warning("worker %d connection lost: %s", w.worker_id, exc)
        w.mark_dead()

    def _supervise(self) -> None:
        while not self._stop.wait(min(0.1, self.config.heartbeat_interval)):
            now = time.monotonic()
            for w in self.workers:
                if not w.alive:
                    continue
                if w.process.poll() is not None:
                    log.warning("worker %d exited with %s", w.worker_id, w.process.returncode)
                    w.mark_dead()
                elif now - w.last_heartbeat > self.config.heartbeat_timeout:
                    log.warning("worker %d missed heartbeats", w.worker_id)
                    w.mark_dead()

    def _kill_all(self) -> None:
        for w in self.workers:
            if w.process.poll() is None:
                w.process.kill()
        for w in self.workers:
            try:
                w.process.wait(timeout=5.0)
            except subprocess.TimeoutExpired:  # pragma: no cover
                log.error("worker %d (pid %d) did not die", w.worker_id, w.pid)
            w.alive = False

    # -- collectives -----------------------------------------------------

    def barrier(self) -> None:
        self._require_ready("barrier")
        for w in self.workers:
            self._send(w, MsgType.BARRIER)
        for w in self.workers:
            self._expect(w, (MsgType.BARRIER,), "barrier")
        for w in self.workers:
            self._send(w, MsgType.BARRIER_RELEASE)

    def broadcast(self, payload: bytes) -> None:
        self._require_ready("broadcast")
        digest = hashlib.sha256(payload).digest()
        for w in self.workers:
            self._send(w, MsgType.BROADCAST, payload)
        for w in self.workers:
            ack = self._expect(w, (MsgType.BROADCAST,), "broadcast")
            if ack.payload != digest:
                raise ProtocolError(f"worker {w.worker_id} acknowledged a different broadcast payload")

    def scatter_shards(self, shards) -> list[int]:
        """Send partition ``i`` to worker ``i``; returns the row counts each worker holds."""
        self._require_ready("scatter")
        if shards.num_partitions() != self.n_workers:
            raise ClusterError(
                f"scatter needs one partition per worker: got {shards.num_partitions()} partitions "
                f"for {self.n_workers} workers; call repartition({self.n_workers}) first"
            )
        for w, part in zip(self.workers, shards.partitions):
            self._send(w, MsgType.SCATTER, pickle.dumps(part, protocol=pickle.HIGHEST_PROTOCOL))
        return [json.loads(self._expect(w, (MsgType.SCATTER,), "scatter").payload)["rows"] for w in self.workers]

    def run_task(self, name: str, args=None, per_worker_args: list | None = None) -> list:
        """Run a registered task on every worker; results ordered by worker id."""
        self._require_ready(f"run task {name!r}")
        if per_worker_args is not None and len(per_worker_args) != self.n_workers:
            raise ValueError(f"per_worker_args needs {self.n_workers} entries")
        for w in self.workers:
            a = per_worker_args[w.worker_id] if per_worker_args is not None else args
            self._send(w, MsgType.TASK_RUN, pickle.dumps((name, a), protocol=pickle.HIGHEST_PROTOCOL))
        results, failure, died = [], None, None
        for w in self.workers:
            try:
                frame = self._expect(w, (MsgType.TASK_RESULT, MsgType.ERROR), f"task {name!r}")
            except WorkerDied as exc:
                died = died or exc
                continue
            if frame.msg_type is MsgType.ERROR:
                failure = failure or TaskError(w.worker_id, frame.payload.decode(errors="replace"))
            else:
                results.append(pickle.loads(frame.payload))
        if died is not None:
            raise died
        if failure is not None:
            from shardpipe.cluster import tasks

            if tasks.is_collective(name):
                self.ring_ok = False
            raise failure
        return results


def launch_cluster(config: ClusterConfig) -> ClusterContext:
    """Spawn ``n_workers`` worker processes and complete the handshake.

    On any failure every spawned process is killed before the error propagates.
    """
    ctx = ClusterContext(config)
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        listener.bind((config.host, config.base_port))
    except OSError as exc:
        listener.close()
        ctx.state = State.DOWN
        raise LaunchError(f"cannot listen on {config.host}:{config.base_port}: {exc}") from None
    listener.listen(config.n_workers)
    listener.settimeout(0.05)
    ctx._listener = listener
    host, port = config.connect_address or listener.getsockname()[:2]
    address = f"{host}:{port}"
    try:
        for i in range(config.n_workers):
            proc = subprocess.Popen(
                worker_command(i, address, config.heartbeat_interval),
                env=_worker_env(),
                stdin=subprocess.DEVNULL,
            )
            ctx.workers.append(WorkerHandle(i, proc))
        _handshake(ctx, time.monotonic() + config.handshake_timeout)
    except BaseException:
        ctx._stop.set()
        ctx._kill_all()
        _close_sockets(ctx)
        ctx.state = State.DOWN
        raise
    for w in ctx.workers:
        threading.Thread(target=ctx._reader, args=(w,), daemon=True, name=f"worker{w.worker_id}-reader").start()
    # Ring confirmations arrive through the readers.
    deadline = time.monotonic() + config.handshake_timeout
    try:
        for w in ctx.workers:
            ctx._expect(w, (MsgType.HELLO_ACK,), "ring setup", timeout=max(0.0, deadline - time.monotonic()))
    except BaseException as exc:
        ctx._stop.set()
        ctx._kill_all()
        _close_sockets(ctx)
        ctx.state = State.DOWN
        raise LaunchError(f"ring setup failed: {exc}") from None
    threading.Thread(target=ctx._supervise, daemon=True, name="cluster-supervisor").start()
    ctx.state = State.READY
    log.info("cluster ready: %d workers, pids %s", config.n_workers, ctx.pids)
    return ctx


def _handshake(ctx: ClusterContext, deadline: float) -> None:
    by_id = {w.worker_id: w for w in ctx.workers}
    ring_ports: dict[int, int] = {}
    while len(ring_ports) < len(by_id):
        if time.monotonic() > deadline:
            missing = sorted(set(by_id) - set(ring_ports))
            raise LaunchError(f"handshake timed out; missing workers {missing}", missing)
        try:
            conn, _ = ctx._listener.accept()
        except socket.timeout:
            continue
        conn.settimeout(max(0.1, deadline - time.monotonic()))
        try:
            hello = read_frame(conn)
            if hello.msg_type is not MsgType.HELLO:
                raise ProtocolError(f"expected Hello, got {hello.msg_type.name}")
            info = json.loads(hello.payload)
            wid = int(info["id"])
            if wid not in by_id or wid in ring_ports:
                raise ProtocolError(f"unexpected or duplicate worker id {wid}")
        except (ProtocolError, OSError, ValueError, KeyError) as exc:
            log.warning("rejected connection during handshake: %s", exc)
            conn.close()
            continue
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        by_id[wid].sock = conn
        ring_ports[wid] = int(info["ring_port"])
    n = len(by_id)
    ring_host = ctx.config.host
    for wid, w in by_id.items():
        succ = (wid + 1) % n
        payload = {"n": n, "successor": [ring_host, ring_ports[succ]]}
        write_frame(w.sock, MsgType.HELLO_ACK, json.dumps(payload).encode())


def _close_sockets(ctx: ClusterContext) -> None:
    for w in ctx.workers:
        if w.sock is not None:
            try:
                w.sock.close()
            except OSError:
                pass
    if ctx._listener is not None:
        ctx._listener.close()
        ctx._listener = None


def shutdown(ctx: ClusterContext) -> None:
    """Stop every worker (Shutdown frame, then force-kill after the grace period). Idempotent."""
    with ctx._shutdown_lock:
        if ctx.state is State.DOWN:
            return
        ctx.state = State.SHUTTING_DOWN
        ctx._stop.set()
        for w in ctx.workers:
            if w.sock is not None and w.process.poll() is None:
                try:
                    with w.send_lock:
                        write_frame(w.sock, MsgType.SHUTDOWN)
                except OSError:
                    pass
        deadline = time.monotonic() + SHUTDOWN_GRACE
        for w in ctx.workers:
            try:
                w.process.wait(timeout=max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                log.warning("worker %d ignored shutdown; killing pid %d", w.worker_id, w.pid)
        ctx._kill_all()
        _close_sockets(ctx)
        for w in ctx.workers:
            w.mark_dead()
        ctx.state = State.DOWN
        log.info("cluster down")


def barrier(ctx: ClusterContext) -> None:
    ctx.barrier()


def broadcast(ctx: ClusterContext, payload: bytes) -> None:
    ctx.broadcast(payload)


def scatter_shards(ctx: ClusterContext, shards) -> list[int]:
    return ctx.scatter_shards(shards)


def run_task(ctx: ClusterContext, name: str, args=None, per_worker_args=None) -> list:
    return ctx.run_task(name, args, per_worker_args)
