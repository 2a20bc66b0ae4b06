"""Worker process: handshake, ring links, control loop.

Started as ``python -m shardpipe --worker --id N --driver HOST:PORT``. A reader
thread owns the driver socket so that Shutdown (or the driver vanishing) ends
the process even while the control loop is busy in a task or a collective.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
import queue
import signal
import socket
import threading
import time
import traceback

from shardpipe.cluster.protocol import (
    ConnectionClosed,
    Frame,
    MsgType,
    ProtocolError,
    read_frame,
    write_frame,
)

log = logging.getLogger("shardpipe.worker")

CONNECT_RETRY_SECONDS = 10.0


class RingBroken(ProtocolError):
    pass


class Worker:
    def __init__(self, worker_id: int, driver: tuple[str, int], heartbeat: float = 0.5):
        self.worker_id = worker_id
        self.driver_addr = driver
        self.heartbeat = heartbeat
        self.n_workers = 1
        self.state: dict = {}
        self.allreduce_rounds = 0
        self._send_lock = threading.Lock()
        self._inbox: queue.Queue[Frame | None] = queue.Queue()
        self._ring_in: queue.Queue[bytes | None] = queue.Queue()
        self._succ: socket.socket | None = None
        self._pred: socket.socket | None = None
        self._ring_listener: socket.socket | None = None
        self._ring_broken = False
        self._sock: socket.socket | None = None

    # -- driver link -----------------------------------------------------

    def send(self, msg_type: MsgType, payload: bytes = b"") -> None:
        with self._send_lock:
            write_frame(self._sock, msg_type, payload)

    def _connect_driver(self) -> socket.socket:
        deadline = time.monotonic() + CONNECT_RETRY_SECONDS
        while True:
            try:
                return socket.create_connection(self.driver_addr, timeout=5.0)
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def _reader(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if frame.msg_type is MsgType.SHUTDOWN:
                    log.debug("worker %d: shutdown", self.worker_id)
                    self._exit(0)
                self._inbox.put(frame)
        except (ConnectionClosed, OSError, ProtocolError) as exc:
            log.debug("worker %d: driver link lost (%s)", self.worker_id, exc)
            self._exit(1)

    def _heartbeats(self) -> None:
        while True:
            time.sleep(self.heartbeat)
            try:
                self.send(MsgType.HEARTBEAT)
            except OSError:
                return

    def _exit(self, code: int) -> None:
        for s in (self._succ, self._pred, self._ring_listener, self._sock):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        logging.shutdown()
        os._exit(code)

    # -- ring ------------------------------------------------------------

    def _setup_ring(self, successor: tuple[str, int]) -> None:
        succ = socket.create_connection(successor, timeout=10.0)
        succ.settimeout(None)
        succ.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_frame(succ, MsgType.HELLO, json.dumps({"id": self.worker_id}).encode())
        self._ring_listener.settimeout(10.0)
        pred, _ = self._ring_listener.accept()
        pred.settimeout(None)
        hello = read_frame(pred)
        expected = (self.worker_id - 1) % self.n_workers
        if hello.msg_type is not MsgType.HELLO or json.loads(hello.payload)["id"] != expected:
            raise ProtocolError(f"ring predecessor handshake failed on worker {self.worker_id}")
        self._succ, self._pred = succ, pred
        threading.Thread(target=self._ring_reader, daemon=True, name="ring-reader").start()

    def _ring_reader(self) -> None:
        try:
            while True:
                frame = read_frame(self._pred)
                if frame.msg_type is not MsgType.ALLREDUCE_CHUNK:
                    raise ProtocolError(f"unexpected {frame.msg_type.name} on ring link")
                self._ring_in.put(frame.payload)
        except (ConnectionClosed, OSError, ProtocolError):
            self._ring_in.put(None)

    def _ring_send(self, payload: bytes) -> None:
        if self._ring_broken:
            raise RingBroken("ring is broken")
        try:
            write_frame(self._succ, MsgType.ALLREDUCE_CHUNK, payload)
        except OSError as exc:
            self._ring_broken = True
            raise RingBroken(f"send to successor failed: {exc}") from None

    def _ring_recv(self) -> bytes:
        if self._ring_broken:
            raise RingBroken("ring is broken")
        payload = self._ring_in.get()
        if payload is None:
            self._ring_broken = True
            raise RingBroken("predecessor link closed")
        return payload

    def break_ring(self) -> None:
        self._ring_broken = True
        for s in (self._succ, self._pred):
            if s is not None:
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def allreduce(self, local, op="sum"):
        """Collective ring allreduce; every worker must call it with equal lengths."""
        from shardpipe.cluster.ring import ring_allreduce

        out, rounds = ring_allreduce(local, self.worker_id, self.n_workers, self._ring_send, self._ring_recv, op)
        self.allreduce_rounds += rounds
        return out

    # -- control loop ----------------------------------------------------

    def run(self) -> int:
        self._ring_listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._ring_listener.bind((self.driver_addr[0], 0))
        self._ring_listener.listen(1)
        self._sock = self._connect_driver()
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        hello = {"id": self.worker_id, "pid": os.getpid(), "ring_port": self._ring_listener.getsockname()[1]}
        write_frame(self._sock, MsgType.HELLO, json.dumps(hello).encode())
        ack = read_frame(self._sock)
        if ack.msg_type is MsgType.SHUTDOWN:
            self._exit(0)
        if ack.msg_type is not MsgType.HELLO_ACK:
            raise ProtocolError(f"expected HelloAck, got {ack.msg_type.name}")
        info = json.loads(ack.payload)
        self.n_workers = int(info["n"])
        if self.n_workers > 1:
            self._setup_ring(tuple(info["successor"]))
        threading.Thread(target=self._reader, daemon=True, name="driver-reader").start()
        threading.Thread(target=self._heartbeats, daemon=True, name="heartbeat").start()
        self.send(MsgType.HELLO_ACK, json.dumps({"id": self.worker_id, "ring": "ok"}).encode())
        log.debug("worker %d ready (n=%d)", self.worker_id, self.n_workers)
        while True:
            frame = self._inbox.get()
            self._dispatch(frame)

    def _dispatch(self, frame: Frame) -> None:
        t = frame.msg_type
        if t is MsgType.BARRIER:
            delay = float(self.state.get("barrier_delay", 0.0))
            if delay:
                time.sleep(delay)
            self.state["barrier_arrived"] = time.time()
            self.send(MsgType.BARRIER)
        elif t is MsgType.BARRIER_RELEASE:
            self.state["barrier_released"] = time.time()
        elif t is MsgType.BROADCAST:
            self.state["broadcast"] = frame.payload
            self.send(MsgType.BROADCAST, hashlib.sha256(frame.payload).digest())
        elif t is MsgType.SCATTER:
            partition = pickle.loads(frame.payload)
            self.state["partition"] = partition
            self.send(MsgType.SCATTER, json.dumps({"rows": partition.num_rows}).encode())
        elif t is MsgType.TASK_RUN:
            self._run_task(frame.payload)
        else:
            self.send(MsgType.ERROR, f"unexpected {t.name} frame".encode())

    def _run_task(self, payload: bytes) -> None:
        from shardpipe.cluster import tasks

        name, args = pickle.loads(payload)
        try:
            task = tasks.lookup(name)
            result = task.func(self, args)
        except BaseException as exc:  # report everything, keep serving
            if tasks.is_collective(name):
                self.break_ring()
            msg = f"{type(exc).__name__}: {exc}"
            log.debug("worker %d task %s failed:\n%s", self.worker_id, name, traceback.format_exc())
            self.send(MsgType.ERROR, msg.encode())
            return
        self.send(MsgType.TASK_RESULT, pickle.dumps(result, protocol=pickle.HIGHEST_PROTOCOL))


def worker_main(worker_id: int, driver: str, heartbeat: float = 0.5) -> int:
    signal.signal(signal.SIGINT, signal.SIG_IGN)  # the driver coordinates shutdown
    host, _, port = driver.rpartition(":")
    logging.basicConfig(
        level=os.environ.get("SHARDPIPE_LOG", "WARNING").upper(),
        format=f"%(asctime)s worker{worker_id} %(levelname)s %(message)s",
    )
    w = Worker(worker_id, (host, int(port)), heartbeat)
    try:
        return w.run()
    except Exception as exc:
        log.error("worker %d failed: %s", worker_id, exc)
        w._exit(2)
    return 2
