import queue
import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import serial_sum
from shardpipe.cluster.protocol import (
    HEADER,
    MAGIC,
    ConnectionClosed,
    Frame,
    MsgType,
    ProtocolError,
    decode_frame,
    encode_frame,
    read_frame,
    write_frame,
)
from shardpipe.cluster.ring import chunk_bounds, ring_allreduce


# -- framing -------------------------------------------------------------------


def test_frame_layout_is_bit_exact():
    raw = encode_frame(MsgType.TASK_RUN, b"abc")
    assert raw == b"SPW1" + (3).to_bytes(4, "little") + bytes([7]) + b"abc"
    assert HEADER.size == 9


def test_msg_type_codes():
    expected = ["HELLO", "HELLO_ACK", "BARRIER", "BARRIER_RELEASE", "BROADCAST", "SCATTER",
                "ALLREDUCE_CHUNK", "TASK_RUN", "TASK_RESULT", "HEARTBEAT", "SHUTDOWN", "ERROR"]
    assert [m.name for m in sorted(MsgType)] == expected
    assert [int(m) for m in sorted(MsgType)] == list(range(12))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=512))
def test_encode_decode_identity(msg_type, payload):
    raw = encode_frame(msg_type, payload)
    frame, used = decode_frame(raw + b"trailing")
    assert frame == Frame(msg_type, payload)
    assert used == len(raw)


def test_decode_rejects_bad_magic_unknown_type_and_truncation():
    good = encode_frame(MsgType.HELLO, b"xy")
    with pytest.raises(ProtocolError, match="magic"):
        decode_frame(b"XXXX" + good[4:])
    with pytest.raises(ProtocolError, match="msg_type"):
        decode_frame(good[:8] + bytes([12]) + good[9:])
    with pytest.raises(ProtocolError, match="incomplete"):
        decode_frame(good[:-1])
    with pytest.raises(ProtocolError, match="header"):
        decode_frame(good[:5])


def test_socket_round_trip_all_types():
    a, b = socket.socketpair()
    try:
        for t in MsgType:
            write_frame(a, t, bytes([int(t)]) * int(t))
            assert read_frame(b) == Frame(t, bytes([int(t)]) * int(t))
    finally:
        a.close()
        b.close()


def test_corrupt_magic_closes_connection():
    a, b = socket.socketpair()
    try:
        a.sendall(b"BAD!" + encode_frame(MsgType.HELLO)[4:])
        with pytest.raises(ProtocolError, match="magic"):
            read_frame(b)
        assert b.fileno() == -1  # closed by read_frame
    finally:
        a.close()


def test_peer_close_is_reported():
    a, b = socket.socketpair()
    a.close()
    with pytest.raises(ConnectionClosed):
        read_frame(b)
    b.close()


# -- ring allreduce over in-process channels --------------------------------------


def run_ring(vectors, op="sum", timeout=10.0):
    """Run ring_allreduce on len(vectors) threads; returns (results, rounds, errors)."""
    n = len(vectors)
    inbox = [queue.Queue() for _ in range(n)]
    results, rounds, errors = [None] * n, [None] * n, [None] * n

    def rank(r):
        def send(payload):
            inbox[(r + 1) % n].put(payload)

        def recv():
            return inbox[r].get(timeout=timeout)

        try:
            results[r], rounds[r] = ring_allreduce(vectors[r], r, n, send, recv, op)
        except Exception as exc:
            errors[r] = exc

    threads = [threading.Thread(target=rank, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, rounds, errors


def test_hand_sum_three_workers():
    vecs = [np.array(v, np.float32) for v in ([1, 2], [3, 4], [5, 6])]
    results, rounds, errors = run_ring(vecs)
    assert errors == [None] * 3
    for r in results:
        assert r.dtype == np.float32
        assert r.tolist() == [9.0, 12.0]
    assert rounds == [4, 4, 4]


def test_hand_mean_three_workers():
    vecs = [np.array(v, np.float32) for v in ([1, 2], [3, 4], [5, 6])]
    results, _, _ = run_ring(vecs, "mean")
    assert all(r.tolist() == [3.0, 4.0] for r in results)


@pytest.mark.parametrize("op", ["sum", "mean"])
def test_single_worker_is_identity(op):
    v = np.array([1.5, -2.0, 3.25], np.float32)
    results, rounds, _ = run_ring([v], op)
    assert results[0].tobytes() == v.tobytes()
    assert rounds == [0]


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_matches_serial_sum_for_ragged_lengths(k):
    rng = np.random.default_rng(k)
    for length in (1, k - 1, k, k + 1, 1000):
        if length == 0:
            continue
        vecs = [rng.uniform(-1000, 1000, length).astype(np.float32) for _ in range(k)]
        results, rounds, errors = run_ring(vecs)
        assert errors == [None] * k
        oracle = serial_sum(vecs)
        scale = np.maximum(np.abs(oracle), 1e-30)
        assert np.all(np.abs(results[0].astype(np.float64) - oracle) / scale <= 1e-6)
        assert len({r.tobytes() for r in results}) == 1
        assert rounds == [2 * (k - 1)] * k


def test_chunks_are_contiguous_larger_first():
    assert chunk_bounds(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    assert chunk_bounds(2, 3) == [(0, 1), (1, 2), (2, 2)]
    for length in range(0, 30):
        for n in range(1, 7):
            b = chunk_bounds(length, n)
            sizes = [e - s for s, e in b]
            assert sum(sizes) == length and sizes == sorted(sizes, reverse=True)
            assert max(sizes) - min(sizes) <= 1


def test_length_mismatch_is_a_protocol_error():
    vecs = [np.zeros(4, np.float32), np.zeros(5, np.float32), np.zeros(4, np.float32)]
    _, _, errors = run_ring(vecs, timeout=2.0)
    assert any(isinstance(e, ProtocolError) and "length mismatch" in str(e) for e in errors)
