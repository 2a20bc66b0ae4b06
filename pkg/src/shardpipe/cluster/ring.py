"""Ring allreduce over abstract send/recv channels.

The vector is cut into ``n`` contiguous chunks (larger chunks first). During
``n - 1`` reduce-scatter rounds each rank forwards a running partial sum to its
successor; afterwards rank ``r`` holds the complete sum of chunk ``(r + 1) % n``.
``n - 1`` allgather rounds then circulate the finished chunks. Partial sums
travel as float64 so that every chunk is reduced exactly once, and the final
cast to float32 happens identically on every rank.
"""

from __future__ import annotations

import enum
import struct
from typing import Callable

import numpy as np

from shardpipe.cluster.protocol import ProtocolError

_CHUNK_HDR = struct.Struct("<QII")  # total length, round, chunk index


class ReduceOp(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


def chunk_bounds(length: int, n: int) -> list[tuple[int, int]]:
    base, extra = divmod(length, n)
    bounds, start = [], 0
    for c in range(n):
        size = base + (1 if c < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def pack_chunk(total: int, round_no: int, index: int, values: np.ndarray) -> bytes:
    return _CHUNK_HDR.pack(total, round_no, index) + np.ascontiguousarray(values, dtype="<f8").tobytes()


def unpack_chunk(payload: bytes, total: int, round_no: int, index: int, size: int) -> np.ndarray:
    if len(payload) < _CHUNK_HDR.size:
        raise ProtocolError("allreduce chunk frame too short")
    their_total, their_round, their_index = _CHUNK_HDR.unpack_from(payload)
    if their_total != total:
        raise ProtocolError(f"allreduce length mismatch: local {total}, peer {their_total}")
    if (their_round, their_index) != (round_no, index):
        raise ProtocolError(
            f"allreduce out of step: expected round {round_no} chunk {index}, got {their_round}/{their_index}"
        )
    body = len(payload) - _CHUNK_HDR.size
    if body != 8 * size:
        raise ProtocolError(f"allreduce chunk {index} carries {body} bytes, expected {8 * size}")
    return np.frombuffer(payload, dtype="<f8", offset=_CHUNK_HDR.size).astype(np.float64)


def ring_allreduce(
    local,
    rank: int,
    n: int,
    send: Callable[[bytes], None],
    recv: Callable[[], bytes],
    op: ReduceOp | str = ReduceOp.SUM,
) -> tuple[np.ndarray, int]:
    """Return ``(reduced float32 vector, communication rounds performed)``.

    ``send`` delivers a payload to the successor; ``recv`` blocks for the next
    payload from the predecessor.
    """
    op = ReduceOp(op)
    vec = np.asarray(local, dtype=np.float32).reshape(-1)
    total = vec.size
    if n == 1:
        return vec.copy(), 0
    work = vec.astype(np.float64)
    bounds = chunk_bounds(total, n)
    rounds = 0
    for step in range(n - 1):
        send_idx = (rank - step) % n
        recv_idx = (rank - step - 1) % n
        s0, s1 = bounds[send_idx]
        send(pack_chunk(total, rounds, send_idx, work[s0:s1]))
        r0, r1 = bounds[recv_idx]
        incoming = unpack_chunk(recv(), total, rounds, recv_idx, r1 - r0)
        work[r0:r1] = incoming + work[r0:r1]
        rounds += 1
    for step in range(n - 1):
        send_idx = (rank + 1 - step) % n
        recv_idx = (rank - step) % n
        s0, s1 = bounds[send_idx]
        send(pack_chunk(total, rounds, send_idx, work[s0:s1]))
        r0, r1 = bounds[recv_idx]
        work[r0:r1] = unpack_chunk(recv(), total, rounds, recv_idx, r1 - r0)
        rounds += 1
    if op is ReduceOp.MEAN:
        work /= n
    return work.astype(np.float32), rounds
