"""Length-prefixed binary framing shared by driver and workers.

Frame layout: ``b"SPW1" | u32 payload length (LE) | u8 msg_type | payload``.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

MAGIC = b"SPW1"
HEADER = struct.Struct("<4sIB")
MAX_PAYLOAD = 2**32 - 1


class MsgType(enum.IntEnum):
    HELLO = 0
    HELLO_ACK = 1
    BARRIER = 2
    BARRIER_RELEASE = 3
    BROADCAST = 4
    SCATTER = 5
    ALLREDUCE_CHUNK = 6
    TASK_RUN = 7
    TASK_RESULT = 8
    HEARTBEAT = 9
    SHUTDOWN = 10
    ERROR = 11


class ProtocolError(RuntimeError):
    pass


class ConnectionClosed(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds u32 length field")
    return HEADER.pack(MAGIC, len(payload), int(MsgType(msg_type))) + bytes(payload)


def parse_header(header: bytes) -> tuple[int, MsgType]:
    magic, length, code = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    try:
        return length, MsgType(code)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {code}") from None


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the front of ``data``; returns (frame, bytes consumed)."""
    if len(data) < HEADER.size:
        raise ProtocolError("incomplete frame header")
    length, msg_type = parse_header(data[:HEADER.size])
    end = HEADER.size + length
    if len(data) < end:
        raise ProtocolError(f"incomplete frame: need {length} payload bytes, have {len(data) - HEADER.size}")
    return Frame(msg_type, bytes(data[HEADER.size:end])), end


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionClosed("peer closed the connection")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    """Read one frame. On a malformed header the socket is closed before raising."""
    header = recv_exact(sock, HEADER.size)
    try:
        length, msg_type = parse_header(header)
    except ProtocolError:
        sock.close()
        raise
    return Frame(msg_type, recv_exact(sock, length) if length else b"")


def write_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(msg_type, payload))
