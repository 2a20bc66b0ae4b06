"""Bit-exact binary checkpoint of a model spec and its parameters.

Layout (little-endian)::

    b"SPNN" | u16 version=1 | u16 layer_count
    per layer: u32 input_dim | u32 output_dim | u8 activation
               | weight f32 x (in*out) row-major | bias f32 x out
    u8 loss code
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from shardpipe.nn.model import Activation, LayerSpec, Loss, ModelParams, ModelSpec

MAGIC = b"SPNN"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_LAYER = struct.Struct("<IIB")


class CheckpointError(ValueError):
    pass


def dumps(spec: ModelSpec, params: ModelParams) -> bytes:
    params.check(spec)
    parts = [_HEADER.pack(MAGIC, VERSION, len(spec.layers))]
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        parts.append(_LAYER.pack(layer.input_dim, layer.output_dim, int(layer.activation)))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(struct.pack("<B", int(spec.loss)))
    return b"".join(parts)


def loads(data: bytes) -> tuple[ModelSpec, ModelParams]:
    view = memoryview(data)
    if len(view) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: missing header")
    magic, version, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(magic)!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    layers, weights, biases = [], [], []
    try:
        for _ in range(count):
            fan_in, fan_out, act = _LAYER.unpack_from(view, pos)
            pos += _LAYER.size
            wbytes, bbytes = 4 * fan_in * fan_out, 4 * fan_out
            if pos + wbytes + bbytes > len(view):
                raise CheckpointError("checkpoint truncated inside layer data")
            w = np.frombuffer(view, dtype="<f4", count=fan_in * fan_out, offset=pos)
            pos += wbytes
            b = np.frombuffer(view, dtype="<f4", count=fan_out, offset=pos)
            pos += bbytes
            layers.append(LayerSpec(fan_in, fan_out, Activation(act)))
            weights.append(w.astype(np.float32).reshape(fan_in, fan_out))
            biases.append(b.astype(np.float32).reshape(1, fan_out))
        (loss_code,) = struct.unpack_from("<B", view, pos)
        pos += 1
    except struct.error:
        raise CheckpointError("checkpoint truncated") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    try:
        spec = ModelSpec(tuple(layers), Loss(loss_code))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return spec, ModelParams(weights, biases)


def save(path: str | os.PathLike, spec: ModelSpec, params: ModelParams) -> None:
    data = dumps(spec, params)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def params_checksum(params: ModelParams) -> str:
    h = hashlib.sha256()
    for t in params.tensors():
        h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return h.hexdigest()
