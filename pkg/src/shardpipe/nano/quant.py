"""Asymmetric per-tensor uint8 post-training quantization.

Real values map to codes via ``q = clamp(round(x / scale) + zero_point, 0, 255)``
and back via ``x = scale * (q - zero_point)``. Ranges come from exact min/max
calibration, always widened to contain 0 so that 0.0 is exactly representable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from shardpipe.nn.model import Activation, LayerSpec, Loss, ModelParams, ModelSpec, _activate
from shardpipe.nn.tensor import DEFAULT_BLOCK, DimensionError, Tensor, as_tensor, matmul, matmul_i16

QMIN, QMAX = 0, 255
# |q - z| <= 255, so |product| <= 65025 and 2**15 terms stay below 2**31.
MAX_INNER_DIM = 2**15


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= int(self.zero_point) <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [0, 255]")
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @classmethod
    def from_range(cls, lo: float, hi: float) -> QuantParams:
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        exact = (hi - lo) / 255.0
        scale32 = np.float32(exact)
        if float(scale32) > exact:  # round down so the 256 codes span at least [lo, hi]
            scale32 = np.nextafter(scale32, np.float32(0))
        scale = float(scale32)
        if hi == lo or scale < np.finfo(np.float32).tiny:
            return cls(1.0, 128)
        zero_point = int(np.clip(np.round(-lo / scale), QMIN, QMAX))
        # When -lo/scale sits on a half, float noise can push one end a code short;
        # a neighbouring zero point then maps lo -> 0 and hi -> 255 unclamped.
        for z in (zero_point, zero_point + 1, zero_point - 1):
            ends = np.rint(np.array([lo, hi]) / scale) + z
            if QMIN <= z <= QMAX and ends[0] == QMIN and ends[1] == QMAX:
                return cls(scale, z)
        return cls(scale, zero_point)

    def range(self) -> tuple[float, float]:
        """Real interval covered by the 256 codes."""
        return self.scale * (QMIN - self.zero_point), self.scale * (QMAX - self.zero_point)


@dataclass
class RangeObserver:
    """Running min/max over a stream of tensors."""

    lo: float = np.inf
    hi: float = -np.inf
    seen: int = 0

    def observe(self, t) -> None:
        a = np.asarray(t, dtype=np.float32)
        finite = a[np.isfinite(a)]
        if finite.size:
            self.lo = min(self.lo, float(finite.min()))
            self.hi = max(self.hi, float(finite.max()))
            self.seen += int(finite.size)

    def params(self) -> QuantParams:
        if not self.seen:
            raise CalibrationError("calibration saw no finite values")
        return QuantParams.from_range(self.lo, self.hi)


def calibrate(samples: Iterable) -> QuantParams:
    if isinstance(samples, np.ndarray):
        samples = [samples]
    obs = RangeObserver()
    for t in samples:
        obs.observe(t)
    return obs.params()


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # uint8, (rows, cols)
    params: QuantParams

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def quantize_tensor(t, p: QuantParams) -> QuantizedTensor:
    x = as_tensor(t)
    q = np.rint(x.astype(np.float64) / p.scale) + p.zero_point
    return QuantizedTensor(np.clip(q, QMIN, QMAX).astype(np.uint8), p)


def dequantize(q: QuantizedTensor) -> Tensor:
    # float64 product, one rounding to float32
    centred = q.data.astype(np.float64) - q.params.zero_point
    return (centred * q.params.scale).astype(np.float32)


def _centred(q: QuantizedTensor) -> np.ndarray:
    return (q.data.astype(np.int16) - np.int16(q.params.zero_point)).astype(np.int16)


def quantized_matmul(
    q_in: QuantizedTensor,
    q_w: QuantizedTensor,
    bias,
    out_params: QuantParams | None = None,
    threads: int = 1,
    block: int = DEFAULT_BLOCK,
    _w_centred_t: np.ndarray | None = None,
) -> Tensor:
    """Integer product of two quantized operands, rescaled to float32 plus ``bias``.

    ``out_params`` describes the calibrated output range; the result is returned
    as float32 and the consumer re-quantizes it against its own input params.
    """
    if q_in.cols != q_w.rows:
        raise DimensionError(f"matmul shape mismatch: {q_in.rows}x{q_in.cols} @ {q_w.rows}x{q_w.cols}")
    assert q_in.cols <= MAX_INNER_DIM, "int32 accumulator could overflow"
    bias = as_tensor(bias, rows=1, cols=q_w.cols)
    wt = _w_centred_t if _w_centred_t is not None else np.ascontiguousarray(_centred(q_w).T)
    acc = matmul_i16(_centred(q_in), wt, threads=threads, block=block)
    rescale = np.float32(q_in.params.scale) * np.float32(q_w.params.scale)
    return (acc.astype(np.float32) * rescale + bias).astype(np.float32)


@dataclass(frozen=True)
class QuantizedLayer:
    weight: QuantizedTensor
    bias: Tensor
    input_params: QuantParams
    output_params: QuantParams
    _w_centred_t: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self._w_centred_t is None:
            object.__setattr__(self, "_w_centred_t", np.ascontiguousarray(_centred(self.weight).T))
        for arr in (self.weight.data, self.bias, self._w_centred_t):
            arr.setflags(write=False)


@dataclass(frozen=True)
class QuantizedModel:
    spec: ModelSpec
    layers: tuple[QuantizedLayer, ...]

    def forward(self, batch, threads: int = 1, block: int = DEFAULT_BLOCK) -> Tensor:
        x = as_tensor(batch)
        if x.shape[1] != self.spec.input_dim:
            raise DimensionError(f"batch has {x.shape[1]} columns, model expects {self.spec.input_dim}")
        if x.shape[0] == 0:
            return np.zeros((0, self.spec.output_dim), dtype=np.float32)
        for layer_spec, layer in zip(self.spec.layers, self.layers):
            q_in = quantize_tensor(x, layer.input_params)
            z = quantized_matmul(
                q_in, layer.weight, layer.bias, layer.output_params,
                threads=threads, block=block, _w_centred_t=layer._w_centred_t,
            )
            x = _activate(z, layer_spec.activation)
        return x

    __call__ = forward


def _calibration_batches(calib) -> list[Tensor]:
    # Shards / RecordBatch inputs are handled by callers that know the feature columns.
    if isinstance(calib, np.ndarray):
        return [as_tensor(calib)]
    return [as_tensor(b) for b in calib]


def quantize_model(params: ModelParams, spec: ModelSpec, calib) -> QuantizedModel:
    """Record per-layer input/output ranges with an fp32 pass and quantize weights.

    ``calib`` is a matrix or an iterable of matrices with ``spec.input_dim`` columns.
    """
    params.check(spec)
    batches = [b for b in _calibration_batches(calib) if b.shape[0]]
    if not batches:
        raise CalibrationError("calibration data is empty")
    in_obs = [RangeObserver() for _ in spec.layers]
    out_obs = [RangeObserver() for _ in spec.layers]
    for x in batches:
        if x.shape[1] != spec.input_dim:
            raise DimensionError(f"calibration batch has {x.shape[1]} columns, model expects {spec.input_dim}")
        for i, (layer, w, b) in enumerate(zip(spec.layers, params.weights, params.biases)):
            in_obs[i].observe(x)
            z = matmul(x, w) + b
            out_obs[i].observe(z)
            x = _activate(z, layer.activation)
    layers = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        wq = quantize_tensor(w, calibrate(w))
        layers.append(QuantizedLayer(wq, b.copy(), in_obs[i].params(), out_obs[i].params()))
    return QuantizedModel(spec, tuple(layers))


# Quantized model file: b"SPQ8" | u16 version | u16 layers, then per layer
# u32 in | u32 out | u8 act | (f32 scale, u8 zero_point) x {weight, input, output}
# | weight u8 x (in*out) | bias f32 x out, and a trailing u8 loss code.
QMODEL_MAGIC = b"SPQ8"
_QHDR = struct.Struct("<4sHH")
_QLAYER = struct.Struct("<IIBfBfBfB")


def dumps_quantized(model: QuantizedModel) -> bytes:
    parts = [_QHDR.pack(QMODEL_MAGIC, 1, len(model.layers))]
    for spec, layer in zip(model.spec.layers, model.layers):
        parts.append(_QLAYER.pack(
            spec.input_dim, spec.output_dim, int(spec.activation),
            layer.weight.params.scale, layer.weight.params.zero_point,
            layer.input_params.scale, layer.input_params.zero_point,
            layer.output_params.scale, layer.output_params.zero_point,
        ))
        parts.append(layer.weight.data.tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    parts.append(struct.pack("<B", int(model.spec.loss)))
    return b"".join(parts)


def loads_quantized(data: bytes) -> QuantizedModel:
    try:
        magic, version, count = _QHDR.unpack_from(data, 0)
        if magic != QMODEL_MAGIC or version != 1:
            raise ValueError(f"not a quantized model file (magic {magic!r}, version {version})")
        pos = _QHDR.size
        specs, layers = [], []
        for _ in range(count):
            fi, fo, act, ws, wz, is_, iz, os_, oz = _QLAYER.unpack_from(data, pos)
            pos += _QLAYER.size
            w = np.frombuffer(data, np.uint8, fi * fo, pos).reshape(fi, fo).copy()
            pos += fi * fo
            b = np.frombuffer(data, "<f4", fo, pos).astype(np.float32).reshape(1, fo)
            pos += 4 * fo
            specs.append(LayerSpec(fi, fo, Activation(act)))
            layers.append(QuantizedLayer(
                QuantizedTensor(w, QuantParams(ws, wz)), b, QuantParams(is_, iz), QuantParams(os_, oz)
            ))
        (loss,) = struct.unpack_from("<B", data, pos)
    except struct.error:
        raise ValueError("quantized model file truncated") from None
    return QuantizedModel(ModelSpec(tuple(specs), Loss(loss)), tuple(layers))
