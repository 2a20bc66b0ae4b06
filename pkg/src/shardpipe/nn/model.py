"""Dense MLP: declarative spec, parameters, forward/backward passes and SGD."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from shardpipe.nn.tensor import DEFAULT_BLOCK, DimensionError, Tensor, as_tensor, matmul


class Activation(enum.IntEnum):
    # Values are the checkpoint activation codes.
    IDENTITY = 0
    RELU = 1
    SOFTMAX = 2

    @classmethod
    def parse(cls, name: str | Activation) -> Activation:
        if isinstance(name, Activation):
            return name
        key = str(name).strip().lower()
        aliases = {"id": "identity", "linear": "identity", "none": "identity"}
        key = aliases.get(key, key)
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown activation {name!r}") from None


class Loss(enum.IntEnum):
    # Values are the checkpoint trailer codes.
    MSE = 0
    CROSS_ENTROPY = 1

    @classmethod
    def parse(cls, name: str | Loss) -> Loss:
        if isinstance(name, Loss):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        if key == "mse":
            return cls.MSE
        if key in ("crossentropy", "ce"):
            return cls.CROSS_ENTROPY
        raise ValueError(f"unknown loss {name!r}")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        if int(self.input_dim) < 1 or int(self.output_dim) < 1:
            raise SpecError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "output_dim", int(self.output_dim))


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    loss: Loss = Loss.MSE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "loss", Loss.parse(self.loss))
        if not self.layers:
            raise SpecError("model needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.output_dim != b.input_dim:
                raise SpecError(
                    f"layer {i} output_dim {a.output_dim} != layer {i + 1} input_dim {b.input_dim}"
                )
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation is Activation.SOFTMAX:
                raise SpecError(f"softmax is only allowed on the final layer (found on layer {i})")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @classmethod
    def from_dims(cls, dims, activations, loss=Loss.MSE) -> ModelSpec:
        dims = list(dims)
        activations = list(activations)
        if len(activations) != len(dims) - 1:
            raise SpecError(f"{len(dims) - 1} layers need {len(dims) - 1} activations, got {len(activations)}")
        return cls(
            tuple(LayerSpec(i, o, a) for i, o, a in zip(dims, dims[1:], activations)),
            loss,
        )


@dataclass
class ModelParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def copy(self) -> ModelParams:
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def tensors(self) -> list[Tensor]:
        """Weights and biases interleaved per layer; the flattening order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()]).astype(np.float32, copy=False)

    def assign_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float32)
        pos = 0
        for t in self.tensors():
            t[...] = flat[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, params need {pos}")

    def zeros_like(self) -> ModelParams:
        return ModelParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def check(self, spec: ModelSpec) -> None:
        if len(self.weights) != len(spec.layers) or len(self.biases) != len(spec.layers):
            raise DimensionError(f"params have {len(self.weights)} layers, spec has {len(spec.layers)}")
        for i, (layer, w, b) in enumerate(zip(spec.layers, self.weights, self.biases)):
            if w.shape != (layer.input_dim, layer.output_dim):
                raise DimensionError(f"layer {i} weight shape {w.shape} != {(layer.input_dim, layer.output_dim)}")
            if b.shape != (1, layer.output_dim):
                raise DimensionError(f"layer {i} bias shape {b.shape} != {(1, layer.output_dim)}")

    def equal(self, other: ModelParams) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Compute:
    """Kernel settings threaded through forward/backward."""

    threads: int = 1
    block: int = DEFAULT_BLOCK


SERIAL = Compute()


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    weights, biases = [], []
    for layer in spec.layers:
        bound = 1.0 / math.sqrt(layer.input_dim)
        w = rng.uniform(-bound, bound, size=(layer.input_dim, layer.output_dim))
        weights.append(w.astype(np.float32))
        biases.append(np.zeros((1, layer.output_dim), dtype=np.float32))
    return ModelParams(weights, biases)


def softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32, copy=False)


def log_softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=1, keepdims=True)
    return (shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))).astype(np.float32, copy=False)


def _activate(z: Tensor, act: Activation) -> Tensor:
    if act is Activation.RELU:
        return np.maximum(z, np.float32(0.0))
    if act is Activation.SOFTMAX:
        return softmax(z)
    return z


@dataclass
class _Trace:
    inputs: list[Tensor] = field(default_factory=list)
    preacts: list[Tensor] = field(default_factory=list)
    output: Tensor | None = None


def _forward(spec: ModelSpec, params: ModelParams, batch, compute: Compute) -> _Trace:
    x = as_tensor(batch)
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"batch has {x.shape[1]} columns, model expects {spec.input_dim}")
    trace = _Trace()
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        trace.inputs.append(x)
        z = matmul(x, w, threads=compute.threads, block=compute.block) + b
        trace.preacts.append(z)
        x = _activate(z, layer.activation)
    trace.output = x
    return trace


def model_forward(spec: ModelSpec, params: ModelParams, batch, compute: Compute = SERIAL) -> Tensor:
    return _forward(spec, params, batch, compute).output


def _class_targets(targets, rows: int, classes: int) -> np.ndarray:
    y = np.asarray(targets).reshape(-1)
    if y.shape[0] != rows:
        raise DimensionError(f"{y.shape[0]} class targets for {rows} rows")
    if y.dtype.kind == "f":
        if not np.all(np.isfinite(y)) or not np.all(y == np.round(y)):
            raise ValueError("cross-entropy targets must be integer class indices")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"class index out of range [0, {classes})")
    return y


def compute_loss(spec: ModelSpec, output: Tensor, targets) -> float:
    """Mean loss over rows for an already computed network output."""
    rows = output.shape[0]
    if rows == 0:
        raise ValueError("loss of an empty batch is undefined")
    if spec.loss is Loss.MSE:
        y = as_tensor(targets, rows=rows, cols=output.shape[1])
        return float(np.mean(np.square(output.astype(np.float64) - y)))
    y = _class_targets(targets, rows, output.shape[1])
    if spec.layers[-1].activation is Activation.SOFTMAX:
        p = output[np.arange(rows), y].astype(np.float64)
        return float(-np.mean(np.log(np.maximum(p, np.finfo(np.float32).tiny))))
    logp = log_softmax(output)
    return float(-np.mean(logp[np.arange(rows), y].astype(np.float64)))


def model_backward(spec: ModelSpec, params: ModelParams, batch, targets, compute: Compute = SERIAL):
    """Mean loss over the batch and its gradient with respect to every parameter.

    Cross-entropy reads the final output as probabilities when the last layer is
    softmax, and as logits (log-softmax applied internally) otherwise.
    """
    trace = _forward(spec, params, batch, compute)
    out = trace.output
    rows, cols = out.shape
    if rows == 0:
        raise ValueError("cannot compute gradients for an empty batch")
    loss = compute_loss(spec, out, targets)
    last = spec.layers[-1].activation

    if spec.loss is Loss.CROSS_ENTROPY:
        y = _class_targets(targets, rows, cols)
        p = out if last is Activation.SOFTMAX else softmax(out)
        dz = p.copy()
        dz[np.arange(rows), y] -= 1.0
        dz /= np.float32(rows)
    else:
        y = as_tensor(targets, rows=rows, cols=cols)
        g = (out - y) * np.float32(2.0 / (rows * cols))
        if last is Activation.SOFTMAX:
            dz = out * (g - np.sum(g * out, axis=1, keepdims=True))
        elif last is Activation.RELU:
            dz = g * (trace.preacts[-1] > 0)
        else:
            dz = g
    dz = dz.astype(np.float32, copy=False)

    grads = params.zeros_like()
    for i in range(len(spec.layers) - 1, -1, -1):
        x = trace.inputs[i]
        grads.weights[i] = matmul(np.ascontiguousarray(x.T), dz, threads=compute.threads, block=compute.block)
        grads.biases[i] = dz.sum(axis=0, keepdims=True, dtype=np.float32)
        if i == 0:
            break
        dx = matmul(dz, np.ascontiguousarray(params.weights[i].T), threads=compute.threads, block=compute.block)
        act = spec.layers[i - 1].activation
        dz = (dx * (trace.preacts[i - 1] > 0)).astype(np.float32) if act is Activation.RELU else dx
    return loss, grads


def sgd_step(params: ModelParams, grads: ModelParams, cfg: SgdConfig) -> ModelParams:
    """In-place ``w -= lr * g`` on every tensor; returns ``params``."""
    lr = np.float32(cfg.learning_rate)
    for p, g in zip(params.tensors(), grads.tensors()):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= lr * g
    return params
