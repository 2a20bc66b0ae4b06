"""Model templates whose leaves may be search spaces.

Nothing concrete is built when a template is declared; :meth:`ModelTemplate.resolve`
constructs the ``ModelSpec``/``SgdConfig`` for one trial and bumps
``construction_counter``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from shardpipe.automl.space import Space, SpaceError, contains, is_space, named
from shardpipe.nn.model import Activation, LayerSpec, Loss, ModelSpec, SgdConfig


class IncompleteConfig(KeyError):
    pass


@dataclass
class Resolved:
    spec: ModelSpec
    sgd: SgdConfig
    extras: dict
    config: dict


@dataclass
class ModelTemplate:
    """``layers`` holds ``(input_dim, output_dim, activation)`` triples.

    Any leaf (dimension, activation, loss, learning rate, seed, extra) may be a
    named search space. Leaves that share a space name always take the same value,
    which is how one hidden width feeds both the producing and consuming layer.
    Unnamed spaces are named after their position, e.g. ``layers.0.output_dim``.
    """

    layers: list
    loss: object = Loss.MSE
    learning_rate: object = 0.01
    seed: object = 0
    extras: dict = field(default_factory=dict)
    construction_counter: int = 0

    def __post_init__(self):
        self.layers = [tuple(l) for l in self.layers]
        for i, l in enumerate(self.layers):
            if len(l) != 3:
                raise SpaceError(f"layer {i} must be (input_dim, output_dim, activation)")
        self._spaces = self._collect_spaces()

    @classmethod
    def from_dims(cls, dims, activations, loss=Loss.MSE, learning_rate=0.01, seed=0, extras=None) -> ModelTemplate:
        """Chain of dense layers; ``dims[i]`` is both layer ``i-1``'s output and layer ``i``'s input."""
        dims = list(dims)
        if len(activations) != len(dims) - 1:
            raise SpaceError(f"{len(dims) - 1} layers need {len(dims) - 1} activations")
        dims = [named(d, f"dims.{i}") if is_space(d) and d.name is None else d for i, d in enumerate(dims)]
        layers = [(dims[i], dims[i + 1], activations[i]) for i in range(len(dims) - 1)]
        return cls(layers, loss, learning_rate, seed, dict(extras or {}))

    def _leaves(self):
        for i, (din, dout, act) in enumerate(self.layers):
            yield f"layers.{i}.input_dim", din
            yield f"layers.{i}.output_dim", dout
            yield f"layers.{i}.activation", act
        yield "loss", self.loss
        yield "learning_rate", self.learning_rate
        yield "seed", self.seed
        for k, v in self.extras.items():
            yield f"extras.{k}", v

    def _collect_spaces(self) -> dict[str, Space]:
        spaces: dict[str, Space] = {}
        for path, leaf in self._leaves():
            if not is_space(leaf):
                continue
            name = leaf.name or path
            key = named(leaf, name)
            if name in spaces and spaces[name] != key:
                raise SpaceError(f"space name {name!r} is declared with two different ranges")
            spaces.setdefault(name, key)
        return spaces

    @property
    def spaces(self) -> dict[str, Space]:
        """Search spaces by name, in declaration order."""
        return dict(self._spaces)

    def _value(self, leaf, path: str, config: dict):
        if not is_space(leaf):
            return leaf
        return config[leaf.name or path]

    def resolve(self, config: dict) -> Resolved:
        missing = [n for n in self._spaces if n not in config]
        if missing:
            raise IncompleteConfig(f"config is missing {missing}")
        for name, space in self._spaces.items():
            if not contains(space, config[name]):
                raise SpaceError(f"value {config[name]!r} for {name!r} is outside its space")
        self.construction_counter += 1
        vals = {path: self._value(leaf, path, config) for path, leaf in self._leaves()}
        layers = tuple(
            LayerSpec(
                int(vals[f"layers.{i}.input_dim"]),
                int(vals[f"layers.{i}.output_dim"]),
                Activation.parse(vals[f"layers.{i}.activation"]),
            )
            for i in range(len(self.layers))
        )
        spec = ModelSpec(layers, Loss.parse(vals["loss"]))
        sgd = SgdConfig(float(vals["learning_rate"]), int(vals["seed"]))
        extras = {k: vals[f"extras.{k}"] for k in self.extras}
        return Resolved(spec, sgd, extras, {n: config[n] for n in self._spaces})


def resolve_template(t: ModelTemplate, config: dict) -> tuple[ModelSpec, SgdConfig]:
    r = t.resolve(config)
    return r.spec, r.sgd
