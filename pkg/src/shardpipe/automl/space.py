"""Search-space declarations, sampling and grid enumeration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

MAX_INT_CARDINALITY = 64
MAX_GRID = 10**6


class SpaceError(ValueError):
    pass


@dataclass(frozen=True, init=False)
class Categorical:
    choices: tuple
    name: str | None = None

    def __init__(self, *choices, name: str | None = None):
        if len(choices) == 1 and isinstance(choices[0], (list, tuple)):
            choices = tuple(choices[0])
        if not choices:
            raise SpaceError("Categorical needs at least one choice")
        object.__setattr__(self, "choices", tuple(choices))
        object.__setattr__(self, "name", name)

    def values(self) -> list:
        return list(self.choices)


@dataclass(frozen=True)
class IntRange:
    lo: int
    hi: int
    name: str | None = None

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise SpaceError("IntRange bounds must be integers")
        if self.lo > self.hi:
            raise SpaceError(f"IntRange needs lo <= hi, got {self.lo} > {self.hi}")

    def values(self) -> list[int]:
        return list(range(int(self.lo), int(self.hi) + 1))


@dataclass(frozen=True)
class RealRange:
    lo: float
    hi: float
    log: bool = False
    name: str | None = None

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise SpaceError(f"RealRange needs finite lo < hi, got [{self.lo}, {self.hi}]")
        if self.log and self.lo <= 0:
            raise SpaceError("log-scale RealRange needs lo > 0")


Space = Union[Categorical, IntRange, RealRange]
SPACE_TYPES = (Categorical, IntRange, RealRange)


def is_space(x) -> bool:
    return isinstance(x, SPACE_TYPES)


def named(space: Space, name: str) -> Space:
    """Copy of ``space`` carrying ``name``."""
    if isinstance(space, Categorical):
        return Categorical(*space.choices, name=name)
    if isinstance(space, IntRange):
        return IntRange(space.lo, space.hi, name)
    return RealRange(space.lo, space.hi, space.log, name)


def _plain(value):
    """numpy scalars to Python scalars so configs serialize cleanly."""
    return value.item() if isinstance(value, np.generic) else value


def sample(space: Space, rng: np.random.Generator):
    if isinstance(space, Categorical):
        return _plain(space.choices[int(rng.integers(len(space.choices)))])
    if isinstance(space, IntRange):
        return int(rng.integers(int(space.lo), int(space.hi) + 1))
    if space.log:
        v = math.exp(rng.uniform(math.log(space.lo), math.log(space.hi)))
    else:
        v = float(rng.uniform(space.lo, space.hi))
    # exp/log round-trips can land an ulp outside the interval
    return min(max(v, float(space.lo)), float(space.hi))


def contains(space: Space, value) -> bool:
    if isinstance(space, Categorical):
        return value in space.choices
    if isinstance(space, IntRange):
        return int(value) == value and space.lo <= value <= space.hi
    return space.lo <= value <= space.hi


def grid_enumerate(spaces) -> list[dict]:
    """Cartesian product of the spaces, lexicographic in declaration order.

    ``spaces`` is a mapping or a sequence of ``(name, space)`` pairs.
    """
    items = list(spaces.items()) if isinstance(spaces, dict) else list(spaces)
    axes = []
    for name, space in items:
        if isinstance(space, RealRange):
            raise SpaceError(f"space {name!r} is a RealRange and cannot be enumerated")
        if isinstance(space, IntRange) and space.hi - space.lo + 1 > MAX_INT_CARDINALITY:
            raise SpaceError(f"IntRange {name!r} has more than {MAX_INT_CARDINALITY} values")
        axes.append(space.values())
    size = math.prod(len(a) for a in axes)
    if size > MAX_GRID:
        raise SpaceError(f"grid of {size} configurations exceeds {MAX_GRID}")
    names = [n for n, _ in items]
    return [dict(zip(names, map(_plain, combo))) for combo in itertools.product(*axes)]


def parse_space(definition: dict, name: str | None = None) -> Space:
    """Build a space from its JSON form: ``{"kind": "categorical"|"int"|"real", ...}``."""
    if not isinstance(definition, dict):
        raise SpaceError(f"space {name!r}: expected an object, got {type(definition).__name__}")
    kind = definition.get("kind")
    try:
        if kind == "categorical":
            choices = definition["choices"]
            if not isinstance(choices, list):
                raise SpaceError(f"space {name!r}: choices must be a list")
            return Categorical(*choices, name=name)
        if kind == "int":
            return IntRange(definition["lo"], definition["hi"], name)
        if kind == "real":
            log = definition.get("log", False)
            if not isinstance(log, bool):
                raise SpaceError(f"space {name!r}: log must be true or false")
            return RealRange(float(definition["lo"]), float(definition["hi"]), log, name)
    except KeyError as exc:
        raise SpaceError(f"space {name!r}: missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise SpaceError(f"space {name!r}: {exc}") from None
    raise SpaceError(f"space {name!r}: unknown kind {kind!r}")


def space_to_json(space: Space) -> dict:
    if isinstance(space, Categorical):
        return {"kind": "categorical", "choices": list(space.choices)}
    if isinstance(space, IntRange):
        return {"kind": "int", "lo": space.lo, "hi": space.hi}
    return {"kind": "real", "lo": space.lo, "hi": space.hi, "log": space.log}
