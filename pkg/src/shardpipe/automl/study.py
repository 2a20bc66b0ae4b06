"""Sequential hyperparameter studies over a model template."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from shardpipe.automl.space import grid_enumerate, sample
from shardpipe.automl.template import ModelTemplate, Resolved
from shardpipe.cluster.driver import ClusterError

log = logging.getLogger("shardpipe.automl")


class StudyError(RuntimeError):
    pass


class Direction(str, enum.Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


@dataclass(frozen=True)
class GridSampler:
    def configs(self, spaces: dict, budget: int) -> list[dict]:
        return grid_enumerate(spaces)[:budget]


@dataclass(frozen=True)
class RandomSampler:
    seed: int = 0

    def configs(self, spaces: dict, budget: int) -> list[dict]:
        rng = np.random.default_rng(int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        return [{name: sample(space, rng) for name, space in spaces.items()} for _ in range(budget)]


@dataclass
class Trial:
    ordinal: int
    config: dict
    result: float | None = None  # None means failed
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.result is None


@dataclass
class Study:
    direction: Direction = Direction.MINIMIZE
    budget: int = 10
    sampler: GridSampler | RandomSampler = field(default_factory=GridSampler)
    trials: list[Trial] = field(default_factory=list)
    best: int | None = None

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    def score(self, trial: Trial) -> float:
        """Comparable value: failed trials rank last in either direction."""
        if trial.failed:
            return math.inf
        return trial.result if self.direction is Direction.MINIMIZE else -trial.result

    def update_best(self) -> None:
        done = [t for t in self.trials if not t.failed]
        self.best = min(done, key=lambda t: (self.score(t), t.ordinal)).ordinal if done else None

    @property
    def best_trial(self) -> Trial | None:
        return None if self.best is None else self.trials[self.best]

    def to_json(self) -> dict:
        return {
            "direction": self.direction.value,
            "trials": [
                {"ordinal": t.ordinal, "config": t.config, "result": "failed" if t.failed else t.result}
                for t in self.trials
            ],
            "best": self.best,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


Objective = Callable[[Resolved], float]


def run_study(template: ModelTemplate, objective: Objective, study: Study) -> Study:
    """Run trials in order; each trial resolves the template exactly once."""
    configs = study.sampler.configs(template.spaces, study.budget)
    for config in configs:
        trial = Trial(len(study.trials), config)
        study.trials.append(trial)
        try:
            resolved = template.resolve(config)
            value = float(objective(resolved))
            if not math.isfinite(value):
                raise FloatingPointError(f"objective is {value}")
            trial.result = value
        except ClusterError:
            raise  # infrastructure failure, not a property of the config
        except Exception as exc:  # a bad trial must not end the study
            trial.error = f"{type(exc).__name__}: {exc}"
            log.warning("trial %d failed: %s", trial.ordinal, trial.error)
        else:
            log.info("trial %d %s -> %.6g", trial.ordinal, config, value)
    study.update_best()
    if study.best is None:
        raise StudyError(f"all {len(configs)} trials failed")
    return study
