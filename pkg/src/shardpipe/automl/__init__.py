from shardpipe.automl.auto_estimator import AutoEstimator, auto_estimator_fit, holdout_split
from shardpipe.automl.space import (
    Categorical,
    IntRange,
    RealRange,
    SpaceError,
    grid_enumerate,
    parse_space,
    sample,
)
from shardpipe.automl.study import Direction, GridSampler, RandomSampler, Study, StudyError, Trial, run_study
from shardpipe.automl.template import IncompleteConfig, ModelTemplate, Resolved, resolve_template

__all__ = [
    "AutoEstimator",
    "Categorical",
    "Direction",
    "GridSampler",
    "IncompleteConfig",
    "IntRange",
    "ModelTemplate",
    "RandomSampler",
    "RealRange",
    "Resolved",
    "SpaceError",
    "Study",
    "StudyError",
    "Trial",
    "auto_estimator_fit",
    "grid_enumerate",
    "holdout_split",
    "parse_space",
    "resolve_template",
    "run_study",
    "sample",
]
