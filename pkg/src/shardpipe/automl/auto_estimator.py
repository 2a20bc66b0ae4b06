"""AutoEstimator: search a template, then refit the best configuration on all data."""

from __future__ import annotations

import logging

from shardpipe.automl.study import Study, run_study
from shardpipe.automl.template import ModelTemplate, Resolved
from shardpipe.cluster.driver import ClusterContext
from shardpipe.orca.estimator import Estimator, FitConfig
from shardpipe.xshards import ShardError, Shards, shards_from_rows

log = logging.getLogger("shardpipe.automl")

VALIDATION_FRACTION = 0.2


def holdout_split(data: Shards, n_parts: int) -> tuple[Shards, Shards]:
    """First 80% of rows (global order) for training, last 20% for validation."""
    rows = data.collect()
    cut = rows.num_rows - int(round(rows.num_rows * VALIDATION_FRACTION))
    if cut < 1 or cut >= rows.num_rows:
        raise ShardError(f"{rows.num_rows} rows are too few for a train/validation split")
    return (
        shards_from_rows(rows.slice(0, cut), n_parts, schema=data.schema),
        shards_from_rows(rows.slice(cut, rows.num_rows), n_parts, schema=data.schema),
    )


def validation_loss(r: Resolved, train: Shards, valid: Shards, feature_cols, label_cols, fitcfg: FitConfig,
                    cluster: ClusterContext | None = None) -> float:
    est = Estimator.from_model(r.spec, r.sgd, cluster)
    est.fit(train, feature_cols, label_cols, fitcfg)
    return est.evaluate(valid, feature_cols, label_cols, "loss")


class AutoEstimator:
    """Estimator-like front end with a search space and a search algorithm attached."""

    def __init__(self, template: ModelTemplate, study: Study, cluster: ClusterContext | None = None):
        self.template = template
        self.study = study
        self.cluster = cluster
        self.best_estimator: Estimator | None = None

    def fit(self, data: Shards, feature_cols, label_cols, fitcfg: FitConfig = FitConfig()) -> Estimator:
        n = 1 if self.cluster is None else self.cluster.n_workers
        train, valid = holdout_split(data, n)

        def objective(r: Resolved) -> float:
            return validation_loss(r, train, valid, feature_cols, label_cols, fitcfg, self.cluster)

        run_study(self.template, objective, self.study)
        best = self.study.best_trial
        log.info("best trial %d %s -> %.6g; refitting on all data", best.ordinal, best.config, best.result)
        # Refit is a deliberate extra instantiation outside the study.
        r = self.template.resolve(best.config)
        est = Estimator.from_model(r.spec, r.sgd, self.cluster)
        est.fit(data.repartition(n), feature_cols, label_cols, fitcfg)
        self.best_estimator = est
        return est


def auto_estimator_fit(template: ModelTemplate, data: Shards, feature_cols, label_cols, fitcfg: FitConfig,
                       study: Study, cluster: ClusterContext | None = None) -> tuple[Estimator, Study]:
    est = AutoEstimator(template, study, cluster).fit(data, feature_cols, label_cols, fitcfg)
    return est, study
