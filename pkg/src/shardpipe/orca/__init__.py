from shardpipe.orca.estimator import METRICS, EpochStats, Estimator, FitConfig, ReplicaMismatch, TrainReport

__all__ = ["METRICS", "EpochStats", "Estimator", "FitConfig", "ReplicaMismatch", "TrainReport"]
