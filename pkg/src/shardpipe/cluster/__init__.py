from shardpipe.cluster.driver import (
    ClusterConfig,
    ClusterContext,
    ClusterError,
    LaunchError,
    State,
    TaskError,
    WorkerDied,
    barrier,
    broadcast,
    launch_cluster,
    run_task,
    scatter_shards,
    shutdown,
)
from shardpipe.cluster.protocol import Frame, MsgType, ProtocolError, decode_frame, encode_frame
from shardpipe.cluster.ring import ReduceOp, ring_allreduce

__all__ = [
    "ClusterConfig",
    "ClusterContext",
    "ClusterError",
    "Frame",
    "LaunchError",
    "MsgType",
    "ProtocolError",
    "ReduceOp",
    "State",
    "TaskError",
    "WorkerDied",
    "barrier",
    "broadcast",
    "decode_frame",
    "encode_frame",
    "launch_cluster",
    "ring_allreduce",
    "run_task",
    "scatter_shards",
    "shutdown",
]
