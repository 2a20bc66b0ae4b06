import pytest

from shardpipe.cluster import ClusterConfig, launch_cluster, shutdown


@pytest.fixture(scope="session")
def cluster_factory():
    """Session-cached clusters keyed by worker count; all shut down at exit."""
    live = {}

    def get(n):
        ctx = live.get(n)
        if ctx is None or not ctx.ring_ok or not all(ctx.liveness().values()):
            if ctx is not None:
                shutdown(ctx)
            ctx = live[n] = launch_cluster(ClusterConfig(n_workers=n))
        return ctx

    yield get
    for ctx in live.values():
        shutdown(ctx)
