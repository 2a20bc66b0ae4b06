"""shardpipe: single-node accelerated MLPs scaled out over a multi-process cluster.

Subpackages are imported explicitly (``shardpipe.nn``, ``shardpipe.nano``,
``shardpipe.xshards``, ``shardpipe.cluster``, ``shardpipe.orca``,
``shardpipe.automl``); this module stays import-light so spawned workers start
fast.
"""

__version__ = "0.1.0"
