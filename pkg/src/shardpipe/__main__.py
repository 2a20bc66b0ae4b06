"""``python -m shardpipe``: the CLI, or worker mode when ``--worker`` is given."""

import sys


def _worker(argv: list[str]) -> int:
    import argparse

    from shardpipe.cluster.worker import worker_main

    p = argparse.ArgumentParser(prog="shardpipe --worker")
    p.add_argument("--worker", action="store_true")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--driver", required=True, help="host:port of the driver")
    p.add_argument("--heartbeat", type=float, default=0.5)
    a = p.parse_args(argv)
    return worker_main(a.id, a.driver, a.heartbeat)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if "--worker" in argv:
        return _worker(argv)
    from shardpipe.cli import main as cli_main

    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
