"""Command-line front end.

Machine-readable results go to stdout as JSON; logs go to stderr.
Exit codes: 0 ok, 1 usage or parse error, 2 data error, 3 cluster error,
130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from contextlib import contextmanager
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CLUSTER = 0, 1, 2, 3
EXIT_INTERRUPTED = 130

log = logging.getLogger("shardpipe.cli")

ARCH_HELP = """\
architecture strings: "d0-d1-...-dk:act1,...,actk", e.g. "784-64-10:relu,softmax".
dk widths, k activations (id, relu, softmax). In `tune`, a width may be "$name"
to take its value from the space file."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- architecture mini-language ----------------------------------------------


def parse_arch(text: str, allow_vars: bool = False):
    """Returns ``(dims, activations)``; dims are ints, or ``"$name"`` strings when allowed."""
    from shardpipe.nn.model import Activation

    dims_part, sep, acts_part = text.partition(":")
    if not sep:
        raise UsageError(f"architecture {text!r} needs ':' between widths and activations")
    dims = []
    for tok in dims_part.split("-"):
        tok = tok.strip()
        if allow_vars and tok.startswith("$") and tok[1:].isidentifier():
            dims.append(tok)
            continue
        if not tok.isdigit() or int(tok) < 1:
            raise UsageError(f"bad layer width {tok!r} in architecture {text!r}")
        dims.append(int(tok))
    acts = []
    for tok in acts_part.split(","):
        try:
            acts.append(Activation.parse(tok.strip()))
        except (ValueError, KeyError):
            raise UsageError(f"bad activation {tok.strip()!r} in architecture {text!r}") from None
    if len(dims) < 2:
        raise UsageError(f"architecture {text!r} needs at least two widths")
    if len(acts) != len(dims) - 1:
        raise UsageError(f"architecture {text!r} has {len(dims) - 1} layers but {len(acts)} activations")
    return dims, acts


def _spec_from_args(args, input_dim: int | None = None):
    from shardpipe.nn.model import Activation, Loss, ModelSpec, SpecError

    dims, acts = parse_arch(args.arch)
    loss = Loss.parse(args.loss) if args.loss else (
        Loss.CROSS_ENTROPY if acts[-1] is Activation.SOFTMAX else Loss.MSE
    )
    try:
        spec = ModelSpec.from_dims(dims, acts, loss)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    if input_dim is not None and spec.input_dim != input_dim:
        raise UsageError(f"architecture expects {spec.input_dim} inputs but the data has {input_dim} feature columns")
    return spec


# -- data helpers --------------------------------------------------------------


def _split_cols(text: str | None) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()] if text else []


def _columns(shards, labels: list[str], features: list[str]):
    from shardpipe.xshards import Kind, ShardError

    names = [n for n, _ in shards.schema]
    missing = [c for c in labels + features if c not in names]
    if missing:
        raise ShardError(f"columns not in data: {missing}; available: {names}")
    if not features:
        features = [n for n, k in shards.schema if n not in labels and k is not Kind.STRING]
    if not features:
        raise ShardError("no numeric feature columns")
    return features


def _read(path: str, parts: int):
    from shardpipe.xshards import read_csv

    return read_csv(path, parts)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    sys.stdout.flush()


@contextmanager
def _maybe_cluster(workers: int):
    """Cluster for ``workers > 1`` (None otherwise); always shut down on exit."""
    if workers <= 1:
        yield None
        return
    from shardpipe.cluster import ClusterConfig, launch_cluster, shutdown

    ctx = launch_cluster(ClusterConfig(n_workers=workers))
    try:
        yield ctx
    finally:
        shutdown(ctx)


# -- subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    from shardpipe.nn.model import SgdConfig
    from shardpipe.orca import Estimator, FitConfig

    labels = _split_cols(args.label)
    if not labels:
        raise UsageError("--label is required")
    cfg = FitConfig(args.epochs, args.batch_size, args.seed, args.shuffle, threads=args.threads)
    sgd = SgdConfig(args.lr, args.seed)
    data = _read(args.data, args.workers)
    features = _columns(data, labels, _split_cols(args.features))
    spec = _spec_from_args(args, len(features))
    data = data.repartition(args.workers)
    with _maybe_cluster(args.workers) as ctx:
        est = Estimator.from_model(spec, sgd, ctx)
        report = est.fit(data, features, labels, cfg)
    if args.out:
        est.save(args.out)
    out = report.to_json()
    out["checkpoint"] = args.out
    out["features"], out["labels"] = features, labels
    _emit(out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    from shardpipe.nano import quantize_model
    from shardpipe.nano.plan import max_relative_deviation
    from shardpipe.nano.quant import dumps_quantized
    from shardpipe.nn import checkpoint, model_forward

    spec, params = checkpoint.load(args.checkpoint)
    calib = _read(args.calib, 1)
    features = _columns(calib, _split_cols(args.label), _split_cols(args.features))
    x = calib.collect().matrix(features)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"checkpoint expects {spec.input_dim} inputs, calibration data has {x.shape[1]}")
    qmodel = quantize_model(params, spec, x)
    dev = max_relative_deviation(qmodel(x), model_forward(spec, params, x))
    if args.out:
        tmp = Path(str(args.out) + ".tmp")
        tmp.write_bytes(dumps_quantized(qmodel))
        os.replace(tmp, args.out)
    _emit({
        "output": args.out,
        "calibration_rows": int(x.shape[0]),
        "max_relative_deviation": dev,
        "layers": [
            {
                "input_scale": l.input_params.scale,
                "input_zero_point": l.input_params.zero_point,
                "weight_scale": l.weight.params.scale,
                "weight_zero_point": l.weight.params.zero_point,
            }
            for l in qmodel.layers
        ],
    })
    return EXIT_OK


def cmd_bench(args) -> int:
    from shardpipe.nano import ExecPlan, Precision, benchmark, select_plan
    from shardpipe.nano.quant import loads_quantized
    from shardpipe.nn import checkpoint, detected_cores, init_params

    if args.checkpoint:
        spec, params = checkpoint.load(args.checkpoint)
    elif args.arch:
        spec = _spec_from_args(args)
        params = init_params(spec, args.seed)
    else:
        raise UsageError("bench needs --checkpoint or --arch")
    quantized = loads_quantized(Path(args.quantized).read_bytes()) if args.quantized else None
    if quantized is not None and quantized.spec != spec:
        raise UsageError("the quantized model does not match the fp32 model architecture")
    cores = args.max_threads or detected_cores()
    block = select_plan(cores, spec, args.batch).block_size
    plans = [ExecPlan(t, Precision.FP32, block) for t in range(1, cores + 1)]
    if quantized is not None:
        plans += [ExecPlan(t, Precision.INT8, block) for t in range(1, cores + 1)]
    x = np.random.default_rng(args.seed).standard_normal((args.batch, spec.input_dim)).astype(np.float32)
    report = benchmark(spec, params, x, plans, repeats=args.repeats, quantized=quantized)
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def _tune_template(args, space_defs: dict):
    from shardpipe.automl import ModelTemplate, SpaceError, parse_space
    from shardpipe.nn.model import Activation, Loss

    dims, acts = parse_arch(args.arch, allow_vars=True)
    spaces = {name: parse_space(d, name) for name, d in space_defs.items()}
    used = set()
    leaves = []
    for d in dims:
        if isinstance(d, str):
            name = d[1:]
            if name not in spaces:
                raise SpaceError(f"architecture references ${name} but the space file does not define it")
            used.add(name)
            leaves.append(spaces[name])
        else:
            leaves.append(d)
    lr = args.lr
    if "lr" in spaces:
        lr = spaces["lr"]
        used.add("lr")
    unused = sorted(set(spaces) - used)
    if unused:
        raise SpaceError(f"space file defines {unused}, which nothing refers to (use $name in --arch, or 'lr')")
    loss = Loss.parse(args.loss) if args.loss else (Loss.CROSS_ENTROPY if acts[-1] is Activation.SOFTMAX else Loss.MSE)
    return ModelTemplate.from_dims(leaves, acts, loss, lr, args.seed)


def cmd_tune(args) -> int:
    from shardpipe.automl import GridSampler, RandomSampler, SpaceError, Study, auto_estimator_fit
    from shardpipe.orca import FitConfig

    try:
        space_defs = json.loads(Path(args.space).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"space file {args.space} is not valid JSON: {exc}") from None
    if not isinstance(space_defs, dict):
        raise UsageError("space file must be a JSON object mapping names to space definitions")
    try:
        template = _tune_template(args, space_defs)
    except SpaceError as exc:
        raise UsageError(str(exc)) from None
    labels = _split_cols(args.label)
    if not labels:
        raise UsageError("--label is required")
    data = _read(args.data, args.workers)
    features = _columns(data, labels, _split_cols(args.features))
    if template.layers[0][0] != len(features):
        raise UsageError(f"architecture expects {template.layers[0][0]} inputs but the data has {len(features)}")
    sampler = GridSampler() if args.sampler == "grid" else RandomSampler(args.seed)
    study = Study("minimize", args.budget, sampler)
    cfg = FitConfig(args.epochs, args.batch_size, args.seed, args.shuffle, threads=args.threads)
    with _maybe_cluster(args.workers) as ctx:
        est, study = auto_estimator_fit(template, data, features, labels, cfg, study, ctx)
    if args.out:
        est.save(args.out)
    if args.study_out:
        Path(args.study_out).write_text(study.dumps() + "\n")
    out = study.to_json()
    out["checkpoint"] = args.out
    _emit(out)
    return EXIT_OK


def cmd_cluster(args) -> int:
    """Launch, exercise every collective once, shut down."""
    import time

    from shardpipe.cluster import ClusterConfig, launch_cluster, shutdown

    t0 = time.perf_counter()
    ctx = launch_cluster(ClusterConfig(n_workers=args.workers))
    try:
        launched = time.perf_counter() - t0
        ids = ctx.run_task("echo")
        ctx.barrier()
        ctx.broadcast(b"ping")
        vecs = [(np.full(3, i + 1, np.float32), "sum") for i in range(args.workers)]
        reduced = [np.frombuffer(b, np.float32).tolist() for b, _ in ctx.run_task("allreduce", per_worker_args=vecs)]
        pids = ctx.pids
    finally:
        shutdown(ctx)
    _emit({
        "workers": args.workers,
        "launch_seconds": launched,
        "worker_ids": ids,
        "pids": pids,
        "allreduce": reduced[0],
        "allreduce_consistent": all(r == reduced[0] for r in reduced),
        "state": ctx.state.value,
    })
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v

    return conv


def _train_flags(p, arch_required=True):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--label", required=True, help="label column(s), comma separated")
    p.add_argument("--features", help="feature columns (default: every other numeric column)")
    p.add_argument("--arch", required=arch_required, help="model architecture, see below")
    p.add_argument("--loss", choices=["mse", "ce"], help="default: ce when the last activation is softmax")
    p.add_argument("--workers", type=_positive(int), default=1)
    p.add_argument("--epochs", type=_positive(int), default=10)
    p.add_argument("--batch-size", type=_positive(int), default=32, help="rows per worker per step")
    p.add_argument("--lr", type=_positive(float), default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--threads", type=_positive(int), default=1, help="matmul threads per worker")
    p.add_argument("--out", help="checkpoint output path")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="shardpipe", description=__doc__, epilog=ARCH_HELP, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model, optionally on a local cluster", epilog=ARCH_HELP, formatter_class=fmt)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="int8 post-training quantization of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calib", required=True, help="calibration CSV")
    p.add_argument("--features", help="feature columns (default: all numeric non-label columns)")
    p.add_argument("--label", help="columns to exclude from the features")
    p.add_argument("--out", help="quantized model output path")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bench", help="inference latency over a grid of execution plans", epilog=ARCH_HELP, formatter_class=fmt)
    p.add_argument("--checkpoint")
    p.add_argument("--arch", help="benchmark a freshly initialized model instead of a checkpoint")
    p.add_argument("--loss", choices=["mse", "ce"])
    p.add_argument("--quantized", help="quantized model file; adds int8 plans")
    p.add_argument("--batch", type=_positive(int), default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--max-threads", type=_positive(int), help="default: available cores")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tune", help="hyperparameter search, then refit the best config", epilog=ARCH_HELP, formatter_class=fmt)
    _train_flags(p)
    p.add_argument("--space", required=True, help="JSON file mapping names to space definitions")
    p.add_argument("--budget", type=_positive(int), default=10)
    p.add_argument("--sampler", choices=["grid", "random"], default="grid")
    p.add_argument("--study-out", help="write the study JSON here")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("cluster", help="launch a cluster, run each collective once, shut down")
    p.add_argument("--workers", type=_positive(int), default=2)
    p.set_defaults(func=cmd_cluster)
    return parser


def _exit_code(exc: BaseException) -> int:
    from shardpipe.cluster import ClusterError, ProtocolError
    from shardpipe.nn.checkpoint import CheckpointError
    from shardpipe.nn.model import SpecError
    from shardpipe.nn.tensor import DimensionError
    from shardpipe.xshards import ShardError

    if isinstance(exc, (ClusterError, ProtocolError)):
        return EXIT_CLUSTER
    if isinstance(exc, (UsageError, SpecError)):
        return EXIT_USAGE
    if isinstance(exc, (ShardError, CheckpointError, DimensionError, OSError, ValueError, KeyError)):
        return EXIT_DATA
    raise exc


def _on_sigterm(signum, frame):
    raise KeyboardInterrupt


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"shardpipe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = os.environ.get("SHARDPIPE_LOG") or ("DEBUG" if args.verbose > 1 else "INFO" if args.verbose else "WARNING")
    logging.basicConfig(level=level.upper(), stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    # SIGINT already raises KeyboardInterrupt; route SIGTERM the same way so the
    # cluster context managers shut workers down on either signal.
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, _on_sigterm)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("shardpipe: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as exc:
        code = _exit_code(exc)
        print(f"shardpipe: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
