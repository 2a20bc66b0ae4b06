import csv
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import psutil
import pytest

from oracles import gaussian_blobs
from shardpipe.cli import UsageError, main, parse_arch
from shardpipe.nano.bench import BENCH_SCHEMA
from shardpipe.nn import ModelParams, ModelSpec, checkpoint


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


@pytest.fixture
def lin_csv(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 400)
    return write_csv(tmp_path / "lin.csv", ["x", "y"], zip(x.tolist(), (2 * x).tolist()))


@pytest.fixture
def blobs_csv(tmp_path):
    rng = np.random.default_rng(1)
    centres = rng.normal(0, 3, (3, 6))
    y = rng.integers(0, 3, 600)
    x = centres[y] + rng.normal(0, 1, (600, 6))
    header = [f"f{i}" for i in range(6)] + ["label"]
    return write_csv(tmp_path / "blobs.csv", header, [list(r) + [int(c)] for r, c in zip(x.tolist(), y)])


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_arch_parser():
    dims, acts = parse_arch("784-64-10:relu,softmax")
    assert dims == [784, 64, 10] and [a.name for a in acts] == ["RELU", "SOFTMAX"]
    assert parse_arch("4-$h-1:relu,id", allow_vars=True)[0] == [4, "$h", 1]
    for bad, token in (("4-x-1:relu,id", "'x'"), ("4-1:tanh", "'tanh'"), ("4-0-1:id,id", "'0'")):
        with pytest.raises(UsageError, match=token):
            parse_arch(bad)
    with pytest.raises(UsageError, match="activations"):
        parse_arch("4-2-1:relu")


def test_train_linear(tmp_path, lin_csv, capsys):
    ckpt = tmp_path / "m.spnn"
    code, out, _ = run(["train", "--data", lin_csv, "--label", "y", "--arch", "1-1:id", "--workers", "1",
                        "--epochs", "200", "--lr", "0.05", "--batch-size", "400", "--out", str(ckpt)], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["total_steps"] == 200 and report["features"] == ["x"]
    _, params = checkpoint.load(ckpt)
    assert abs(float(params.weights[0][0, 0]) - 2.0) <= 1e-3


def test_bad_arch_exit_1(lin_csv, capsys):
    code, out, err = run(["train", "--data", lin_csv, "--label", "y", "--arch", "1-q-1:id,id"], capsys)
    assert code == 1 and out == ""
    assert "'q'" in err


def test_usage_errors_exit_1(capsys):
    assert run(["train"], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1
    assert run(["train", "--data", "x", "--label", "y", "--arch", "1-1:id", "--workers", "0"], capsys)[0] == 1


def test_missing_data_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--data", str(tmp_path / "nope.csv"), "--label", "y", "--arch", "1-1:id"], capsys)
    assert code == 2 and "no such file" in err


def test_missing_label_column_exit_2(lin_csv, capsys):
    assert run(["train", "--data", lin_csv, "--label", "z", "--arch", "1-1:id"], capsys)[0] == 2


def test_workers_4_matches_workers_1(tmp_path, lin_csv, capsys):
    paths = {}
    for workers, batch in ((1, 400), (4, 100)):  # same global batch
        paths[workers] = tmp_path / f"w{workers}.spnn"
        code, _, _ = run(["train", "--data", lin_csv, "--label", "y", "--arch", "1-1:id", "--workers", str(workers),
                          "--epochs", "20", "--lr", "0.05", "--batch-size", str(batch), "--seed", "3",
                          "--out", str(paths[workers])], capsys)
        assert code == 0
    a = checkpoint.load(paths[1])[1].flatten().astype(np.float64)
    b = checkpoint.load(paths[4])[1].flatten().astype(np.float64)
    assert np.abs(a - b).max() / np.abs(a).max() <= 1e-4


def test_seeded_train_is_byte_reproducible(tmp_path, blobs_csv, capsys):
    outs = []
    for i in range(2):
        p = tmp_path / f"r{i}.spnn"
        code, _, _ = run(["train", "--data", blobs_csv, "--label", "label", "--arch", "6-8-3:relu,softmax",
                          "--epochs", "3", "--shuffle", "--seed", "17", "--out", str(p)], capsys)
        assert code == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


@pytest.fixture
def blob_model(tmp_path, blobs_csv, capsys):
    ckpt = tmp_path / "blob.spnn"
    code, _, _ = run(["train", "--data", blobs_csv, "--label", "label", "--arch", "6-16-3:relu,softmax",
                      "--epochs", "10", "--lr", "0.1", "--out", str(ckpt)], capsys)
    assert code == 0
    return ckpt


def test_quantize_deviation_within_two_percent(tmp_path, capsys):
    # The 784-64-10 blob classifier the fidelity bound is stated for.
    x, y, _ = gaussian_blobs(800, 784, 10, 5, spread=2.5)
    header = [f"p{i}" for i in range(784)] + ["label"]
    data = write_csv(tmp_path / "img.csv", header, [list(r) + [int(c)] for r, c in zip(x.tolist(), y)])
    ckpt, q = tmp_path / "img.spnn", tmp_path / "img.q8"
    code, _, _ = run(["train", "--data", data, "--label", "label", "--arch", "784-64-10:relu,softmax",
                      "--epochs", "5", "--lr", "0.1", "--batch-size", "100", "--out", str(ckpt)], capsys)
    assert code == 0
    code, out, _ = run(["quantize", "--checkpoint", str(ckpt), "--calib", data, "--label", "label",
                        "--out", str(q)], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["max_relative_deviation"] <= 0.02
    assert q.exists() and doc["calibration_rows"] == 800


def test_quantize_missing_calib_exit_2(tmp_path, blob_model, capsys):
    code, _, _ = run(["quantize", "--checkpoint", str(blob_model), "--calib", str(tmp_path / "none.csv")], capsys)
    assert code == 2


def test_quantize_identity_net_within_one_step(tmp_path, capsys):
    spec = ModelSpec.from_dims([3, 3], ["id"])
    ckpt = tmp_path / "eye.spnn"
    checkpoint.save(ckpt, spec, ModelParams([np.eye(3, dtype=np.float32)], [np.zeros((1, 3), np.float32)]))
    rng = np.random.default_rng(5)
    x = rng.uniform(-4, 4, (50, 3))
    calib = write_csv(tmp_path / "c.csv", ["a", "b", "c"], x.tolist())
    code, out, _ = run(["quantize", "--checkpoint", str(ckpt), "--calib", calib], capsys)
    assert code == 0
    doc = json.loads(out)
    max_ref = np.abs(x.astype(np.float32)).max()
    assert doc["max_relative_deviation"] * max_ref <= doc["layers"][0]["input_scale"]


def test_bench_fp32_only(capsys):
    code, out, _ = run(["bench", "--arch", "16-32-4:relu,id", "--batch", "32", "--repeats", "3",
                        "--max-threads", "2"], capsys)
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, BENCH_SCHEMA)
    assert doc["plans"][0]["threads"] == 1 and doc["plans"][0]["speedup"] == 1.0
    assert {p["precision"] for p in doc["plans"]} == {"fp32"}


def test_bench_int8_rows_with_quantized_model(tmp_path, blob_model, blobs_csv, capsys):
    q = tmp_path / "blob.q8"
    assert run(["quantize", "--checkpoint", str(blob_model), "--calib", blobs_csv, "--label", "label",
                "--out", str(q)], capsys)[0] == 0
    code, out, _ = run(["bench", "--checkpoint", str(blob_model), "--quantized", str(q), "--batch", "64",
                        "--repeats", "3", "--max-threads", "2"], capsys)
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, BENCH_SCHEMA)
    assert sorted((p["threads"], p["precision"]) for p in doc["plans"]) == [
        (1, "fp32"), (1, "int8"), (2, "fp32"), (2, "int8")]


def test_tune_single_config_behaves_as_train(tmp_path, lin_csv, capsys):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"lr": {"kind": "categorical", "choices": [0.05]}}))
    flags = ["--data", lin_csv, "--label", "y", "--arch", "1-1:id", "--epochs", "30", "--batch-size", "50",
             "--seed", "2"]
    code, out, _ = run(["tune", *flags, "--space", str(space), "--budget", "1", "--out", str(tmp_path / "t.spnn"),
                        "--study-out", str(tmp_path / "s.json")], capsys)
    assert code == 0
    assert json.loads(out)["best"] == 0
    code, _, _ = run(["train", *flags, "--lr", "0.05", "--out", str(tmp_path / "p.spnn")], capsys)
    assert code == 0
    assert (tmp_path / "t.spnn").read_bytes() == (tmp_path / "p.spnn").read_bytes()


def test_tune_study_reproducible(tmp_path, blobs_csv, capsys):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"h": {"kind": "int", "lo": 4, "hi": 5},
                                 "lr": {"kind": "real", "lo": 0.01, "hi": 0.3, "log": True}}))
    docs = []
    for i in range(2):
        out_path = tmp_path / f"s{i}.json"
        code, _, _ = run(["tune", "--data", blobs_csv, "--label", "label", "--arch", "6-$h-3:relu,softmax",
                          "--space", str(space), "--sampler", "random", "--budget", "3", "--epochs", "2",
                          "--seed", "8", "--study-out", str(out_path)], capsys)
        assert code == 0
        docs.append(out_path.read_bytes())
    assert docs[0] == docs[1]
    study = json.loads(docs[0])
    assert all(4 <= t["config"]["h"] <= 5 for t in study["trials"])


@pytest.mark.parametrize("content", ["{not json", "[1, 2]", '{"lr": {"kind": "nope"}}', '{"unused": {"kind": "int", "lo": 1, "hi": 2}}'])
def test_tune_invalid_space_exit_1(tmp_path, lin_csv, capsys, content):
    space = tmp_path / "space.json"
    space.write_text(content)
    code, _, _ = run(["tune", "--data", lin_csv, "--label", "y", "--arch", "1-1:id", "--space", str(space)], capsys)
    assert code == 1


def test_cluster_check(capsys):
    code, out, _ = run(["cluster", "--workers", "3"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["worker_ids"] == [0, 1, 2] and doc["allreduce"] == [6.0, 6.0, 6.0]
    assert doc["allreduce_consistent"] and doc["state"] == "down"


def test_help_documents_architecture(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    assert "d0-d1-...-dk:act1,...,actk" in capsys.readouterr().out


def sigint_during_fit(tmp_path, workers: int = 3) -> tuple[int, list[int]]:
    """Start a long cluster fit in a child process, interrupt it, return (exit code, worker pids seen)."""
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 3000)
    data = write_csv(tmp_path / "big.csv", ["x", "y"], zip(x.tolist(), (2 * x).tolist()))
    env = dict(os.environ)
    env["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src")
    proc = subprocess.Popen(
        [sys.executable, "-m", "shardpipe", "train", "--data", data, "--label", "y", "--arch", "1-1:id",
         "--workers", str(workers), "--epochs", "100000", "--batch-size", "10"],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
    )
    parent = psutil.Process(proc.pid)
    pids: list[int] = []
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline:
        pids = [c.pid for c in parent.children()]
        if len(pids) >= workers:
            break
        time.sleep(0.1)
    time.sleep(1.5)  # let training get going
    proc.send_signal(signal.SIGINT)
    code = proc.wait(timeout=30)
    return code, pids


def pid_alive(pid):
    try:
        return psutil.Process(pid).status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False


def test_sigint_during_fit_leaves_no_orphans(tmp_path):
    code, pids = sigint_during_fit(tmp_path)
    assert len(pids) == 3
    assert code == 130
    time.sleep(0.2)
    assert not any(pid_alive(p) for p in pids)
