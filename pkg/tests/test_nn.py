import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_grads, grads_match, naive_matmul_f32, scalar_forward
from shardpipe.nn import (
    Activation,
    Compute,
    DimensionError,
    LayerSpec,
    Loss,
    ModelParams,
    ModelSpec,
    SgdConfig,
    SpecError,
    init_params,
    matmul,
    model_backward,
    model_forward,
    sgd_step,
)
from shardpipe.nn import checkpoint


def test_matmul_identity():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    np.testing.assert_array_equal(matmul(a, np.eye(2, dtype=np.float32)), a)


def test_matmul_row_times_column():
    out = matmul(np.array([[1, 2]], dtype=np.float32), np.array([[3], [4]], dtype=np.float32))
    assert out.tolist() == [[11.0]]


@pytest.mark.parametrize("threads", [1, 2, 3, 5])
@pytest.mark.parametrize("block", [1, 7, 32, 64])
def test_matmul_matches_naive_loop_bit_exactly(threads, block):
    rng = np.random.default_rng(17)
    a = rng.standard_normal((17, 33)).astype(np.float32)
    b = rng.standard_normal((33, 9)).astype(np.float32)
    expected = naive_matmul_f32(a, b)
    assert np.array_equal(matmul(a, b, threads=threads, block=block), expected)


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(0, 12),
    k=st.integers(0, 12),
    n=st.integers(0, 12),
    seed=st.integers(0, 2**32 - 1),
    threads=st.integers(1, 4),
)
def test_matmul_property_naive_equivalence(m, k, n, seed, threads):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-10, 10, (m, k)).astype(np.float32)
    b = rng.uniform(-10, 10, (k, n)).astype(np.float32)
    out = matmul(a, b, threads=threads, block=4)
    assert out.shape == (m, n)
    assert np.array_equal(out, naive_matmul_f32(a, b) if m and n else np.zeros((m, n), np.float32))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"2x3 @ 2x3"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_identity_network_forward():
    spec = ModelSpec((LayerSpec(3, 3, "identity"),))
    params = ModelParams([np.eye(3, dtype=np.float32)], [np.zeros((1, 3), np.float32)])
    x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    np.testing.assert_array_equal(model_forward(spec, params, x), x)


def test_softmax_of_equal_logits():
    spec = ModelSpec((LayerSpec(2, 2, "softmax"),), Loss.CROSS_ENTROPY)
    params = ModelParams([np.zeros((2, 2), np.float32)], [np.zeros((1, 2), np.float32)])
    out = model_forward(spec, params, np.ones((1, 2), np.float32))
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-7)


def test_two_layer_relu_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    spec = ModelSpec.from_dims([5, 7, 3], ["relu", "identity"])
    params = init_params(spec, 11)
    x = rng.standard_normal((6, 5)).astype(np.float32)
    layers = [(l.input_dim, l.output_dim, l.activation.name.lower()) for l in spec.layers]
    expected, _ = scalar_forward(layers, params.weights, params.biases, x)
    np.testing.assert_allclose(model_forward(spec, params, x), expected, atol=1e-6)


def test_forward_rejects_wrong_width():
    spec = ModelSpec.from_dims([3, 2], ["identity"])
    with pytest.raises(DimensionError):
        model_forward(spec, init_params(spec, 0), np.zeros((2, 4), np.float32))


def test_cross_entropy_symmetric_logits_is_ln2():
    spec = ModelSpec((LayerSpec(2, 2, "identity"),), Loss.CROSS_ENTROPY)
    params = ModelParams([np.zeros((2, 2), np.float32)], [np.zeros((1, 2), np.float32)])
    loss, _ = model_backward(spec, params, np.ones((1, 2), np.float32), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-6)
    # Same answer with an explicit softmax output layer.
    spec_sm = ModelSpec((LayerSpec(2, 2, "softmax"),), Loss.CROSS_ENTROPY)
    loss_sm, _ = model_backward(spec_sm, params, np.ones((1, 2), np.float32), np.array([0]))
    assert loss_sm == pytest.approx(0.693147, abs=1e-6)


def test_mse_perfect_fit_has_zero_loss_and_grads():
    spec = ModelSpec((LayerSpec(2, 2, "identity"),), Loss.MSE)
    params = ModelParams([np.eye(2, dtype=np.float32)], [np.zeros((1, 2), np.float32)])
    x = np.array([[1, 2], [3, 4]], np.float32)
    loss, grads = model_backward(spec, params, x, x)
    assert loss == 0.0
    assert all(not g.any() for g in grads.tensors())


def test_backward_empty_batch_errors():
    spec = ModelSpec.from_dims([2, 1], ["identity"])
    with pytest.raises(ValueError, match="empty"):
        model_backward(spec, init_params(spec, 0), np.zeros((0, 2), np.float32), np.zeros((0, 1)))


def _random_net(rng):
    n_layers = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 9, size=n_layers + 1)]
    loss = Loss.CROSS_ENTROPY if rng.random() < 0.5 else Loss.MSE
    acts = [str(rng.choice(["relu", "identity"])) for _ in range(n_layers - 1)]
    last = str(rng.choice(["softmax", "identity", "relu"] if loss is Loss.MSE else ["softmax", "identity"]))
    if loss is Loss.CROSS_ENTROPY and dims[-1] < 2:
        dims[-1] = 2
    spec = ModelSpec.from_dims(dims, acts + [last], loss)
    batch = int(rng.integers(1, 5))
    x = rng.standard_normal((batch, dims[0])).astype(np.float32)
    if loss is Loss.MSE:
        y = rng.standard_normal((batch, dims[-1])).astype(np.float32)
    else:
        y = rng.integers(0, dims[-1], size=batch)
    return spec, x, y


def check_gradients(spec, params, x, y):
    loss, grads = model_backward(spec, params, x, y)
    layers = [(l.input_dim, l.output_dim, l.activation.name.lower()) for l in spec.layers]
    fd_w, fd_b = finite_difference_grads(
        layers, params.weights, params.biases, x, y, "mse" if spec.loss is Loss.MSE else "ce"
    )
    cw, fw = grads_match(grads.weights, fd_w)
    cb, fb = grads_match(grads.biases, fd_b)
    return loss, cw + cb, fw + fb


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec, x, y = _random_net(rng)
    params = init_params(spec, seed)
    for b in params.biases:
        b[...] = rng.uniform(-0.5, 0.5, b.shape)
    loss, checked, failures = check_gradients(spec, params, x, y)
    assert np.isfinite(loss)
    assert checked > 0
    assert failures == []


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one_and_ce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.from_dims([4, 6, 5], ["relu", "softmax"], Loss.CROSS_ENTROPY)
    params = init_params(spec, seed)
    x = rng.uniform(-50, 50, (8, 4)).astype(np.float32)
    out = model_forward(spec, params, x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    loss, _ = model_backward(spec, params, x, rng.integers(0, 5, size=8))
    assert loss >= 0.0


def test_sgd_step_scalar():
    p = ModelParams([np.array([[1.0]], np.float32)], [np.zeros((1, 1), np.float32)])
    g = ModelParams([np.array([[0.5]], np.float32)], [np.zeros((1, 1), np.float32)])
    sgd_step(p, g, SgdConfig(learning_rate=0.1))
    assert p.weights[0][0, 0] == np.float32(1.0) - np.float32(0.1) * np.float32(0.5)
    assert p.weights[0][0, 0] == pytest.approx(0.95)


def test_sgd_zero_gradient_is_bit_exact_noop():
    spec = ModelSpec.from_dims([4, 3, 2], ["relu", "identity"])
    params = init_params(spec, 5)
    before = params.copy()
    sgd_step(params, params.zeros_like(), SgdConfig(0.3))
    assert params.equal(before)


def test_sgd_replicas_bit_identical():
    spec = ModelSpec.from_dims([4, 3, 2], ["relu", "identity"])
    a, b = init_params(spec, 5), init_params(spec, 5)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 4)).astype(np.float32), rng.standard_normal((3, 2)).astype(np.float32)
    _, ga = model_backward(spec, a, x, y)
    _, gb = model_backward(spec, b, x, y)
    cfg = SgdConfig(0.1)
    sgd_step(a, ga, cfg)
    sgd_step(b, gb, cfg)
    assert a.equal(b)


def test_sgd_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=0.0)


def test_init_params_deterministic_and_bounded():
    spec = ModelSpec.from_dims([16, 8, 3], ["relu", "softmax"], Loss.CROSS_ENTROPY)
    a, b, c = init_params(spec, 1), init_params(spec, 1), init_params(spec, 2)
    assert a.equal(b)
    assert not a.equal(c)
    assert all(not bias.any() for bias in a.biases)
    for layer, w in zip(spec.layers, a.weights):
        assert np.abs(w).max() <= 1 / math.sqrt(layer.input_dim)


def test_spec_invariants():
    with pytest.raises(SpecError):
        ModelSpec((LayerSpec(2, 3), LayerSpec(4, 1)))
    with pytest.raises(SpecError):
        ModelSpec((LayerSpec(2, 3, "softmax"), LayerSpec(3, 1)))
    with pytest.raises(SpecError):
        ModelSpec(())
    with pytest.raises(SpecError):
        LayerSpec(0, 1)


def test_linear_regression_epoch_decreases_loss():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (64, 1)).astype(np.float32)
    y = 2 * x
    spec = ModelSpec.from_dims([1, 1], ["identity"], Loss.MSE)
    params = init_params(spec, 3)
    loss0, grads = model_backward(spec, params, x, y)
    sgd_step(params, grads, SgdConfig(0.1))
    loss1, _ = model_backward(spec, params, x, y)
    assert loss1 < loss0


def test_threaded_training_is_bit_identical():
    rng = np.random.default_rng(4)
    spec = ModelSpec.from_dims([20, 16, 4], ["relu", "softmax"], Loss.CROSS_ENTROPY)
    x = rng.standard_normal((40, 20)).astype(np.float32)
    y = rng.integers(0, 4, 40)
    results = []
    for compute in (Compute(1, 32), Compute(3, 8)):
        params = init_params(spec, 9)
        for _ in range(3):
            _, g = model_backward(spec, params, x, y, compute)
            sgd_step(params, g, SgdConfig(0.5))
        results.append(params)
    assert results[0].equal(results[1])


class TestCheckpoint:
    spec = ModelSpec.from_dims([3, 4, 2], ["relu", "softmax"], Loss.CROSS_ENTROPY)

    def test_round_trip_is_bit_exact(self, tmp_path):
        params = init_params(self.spec, 42)
        path = tmp_path / "m.spnn"
        checkpoint.save(path, self.spec, params)
        spec2, params2 = checkpoint.load(path)
        assert spec2 == self.spec
        assert params2.equal(params)
        assert checkpoint.dumps(spec2, params2) == path.read_bytes()

    def test_layout(self):
        params = init_params(self.spec, 1)
        data = checkpoint.dumps(self.spec, params)
        assert data[:4] == b"SPNN"
        assert int.from_bytes(data[4:6], "little") == 1
        assert int.from_bytes(data[6:8], "little") == 2
        assert int.from_bytes(data[8:12], "little") == 3
        assert int.from_bytes(data[12:16], "little") == 4
        assert data[16] == Activation.RELU == 1
        first_weight = np.frombuffer(data[17:21], "<f4")[0]
        assert first_weight == params.weights[0][0, 0]
        assert data[-1] == 1  # cross-entropy trailer
        expected_len = 8 + (9 + 4 * (12 + 4)) + (9 + 4 * (8 + 2)) + 1
        assert len(data) == expected_len

    @pytest.mark.parametrize("cut", [0, 3, 7, 20, -1])
    def test_truncated_rejected(self, cut):
        data = checkpoint.dumps(self.spec, init_params(self.spec, 1))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(data[:cut])

    def test_bad_magic_and_version(self):
        data = bytearray(checkpoint.dumps(self.spec, init_params(self.spec, 1)))
        bad = bytes(b"XXXX" + data[4:])
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.loads(bad)
        data[4] = 9
        with pytest.raises(checkpoint.CheckpointError, match="version"):
            checkpoint.loads(bytes(data))
