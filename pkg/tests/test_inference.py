"""Label-distribution inference from last-layer update blocks."""

import numpy as np
import pytest

from fedsim.data import class_means, gen_dataset
from fedsim.errors import ConfigError, ShapeError
from fedsim.inference import (
    InferenceConfig,
    class_indicator,
    distribution_accuracy,
    infer_column,
    infer_matrix,
    recover_last_layer_gradient,
)
from fedsim.model import (
    Batch,
    init_model,
    last_layer_weight_block,
    local_train,
    loss_and_grad,
)


def test_recover_single_step_identity():
    rng = np.random.default_rng(0)
    model = init_model([16, 12, 6], seed=1)
    batch = Batch(rng.standard_normal((20, 16)), rng.integers(0, 6, size=20))
    upd = local_train(model, batch, epochs=1, lr=0.1, batch_size=32, seed=0)
    G = recover_last_layer_gradient(upd.delta, model.shapes, lr=0.1)
    _, grad = loss_and_grad(model, batch)
    expected = last_layer_weight_block(grad, model.shapes)
    assert np.max(np.abs(G - expected)) < 1e-14


def test_recover_zero_update():
    shapes = [(12, 16), (6, 12)]
    d = 16 * 12 + 12 + 12 * 6 + 6
    G = recover_last_layer_gradient(np.zeros(d), shapes, lr=0.05)
    assert np.all(G == 0.0) and G.shape == (6, 12)


def test_recover_rejects_bad_lr():
    with pytest.raises(ConfigError):
        recover_last_layer_gradient(np.zeros(10), [(2, 3), (1, 2)], lr=0.0)


def test_recover_matches_instrumented_loop():
    # oracle: capture every per-step last-layer gradient via the hook and sum
    rng = np.random.default_rng(1)
    model = init_model([16, 12, 6], seed=2)
    batch = Batch(rng.standard_normal((40, 16)), rng.integers(0, 6, size=40))
    captured = []
    upd = local_train(
        model, batch, epochs=5, lr=0.05, batch_size=8, seed=3,
        on_step=lambda step, theta, grad: captured.append(
            last_layer_weight_block(grad, model.shapes).copy()),
    )
    accumulated = np.sum(captured, axis=0)
    G = recover_last_layer_gradient(upd.delta, model.shapes, lr=0.05)
    assert np.max(np.abs(G - accumulated)) < 1e-8


def test_indicator_zero_gradient():
    assert np.all(class_indicator(np.zeros((6, 12))) == 0.0)


def test_indicator_single_class_argmax():
    # one gradient step on one sample of class c: the class coordinate is
    # the only one with a positive indicator entry, for every c
    rng = np.random.default_rng(4)
    model = init_model([16, 12, 6], seed=7)
    for c in range(6):
        batch = Batch(rng.standard_normal((1, 16)), np.array([c]))
        upd = local_train(model, batch, epochs=1, lr=0.05, batch_size=4, seed=0)
        u = class_indicator(recover_last_layer_gradient(upd.delta, model.shapes, 0.05))
        assert int(np.argmax(u)) == c


def test_indicator_two_class_client():
    # client holding only classes {2, 7}: after 5 local epochs the two
    # largest indicator entries are exactly those classes
    means = class_means(10, 32, seed=2)
    ds = gen_dataset(10, 32, 40, seed=5, means=means)
    keep = np.isin(ds.labels, (2, 7))
    model = init_model([32, 64, 10], seed=3, zero_last=True)
    upd = local_train(model, Batch(ds.samples[keep], ds.labels[keep]),
                      epochs=5, lr=0.05, batch_size=64, seed=1)
    u = class_indicator(recover_last_layer_gradient(upd.delta, model.shapes, 0.05))
    assert set(np.argsort(u)[-2:]) == {2, 7}


def test_infer_column_modes():
    cfg_mean = InferenceConfig(threshold_mode="mean")
    u = np.zeros(10)
    u[0] = 5.0
    assert np.array_equal(infer_column(u, cfg_mean),
                          np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 0], dtype=np.uint8))
    # constant vector: nothing strictly exceeds the mean
    assert np.all(infer_column(np.full(10, 3.3), cfg_mean) == 0)
    cfg_abs = InferenceConfig(threshold_mode="absolute", beta=2.0)
    assert np.array_equal(infer_column(np.array([1.0, 2.0, 3.0]), cfg_abs),
                          np.array([0, 0, 1], dtype=np.uint8))
    cfg_std = InferenceConfig(threshold_mode="mean_plus_std")
    v = np.array([10.0, 0.0, 0.0, 0.0])
    assert np.array_equal(infer_column(v, cfg_std), np.array([1, 0, 0, 0], dtype=np.uint8))


def test_inference_config_validation():
    with pytest.raises(ConfigError):
        InferenceConfig(threshold_mode="quantile")
    with pytest.raises(ConfigError):
        InferenceConfig(client_lr=0.0)
    with pytest.raises(ConfigError):
        InferenceConfig(beta=float("inf"), threshold_mode="absolute")


def test_distribution_accuracy_definition():
    A = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    assert distribution_accuracy(A, A) == 1.0
    assert distribution_accuracy(A, 1 - A) == 0.0
    B = A.copy()
    B[0, 0] ^= 1
    assert distribution_accuracy(A, B) == 1 - 1 / 4
    with pytest.raises(ShapeError):
        distribution_accuracy(A, np.zeros((3, 2), dtype=np.uint8))


def test_indicator_scale_equivariance():
    rng = np.random.default_rng(5)
    G = rng.standard_normal((8, 5))
    u = class_indicator(G)
    assert np.allclose(class_indicator(3.5 * G), 3.5 * u, atol=1e-12)
    cfg = InferenceConfig(threshold_mode="mean")
    assert np.array_equal(infer_column(u, cfg), infer_column(7.0 * u, cfg))


def test_indicator_permutation_equivariance():
    rng = np.random.default_rng(6)
    G = rng.standard_normal((8, 5))
    perm = rng.permutation(8)
    assert np.array_equal(class_indicator(G[perm]), class_indicator(G)[perm])


def test_infer_matrix_stacks_columns():
    rng = np.random.default_rng(7)
    model = init_model([16, 12, 6], seed=9)
    cfg = InferenceConfig(client_lr=0.05)
    deltas = []
    for c in (0, 3):
        batch = Batch(rng.standard_normal((5, 16)), np.full(5, c))
        deltas.append(local_train(model, batch, epochs=1, lr=0.05, batch_size=8, seed=0).delta)
    A_hat = infer_matrix(deltas, model.shapes, cfg)
    assert A_hat.shape == (6, 2)
    assert A_hat[0, 0] == 1 and A_hat[3, 1] == 1


def test_indicator_rejects_non_finite():
    G = np.zeros((4, 3))
    G[1, 1] = np.nan
    with pytest.raises(ShapeError):
        class_indicator(G)
