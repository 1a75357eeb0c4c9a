import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sslcil.backbone import (
    TrainConfig,
    count_parameters,
    embed,
    forward,
    init_backbone,
    learnable_names,
    train_base,
)
from sslcil.errors import FrozenError, ParameterError, ShapeError

from oracles import gradient_check, mlp_forward_eval


def test_gradients_match_finite_differences():
    worst = gradient_check()
    assert set(worst) == set(learnable_names()) | {"head_W", "head_b"}
    assert max(worst.values()) < 1e-4, worst


def test_init_deterministic():
    a = init_backbone(306, seed=3)
    b = init_backbone(306, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not a.frozen


def test_init_identity_batchnorm():
    w = init_backbone(10, 4, 4, 4, seed=0)
    for l in range(3):
        np.testing.assert_array_equal(w.params[f"gamma{l}"], 1)
        np.testing.assert_array_equal(w.params[f"beta{l}"], 0)
        np.testing.assert_array_equal(w.params[f"mean{l}"], 0)
        np.testing.assert_array_equal(w.params[f"var{l}"], 1)


def test_init_fan_in_bounds():
    w = init_backbone(306, seed=0)
    assert np.abs(w.params["W0"]).max() <= 1 / np.sqrt(306)
    assert np.abs(w.params["W1"]).max() <= 1 / np.sqrt(512)


def test_parameter_count():
    # 306*512+512 + 2*(512*512+512) + 3 layers * (gamma + beta) * 512
    assert count_parameters(init_backbone(306, 512, 512, 512, seed=0)) == 685568


def test_zero_dims_rejected():
    with pytest.raises(ParameterError):
        init_backbone(306, 0, 512, 512)


def test_zero_batch_finite_and_equals_relu_bias_chain():
    w = init_backbone(12, 6, 6, 6, seed=1)
    out = forward(np.zeros((2, 12)), w, "eval")
    assert np.all(np.isfinite(out))
    h = np.zeros(12)
    s = 1 / np.sqrt(1 + 1e-5)
    for l in range(3):
        h = np.maximum((h @ w.params[f"W{l}"] + w.params[f"b{l}"]) * s, 0)
    np.testing.assert_allclose(out, np.tile(h, (2, 1)), rtol=1e-14)


def test_eval_forward_matches_straight_line():
    rng = np.random.default_rng(0)
    w = init_backbone(20, 16, 12, 8, seed=2)
    for l in range(3):
        w.params[f"mean{l}"] = rng.standard_normal(w.params[f"mean{l}"].shape)
        w.params[f"var{l}"] = rng.random(w.params[f"var{l}"].shape) + 0.5
        w.params[f"gamma{l}"] = rng.standard_normal(w.params[f"gamma{l}"].shape)
    X = rng.standard_normal((7, 20))
    np.testing.assert_allclose(forward(X, w, "eval"), mlp_forward_eval(X, w.params), rtol=1e-12, atol=1e-14)


def test_single_sample_train_mode_is_finite():
    w = init_backbone(5, 4, 4, 4, seed=0)
    out = forward(np.ones((1, 5)), w, "train")
    assert np.all(np.isfinite(out))
    assert np.all(out == 0)  # a single sample normalises to zero, then ReLU


def test_train_mode_updates_running_stats():
    w = init_backbone(5, 4, 4, 4, seed=0)
    X = np.random.default_rng(0).standard_normal((10, 5))
    z = X @ w.params["W0"] + w.params["b0"]
    forward(X, w, "train")
    np.testing.assert_allclose(w.params["mean0"], 0.1 * z.mean(axis=0))
    np.testing.assert_allclose(w.params["var0"], 0.9 + 0.1 * z.var(axis=0, ddof=1))


def test_shape_and_mode_errors():
    w = init_backbone(5, 4, 4, 4, seed=0)
    with pytest.raises(ShapeError):
        forward(np.zeros((2, 6)), w)
    with pytest.raises(ParameterError):
        forward(np.zeros((2, 5)), w, "predict")


def test_frozen_contract():
    w = init_backbone(5, 4, 4, 4, seed=0)
    with pytest.raises(FrozenError):
        embed(np.zeros((1, 5)), w)
    f = w.freeze()
    with pytest.raises(FrozenError):
        forward(np.zeros((2, 5)), f, "train")
    with pytest.raises(ValueError):
        f.params["W0"][0, 0] = 1.0
    assert f.frozen and not w.frozen


def _toy(seed=0, n=64, d=20, c=10):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.random((n, c))


def test_train_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate, c.weight_decay) == (30, 256, 1e-3, 1e-4)


def test_overfits_toy_set():
    X, Y = _toy()
    w = train_base(X, Y, TrainConfig(epochs=200, batch_size=64), dims=(32, 32, 32))
    assert w.frozen
    assert w.loss_history[-1] < 0.01 * w.loss_history[0]


def test_zero_epochs_returns_init():
    X, Y = _toy()
    w = train_base(X, Y, TrainConfig(epochs=0, seed=4), dims=(8, 8, 8))
    ref = init_backbone(20, 8, 8, 8, seed=4)
    assert w.frozen
    for k in ref.params:
        np.testing.assert_array_equal(w.params[k], ref.params[k])


def test_training_deterministic():
    X, Y = _toy()
    cfg = TrainConfig(epochs=3, batch_size=16, seed=9)
    a = train_base(X, Y, cfg, dims=(8, 8, 8))
    b = train_base(X, Y, cfg, dims=(8, 8, 8))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_train_errors():
    with pytest.raises(ParameterError):
        train_base(np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        train_base(np.zeros((3, 3)), np.zeros((2, 2)))
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0)


@given(st.integers(0, 1000))
def test_embed_properties(seed):
    X, Y = _toy(seed % 7)
    w = train_base(X, Y, TrainConfig(epochs=1, batch_size=32), dims=(8, 8, 6))
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((9, 20))
    out = embed(Z, w)
    assert out.shape == (9, 6)
    assert np.all(out >= 0)
    assert out.tobytes() == embed(Z, w).tobytes()
    perm = rng.permutation(9)
    np.testing.assert_array_equal(embed(Z[perm], w), out[perm])
