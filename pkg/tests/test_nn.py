from fei3d.exception import (
    BatchNormError,
    ConfigurationError,
    ProtocolError,
    ShapeError,
)
from fei3d.losses import softmax_cross_entropy
from fei3d.models import HeadKind, HeadSpec
from fei3d.nn import (
    BatchNormLayer,
    build_classifier,
    DropoutLayer,
    grad_check,
    mlp_backprop,
    mlp_forward,
    MlpModel,
)
from fei3d.numerics import RngState

import numpy as np
import pytest


def small_model(seed: int = 0, head: str = "raf_db_7", **kwargs) -> MlpModel:
    kwargs.setdefault("dropout", (0.0, 0.0))
    return build_classifier(12, head, RngState(seed), hidden_width=16, **kwargs)


def smooth_batch(model: MlpModel, seed: int, rows: int = 8) -> np.ndarray:
    """找一个远离 Leaky ReLU 拐点的 batch"""
    rng = RngState(seed)
    for _ in range(50):
        batch = rng.normal(size=(rows, model.input_dim))
        if model.kink_margin(batch) > 1e-4:
            return batch
    raise AssertionError("no smooth batch found")


@pytest.mark.parametrize(
    ("head", "width"),
    [("raf_db_7", 7), ("affectnet_8_va", 10), ("va_only_2", 2), ("custom(3)", 3)],
)
def test_head_widths(head, width):
    model = small_model(head=head)
    assert model.layer_widths() == [12, 16, 16, 16, 16, width]


def test_default_hidden_width_is_2048():
    model = build_classifier(156, "raf_db_7", RngState(0))
    assert model.layer_widths() == [156, 2048, 2048, 2048, 2048, 7]


def test_unknown_head_is_configuration_error():
    with pytest.raises(ConfigurationError):
        build_classifier(12, "raf_db_9", RngState(0))


def test_head_spec_parse_round_trip():
    spec = HeadSpec.parse("custom(5)")
    assert spec.kind == HeadKind.CUSTOM
    assert str(spec) == "custom(5)"
    assert HeadSpec.parse("affectnet_8_va").has_va


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        small_model().forward(np.zeros((4, 11)), "eval")


def test_backprop_needs_train_forward():
    model = small_model()
    with pytest.raises(ProtocolError):
        model.backprop(np.zeros((4, 7)))
    model.forward(np.ones((4, 12)), "eval")
    with pytest.raises(ProtocolError):
        model.backprop(np.zeros((4, 7)))


def test_backprop_shape_mismatch():
    model = small_model()
    model.forward(np.random.default_rng(0).normal(size=(4, 12)), "train")
    with pytest.raises(ShapeError):
        model.backprop(np.zeros((3, 7)))


def test_batch_norm_needs_two_rows_in_train_mode():
    model = small_model()
    with pytest.raises(BatchNormError):
        model.forward(np.ones((1, 12)), "train")
    assert model.forward(np.ones((1, 12)), "eval").shape == (1, 7)


def test_eval_is_deterministic_with_dropout():
    model = small_model(dropout=(0.5, 0.4))
    x = np.random.default_rng(1).normal(size=(5, 12))
    np.testing.assert_array_equal(model.forward(x, "eval"), model.forward(x, "eval"))


def test_dropout_changes_train_outputs():
    model = small_model(dropout=(0.5, 0.4))
    x = np.random.default_rng(1).normal(size=(6, 12))
    snapshot = model.state_dict()
    first = model.forward(x, "train")
    model.load_state_dict(snapshot)
    second = model.forward(x, "train")
    assert not np.array_equal(first, second)


def test_predict_matches_eval_forward():
    model = small_model()
    x = np.random.default_rng(2).normal(size=(23, 12))
    np.testing.assert_allclose(
        model.predict(x, threads=4, chunk_rows=5),
        model.forward(x, "eval"),
        rtol=0,
        atol=1e-12,
    )


def test_predict_takes_a_single_sample():
    model = small_model()
    x = np.random.default_rng(9).normal(size=12)
    np.testing.assert_array_equal(
        model.predict(x),
        model.forward(x.reshape(1, -1), "eval"),
    )


def test_state_dict_transfers_behaviour():
    source = small_model(seed=1)
    source.forward(np.random.default_rng(0).normal(size=(8, 12)), "train")
    target = small_model(seed=2)
    target.load_state_dict(source.state_dict())
    x = np.random.default_rng(3).normal(size=(4, 12))
    np.testing.assert_array_equal(source.forward(x, "eval"), target.forward(x, "eval"))


def test_load_state_dict_rejects_unknown_keys():
    model = small_model()
    state = model.state_dict()
    state["extra.weights"] = np.zeros(1)
    with pytest.raises(ShapeError):
        model.load_state_dict(state)


def test_bn_running_var_uses_unbiased_estimate():
    model = small_model()
    bn = model.trunk[1]
    x = np.random.default_rng(4).normal(size=(6, 12))
    model.forward(x, "train")
    z = x @ model.trunk[0].weights.T
    expected = 0.9 * 1.0 + 0.1 * z.var(axis=0, ddof=1)
    np.testing.assert_allclose(bn.running_var, expected, rtol=1e-12)


def test_replace_head_keeps_trunk():
    model = small_model()
    state = model.state_dict()
    trunk_before = {k: v for k, v in state.items() if k.startswith("trunk")}
    model.replace_head(HeadSpec(kind=HeadKind.VA_ONLY_2), RngState(9))
    assert model.layer_widths()[-1] == 2
    for key, value in trunk_before.items():
        np.testing.assert_array_equal(model.state_dict()[key], value)


def test_mlp_backprop_returns_input_gradient():
    model = small_model()
    x = smooth_batch(model, 0)
    out = mlp_forward(model, x, "train")
    _, grad = softmax_cross_entropy(out, np.arange(8) % 7)
    grads = mlp_backprop(model, grad)
    assert grads["input"].shape == x.shape
    assert grads["output.weights"].shape == (7, 16)


def test_kink_margin_restores_state():
    model = small_model()
    before = model.state_dict()
    model.kink_margin(np.random.default_rng(5).normal(size=(8, 12)))
    for key, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[key])


def test_grad_check_cross_entropy():
    model = small_model()
    batch = smooth_batch(model, 11)
    labels = np.arange(8) % 7
    error = grad_check(model, softmax_cross_entropy, batch, labels)
    assert error < 1e-5


def test_grad_check_rejects_step_outside_range():
    model = small_model()
    with pytest.raises(ConfigurationError):
        grad_check(model, softmax_cross_entropy, np.zeros((4, 12)), None, h=1e-2)


def test_grad_check_restores_dropout_and_state():
    model = small_model(dropout=(0.5, 0.4))
    before = model.state_dict()
    batch = smooth_batch(model, 3)
    grad_check(model, softmax_cross_entropy, batch, np.arange(8) % 7)
    assert [layer.rate for layer in model.dropout_layers()] == [0.5, 0.4]
    for key, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[key])


def test_inverted_dropout_keeps_expectation():
    layer = DropoutLayer(0.5, RngState(6))
    x = np.linspace(0.5, 2.0, 8).reshape(1, -1)
    assert layer.forward(x, False) is x
    out = layer.forward(np.repeat(x, 100_000, axis=0), True)
    np.testing.assert_allclose(out.mean(axis=0), x[0], rtol=0.02)


def test_batch_norm_train_output_moments():
    bn = BatchNormLayer(6)
    rng = np.random.default_rng(7)
    bn.gamma = rng.uniform(0.5, 2.0, size=6)
    bn.beta = rng.normal(size=6)
    # 输入方差远大于 epsilon
    x = rng.normal(loc=3.0, scale=50.0, size=(64, 6))
    out = bn.forward(x, True)
    np.testing.assert_allclose(out.mean(axis=0), bn.beta, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), bn.gamma**2, atol=1e-6)


def scaled_sum_loss(scale: float, skew: float = 1.0):
    """L = scale · mean(行和)，梯度乘以 skew"""

    def loss(outputs, _targets):
        n = outputs.shape[0]
        value = scale * float(outputs.sum()) / n
        return value, np.full(outputs.shape, scale * skew / n)

    return loss


def test_grad_check_is_relative_for_small_gradients():
    model = small_model()
    batch = smooth_batch(model, 12)
    assert grad_check(model, scaled_sum_loss(1e-4), batch, None) < 1e-5
    # 1% 的梯度偏差在 1e-4 量级上只有 1e-6 的绝对差
    assert grad_check(model, scaled_sum_loss(1e-4, skew=1.01), batch, None) > 1e-3


def test_grad_check_zero_gradient():
    model = small_model()
    batch = smooth_batch(model, 13)

    def constant(outputs, _targets):
        return 1.5, np.zeros_like(outputs)

    assert grad_check(model, constant, batch, None) < 1e-9
