import math

from fei3d.exception import BatchSizeError, ConfigurationError, DataError, ShapeError
from fei3d.losses import (
    AffectNetObjective,
    ccc,
    class_weights_from_counts,
    ClassificationObjective,
    combined_affectnet_loss,
    mse_loss,
    pcc,
    sample_loss_weights,
    select_objective,
    softmax_cross_entropy,
    stage1_combined_loss,
    stage2_va_loss,
    Stage1Objective,
    Stage2Objective,
    weighted_cross_entropy,
)
from fei3d.models import ClassWeights, HeadSpec, LossWeights, VaLossConfig
from fei3d.numerics import RngState

import numpy as np
import pytest


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn(x)
        flat[i] = original - h
        minus = fn(x)
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def test_uniform_logits_give_log_c():
    loss, _ = softmax_cross_entropy(np.zeros((4, 8)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(8))


def test_saturated_logit_gives_zero_loss():
    logits = np.zeros((1, 3))
    logits[0, 2] = 1000.0
    loss, _ = softmax_cross_entropy(logits, np.array([2]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_per_sample_log_prob():
    logits = np.random.default_rng(0).normal(size=(3, 2))
    labels = np.array([0, 1, 1])
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(3), labels]))
    loss, grad = softmax_cross_entropy(logits, labels)
    assert loss == pytest.approx(expected, rel=1e-12)
    onehot = np.eye(2)[labels]
    np.testing.assert_allclose(grad, (probs - onehot) / 3, atol=1e-15)


def test_out_of_range_label_names_the_sample():
    with pytest.raises(DataError) as info:
        softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 4, 1]))
    assert info.value.details["index"] == 1


def test_unit_weights_equal_plain_cross_entropy_exactly():
    logits = np.random.default_rng(1).normal(size=(6, 5))
    labels = np.array([0, 1, 2, 3, 4, 0])
    plain, plain_grad = softmax_cross_entropy(logits, labels)
    weighted, weighted_grad = weighted_cross_entropy(logits, labels, np.ones(5))
    assert weighted == plain
    np.testing.assert_array_equal(weighted_grad, plain_grad)


def test_zero_weight_on_every_true_class():
    logits = np.random.default_rng(2).normal(size=(3, 3))
    loss, grad = weighted_cross_entropy(logits, np.array([1, 1, 1]), [1.0, 0.0, 1.0])
    assert loss == 0.0
    assert not grad.any()


def test_weighted_cross_entropy_reductions():
    logits = np.random.default_rng(3).normal(size=(4, 2))
    labels = np.array([0, 1, 1, 1])
    weights = [2.0, 2.0 / 3.0]
    nll = -np.log(
        np.exp(logits[np.arange(4), labels]) / np.exp(logits).sum(axis=1),
    )
    sample_w = np.array(weights)[labels]
    mean, _ = weighted_cross_entropy(logits, labels, weights)
    normalized, _ = weighted_cross_entropy(
        logits, labels, weights, reduction="weighted_mean"
    )
    assert mean == pytest.approx(np.mean(nll * sample_w), rel=1e-12)
    assert normalized == pytest.approx(
        np.sum(nll * sample_w) / sample_w.sum(), rel=1e-12
    )
    with pytest.raises(ConfigurationError):
        weighted_cross_entropy(logits, labels, weights, reduction="sum")


def test_weighted_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 2, 2])
    weights = ClassWeights(values=[0.5, 1.5, 2.0])
    _, grad = weighted_cross_entropy(logits, labels, weights)
    expected = numeric_grad(
        lambda x: weighted_cross_entropy(x, labels, weights)[0], logits.copy()
    )
    np.testing.assert_allclose(grad, expected, atol=1e-8)


def test_weight_length_must_match_classes():
    with pytest.raises(ShapeError):
        weighted_cross_entropy(np.zeros((2, 3)), np.array([0, 1]), [1.0, 1.0])


@pytest.mark.parametrize(
    ("counts", "expected"),
    [([10, 30], [2.0, 2.0 / 3.0]), ([5, 5, 5], [1.0, 1.0, 1.0]), ([7], [1.0])],
)
def test_class_weights_from_counts(counts, expected):
    assert class_weights_from_counts(counts).values == pytest.approx(expected)


def test_absent_class_is_configuration_error():
    with pytest.raises(ConfigurationError) as info:
        class_weights_from_counts([3, 0, 2])
    assert info.value.details["absent_classes"] == [1]


def test_mse_loss():
    assert mse_loss(np.ones((2, 2)), np.ones((2, 2)))[0] == 0.0
    loss, grad = mse_loss(np.zeros((1, 2)), np.ones((1, 2)))
    assert loss == 1.0
    np.testing.assert_array_equal(grad, [[-1.0, -1.0]])
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 1)))


def test_pcc_examples():
    x = np.array([0.3, -1.2, 2.0, 0.7])
    assert pcc(x, x).value == pytest.approx(1.0)
    assert pcc([1, 2, 3], [3, 2, 1]).value == pytest.approx(-1.0)
    assert pcc(x, 2 * x + 5).value == pytest.approx(1.0)


def test_pcc_constant_input_is_degenerate():
    result = pcc([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    assert result.value == 0.0
    assert result.degenerate
    assert not result.grad.any()


def test_ccc_examples():
    x = np.array([0.1, 0.4, -0.3, 0.9])
    assert ccc(x, x).value == pytest.approx(1.0)
    assert ccc([1, 2, 3], [3, 2, 1]).value == pytest.approx(-1.0)
    assert ccc([1, 2, 3], [2, 2, 2]).value == pytest.approx(0.0)
    assert ccc(x, x + 0.5).value < 1.0


def test_ccc_constant_sequences():
    equal = ccc([0.5, 0.5], [0.5, 0.5])
    assert equal.value == 1.0 and equal.degenerate
    different = ccc([0.5, 0.5], [0.2, 0.2])
    assert different.value == 0.0 and different.degenerate


def test_correlation_needs_two_samples():
    with pytest.raises(BatchSizeError):
        ccc([1.0], [1.0])


@pytest.mark.parametrize("fn", [pcc, ccc])
def test_correlation_gradients(fn):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=7), rng.normal(size=7)
    expected = numeric_grad(lambda v: fn(v, y).value, x.copy())
    np.testing.assert_allclose(fn(x, y).grad, expected, atol=1e-7)


def make_affect_batch(seed: int = 6, n: int = 6):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, 8))
    va_pred = rng.uniform(-1, 1, size=(n, 2))
    labels = np.arange(n) % 8
    va = rng.uniform(-1, 1, size=(n, 2))
    return logits, va_pred, labels, va


def test_equal_loss_weights_share_a_third_each():
    assert LossWeights(alpha=2, beta=2, gamma=2).shares == pytest.approx(
        (1 / 3, 1 / 3, 1 / 3)
    )


def test_combined_loss_is_scale_invariant():
    batch = make_affect_batch()
    w = LossWeights(alpha=0.2, beta=0.5, gamma=0.9)
    scaled = LossWeights(alpha=2.0, beta=5.0, gamma=9.0)
    a, _ = combined_affectnet_loss(*batch, w)
    b, _ = combined_affectnet_loss(*batch, scaled)
    assert a == pytest.approx(b, rel=1e-12)


def test_combined_loss_vanishes_on_perfect_predictions():
    labels = np.array([0, 1, 2, 3])
    logits = np.full((4, 8), -1000.0)
    logits[np.arange(4), labels] = 1000.0
    va = np.array([[0.1, -0.2], [0.4, 0.3], [-0.5, 0.8], [0.9, -0.6]])
    loss, _ = combined_affectnet_loss(
        logits, va.copy(), labels, va, LossWeights(alpha=1, beta=1, gamma=1)
    )
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_combined_loss_terms():
    logits, va_pred, labels, va = make_affect_batch()
    w = LossWeights(alpha=0.3, beta=0.6, gamma=0.1)
    a, b, g = w.shares
    ce, _ = softmax_cross_entropy(logits, labels)
    mse, _ = mse_loss(va_pred, va)
    mean_ccc = np.mean([ccc(va_pred[:, d], va[:, d]).value for d in (0, 1)])
    mean_pcc = np.mean([pcc(va_pred[:, d], va[:, d]).value for d in (0, 1)])
    loss, _ = combined_affectnet_loss(logits, va_pred, labels, va, w)
    expected = ce + a * mse + b * (1 - mean_ccc) + g * (1 - mean_pcc)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_combined_loss_gradient_on_va():
    logits, va_pred, labels, va = make_affect_batch()
    w = LossWeights(alpha=0.3, beta=0.6, gamma=0.1)
    _, (_, grad_va) = combined_affectnet_loss(logits, va_pred, labels, va, w)
    expected = numeric_grad(
        lambda x: combined_affectnet_loss(logits, x, labels, va, w)[0], va_pred.copy()
    )
    np.testing.assert_allclose(grad_va, expected, atol=1e-7)


def test_combined_loss_needs_two_rows():
    logits, va_pred, labels, va = make_affect_batch(n=1)
    with pytest.raises(BatchSizeError):
        combined_affectnet_loss(
            logits, va_pred, labels, va, LossWeights(alpha=1, beta=1, gamma=1)
        )


def test_stage1_loss_terms():
    logits, va_pred, labels, va = make_affect_batch()
    weights = np.linspace(0.5, 2.0, 8)
    without_mse, _ = stage1_combined_loss(
        logits, va_pred, labels, va, weights, VaLossConfig(w1=0.0)
    )
    assert without_mse == weighted_cross_entropy(logits, labels, weights)[0]
    loss, _ = stage1_combined_loss(
        logits, va_pred, labels, va, weights, VaLossConfig(w1=0.7)
    )
    expected = weighted_cross_entropy(logits, labels, weights)[0] + 0.7 * mse_loss(
        va_pred, va
    )[0]
    assert loss == pytest.approx(expected, rel=1e-12)


def test_stage2_loss_variants():
    _, va_pred, _, va = make_affect_batch()
    assert stage2_va_loss(va.copy(), va, VaLossConfig())[0] == pytest.approx(
        0.0, abs=1e-12
    )
    ccc_v = ccc(va_pred[:, 0], va[:, 0]).value
    ccc_a = ccc(va_pred[:, 1], va[:, 1]).value
    mse = mse_loss(va_pred, va)[0]
    loss, _ = stage2_va_loss(va_pred, va, VaLossConfig(w2=0.5))
    assert loss == pytest.approx(1 - ccc_v / 2 - ccc_a / 2 + 0.5 * mse, rel=1e-12)
    literal, _ = stage2_va_loss(
        va_pred, va, VaLossConfig(w2=0.0, ccc_as_one_minus=False)
    )
    assert literal == pytest.approx((ccc_v + ccc_a) / 2, rel=1e-12)


def test_stage2_gradient():
    _, va_pred, _, va = make_affect_batch(seed=8)
    cfg = VaLossConfig(w2=0.3)
    _, grad = stage2_va_loss(va_pred, va, cfg)
    expected = numeric_grad(lambda x: stage2_va_loss(x, va, cfg)[0], va_pred.copy())
    np.testing.assert_allclose(grad, expected, atol=1e-7)


def test_sample_loss_weights_strictly_positive():
    rng = RngState(3)
    for _ in range(50):
        w = sample_loss_weights(rng)
        assert 0 < w.alpha < 1 and 0 < w.beta < 1 and 0 < w.gamma < 1


def test_select_objective_by_head():
    rng = RngState(0)
    assert isinstance(
        select_objective(HeadSpec.parse("raf_db_7")), ClassificationObjective
    )
    assert isinstance(
        select_objective(HeadSpec.parse("affectnet_8_va"), rng=rng),
        AffectNetObjective,
    )
    assert isinstance(
        select_objective(
            HeadSpec.parse("affectnet_8_va"),
            class_weights=[1.0] * 8,
            stage=1,
        ),
        Stage1Objective,
    )
    assert isinstance(select_objective(HeadSpec.parse("va_only_2")), Stage2Objective)
    with pytest.raises(ConfigurationError):
        select_objective(HeadSpec.parse("affectnet_8_va"))


def test_affectnet_objective_uses_unit_weights_for_validation():
    logits, va_pred, labels, va = make_affect_batch()
    objective = AffectNetObjective(RngState(1))
    outputs = np.concatenate([logits, va_pred], axis=1)
    loss, grad = objective(outputs, labels, va, False)
    assert objective.last_weights == LossWeights(alpha=1, beta=1, gamma=1)
    expected, _ = combined_affectnet_loss(
        logits, va_pred, labels, va, LossWeights(alpha=1, beta=1, gamma=1)
    )
    assert loss == expected
    assert grad.shape == (6, 10)
