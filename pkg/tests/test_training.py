import math

from fei3d import training
from fei3d.data import split_dataset, synth_generate
from fei3d.exception import ConfigurationError, DataError, FormatError, ShapeError
from fei3d.losses import (
    ccc,
    class_weights_from_counts,
    softmax_cross_entropy,
    Stage1Objective,
)
from fei3d.models import CheckpointMeta, HeadKind, SynthSpec, TrainConfig, VaLossConfig
from fei3d.nn import build_classifier
from fei3d.numerics import RngState
from fei3d.training import (
    adam_step,
    CHECKPOINT_MAGIC,
    checkpoint_bytes,
    cyclic_lr,
    early_stop_update,
    evaluate_split,
    fit,
    fit_two_stage_va,
    load_checkpoint,
    OptimizerState,
    read_checkpoint,
    save_checkpoint,
    write_history,
)

import numpy as np
import pytest


def test_cyclic_lr_triangle():
    cfg = TrainConfig(step_size=10)
    assert cyclic_lr(cfg, 0) == pytest.approx(1e-6)
    assert cyclic_lr(cfg, 10) == pytest.approx(1e-4)
    assert cyclic_lr(cfg, 5) == pytest.approx(5.05e-5)
    assert cyclic_lr(cfg, 20) == pytest.approx(1e-6)
    for step in range(0, 60, 7):
        assert cyclic_lr(cfg, step) == cyclic_lr(cfg, step + 20)


def test_cyclic_lr_needs_step_size():
    with pytest.raises(ConfigurationError):
        cyclic_lr(TrainConfig(), 0)


def test_triangular2_halves_each_cycle():
    cfg = TrainConfig(step_size=4, scheduler_mode="triangular2")
    peak = cyclic_lr(cfg, 4) - cfg.base_lr
    assert cyclic_lr(cfg, 12) - cfg.base_lr == pytest.approx(peak / 2)


def test_resolved_step_size():
    assert TrainConfig(batch_size=64).resolved_step_size(4000) == 31
    assert TrainConfig(batch_size=64).resolved_step_size(64) == 1
    assert TrainConfig(step_size=7).resolved_step_size(4000) == 7


def test_first_adam_step_moves_by_lr():
    params = [np.zeros(4)]
    state = OptimizerState([(4,)])
    adam_step(params, [np.full(4, 0.3)], state, lr=0.01, weight_decay=0.0)
    np.testing.assert_allclose(params[0], -0.01, rtol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_fixed_point_and_decay():
    params = [np.array([1.0, -2.0])]
    state = OptimizerState([(2,)])
    adam_step(params, [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(params[0], [1.0, -2.0])
    adam_step(params, [np.zeros(2)], state, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(params[0], [0.95, -1.9])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(3)], [np.zeros(2)], OptimizerState([(3,)]), 0.1, 0.0)


def test_adam_step_descends_a_quadratic_bowl():
    target = np.array([1.0, -3.0, 0.5])
    params = [np.zeros(3)]
    state = OptimizerState([(3,)])
    before = float(np.sum((params[0] - target) ** 2))
    adam_step(params, [2 * (params[0] - target)], state, lr=0.05, weight_decay=0.0)
    assert float(np.sum((params[0] - target) ** 2)) < before


def test_early_stop_examples():
    best, stale = math.inf, 0
    for loss in (1.0, 0.9, 0.8):
        stop, best, stale = early_stop_update(best, loss, stale, 3)
        assert not stop
    best, stale = math.inf, 0
    stops = []
    for loss in (1.0, 1.1, 1.1, 1.1):
        stop, best, stale = early_stop_update(best, loss, stale, 3)
        stops.append(stop)
    assert stops == [False, False, False, True]
    assert early_stop_update(1.0, 1.0, 0, 1)[0]
    with pytest.raises(ConfigurationError):
        early_stop_update(1.0, 1.0, 0, 0)


def small_split(seed=0, n=96, **overrides):
    fields = {
        "n_samples": n,
        "n_classes": 7,
        "dim": 12,
        "kind": "custom(12)",
        "label_space": "raf7",
    }
    fields.update(overrides)
    ds = synth_generate(SynthSpec(**fields), RngState(seed))
    return split_dataset(ds, n * 3 // 4)


def small_cfg(**overrides) -> TrainConfig:
    fields = {"batch_size": 16, "max_epochs": 3, "max_lr": 1e-3, "hidden_width": 16}
    fields.update(overrides)
    return TrainConfig(**fields)


def test_fit_is_deterministic():
    train, val = small_split()
    cfg = small_cfg()
    runs = []
    for _ in range(2):
        model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
        model, history = fit(model, train, None, cfg, val)
        runs.append((checkpoint_bytes(model, CheckpointMeta()), history))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_fit_keeps_best_validation_epoch():
    train, val = small_split()
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    model, history = fit(model, train, None, small_cfg(max_epochs=5), val)
    best = min(record.val_loss for record in history)
    restored, _ = softmax_cross_entropy(model.predict(val.features), val.labels)
    assert restored == pytest.approx(best, rel=1e-12)
    assert [record.epoch for record in history] == list(range(1, len(history) + 1))


def test_fit_stops_on_constant_validation_loss():
    train, val = small_split()
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)

    class Constant:
        needs_va = False

        def __call__(self, outputs, labels, va, train):
            return 1.0, np.zeros_like(outputs)

    _, history = fit(
        model, train, lambda head, rng: Constant(), small_cfg(max_epochs=20), val
    )
    assert len(history) == 4


def test_fit_rejects_empty_and_short_splits():
    train, val = small_split()
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    with pytest.raises(DataError):
        fit(model, train, None, small_cfg(batch_size=500), val)
    with pytest.raises(DataError):
        fit(model, train.subset([]), None, small_cfg(), val)


def test_fit_needs_va_for_combined_loss():
    train, val = small_split(label_space="affect8", n_classes=8)
    model = build_classifier(12, "affectnet_8_va", RngState(5), hidden_width=16)
    with pytest.raises(DataError):
        fit(model, train, None, small_cfg(), val)


def test_two_stage_swaps_head_and_keeps_trunk_with_zero_epochs():
    train, val = small_split(label_space="affect8", n_classes=8, with_va=True)
    model = build_classifier(12, "affectnet_8_va", RngState(5), hidden_width=16)
    _, history = fit_two_stage_va(
        model,
        train,
        small_cfg(max_epochs=2),
        VaLossConfig(),
        val,
        stage2_cfg=small_cfg(max_epochs=0),
    )
    assert model.head.kind == HeadKind.VA_ONLY_2
    assert model.layer_widths()[-1] == 2
    assert {record.stage for record in history} == {1}


def test_evaluate_split_merges_chunks(monkeypatch):
    _, val = small_split(label_space="affect8", n_classes=8, with_va=True, n=160)
    model = build_classifier(12, "affectnet_8_va", RngState(4), hidden_width=16)
    objective = Stage1Objective([1.0] * 8, VaLossConfig())
    whole_loss, whole = evaluate_split(model, objective, val)
    monkeypatch.setattr(training, "EVAL_CHUNK_ROWS", 7)
    chunked_loss, chunked = evaluate_split(model, objective, val)
    assert chunked_loss == whole_loss
    assert chunked["accuracy"] == whole["accuracy"]

    outputs = model.forward(val.features, "eval")
    assert whole["accuracy"] == np.mean(outputs[:, :8].argmax(axis=1) == val.labels)
    for d, key in enumerate(("ccc_valence", "ccc_arousal")):
        expected = ccc(outputs[:, 8 + d], val.va[:, d]).value
        assert whole[key] == pytest.approx(expected, abs=1e-10)
        assert chunked[key] == pytest.approx(expected, abs=1e-10)


def test_two_stage_trunk_matches_stage_one():
    train, val = small_split(label_space="affect8", n_classes=8, with_va=True)
    stage1_model = build_classifier(12, "affectnet_8_va", RngState(5), hidden_width=16)
    cfg = small_cfg(max_epochs=2)
    fit_two_stage_va(
        stage1_model,
        train,
        cfg,
        VaLossConfig(),
        val,
        stage2_cfg=small_cfg(max_epochs=0),
    )
    reference = build_classifier(12, "affectnet_8_va", RngState(5), hidden_width=16)
    weights = class_weights_from_counts(np.bincount(train.labels, minlength=8))
    fit(
        reference,
        train,
        lambda head, rng: Stage1Objective(weights, VaLossConfig()),
        cfg,
        val,
    )
    for key, value in reference.state_dict().items():
        if key.startswith("trunk"):
            np.testing.assert_array_equal(stage1_model.state_dict()[key], value)


def test_two_stage_requires_va():
    train, val = small_split(label_space="affect8", n_classes=8)
    model = build_classifier(12, "affectnet_8_va", RngState(5), hidden_width=16)
    with pytest.raises(DataError):
        fit_two_stage_va(model, train, small_cfg(), VaLossConfig(), val)


def test_two_stage_requires_affectnet_head():
    train, val = small_split(label_space="affect8", n_classes=8, with_va=True)
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    with pytest.raises(ConfigurationError):
        fit_two_stage_va(model, train, small_cfg(), VaLossConfig(), val)


def test_write_history_jsonl(tmp_path):
    train, val = small_split()
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    _, history = fit(model, train, None, small_cfg(max_epochs=2), val)
    path = tmp_path / "history.jsonl"
    write_history(path, history)
    lines = path.read_text().splitlines()
    assert len(lines) == len(history)
    assert '"epoch": 1' in lines[0]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    train, val = small_split()
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    model, _ = fit(model, train, None, small_cfg(max_epochs=1), val)
    meta = CheckpointMeta(epoch=1, best_val_loss=0.5, seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, meta, path)
    loaded, loaded_meta = read_checkpoint(path)
    assert loaded_meta == meta
    assert checkpoint_bytes(loaded, loaded_meta) == path.read_bytes()
    np.testing.assert_array_equal(
        loaded.forward(val.features, "eval"), model.forward(val.features, "eval")
    )


def test_checkpoint_rejects_bad_magic_truncation_and_version(tmp_path):
    model = build_classifier(12, "raf_db_7", RngState(5), hidden_width=16)
    raw = checkpoint_bytes(model, CheckpointMeta())
    path = tmp_path / "model.ckpt"

    path.write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.details["offset"] == 0

    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)

    bumped = bytearray(raw)
    bumped[len(CHECKPOINT_MAGIC)] = 9
    path.write_bytes(bytes(bumped))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.details["supported_versions"] == [1]


@pytest.mark.slow
def test_learns_separable_clusters():
    data = synth_generate(
        SynthSpec(n_samples=4800, n_classes=8, dim=156, kind="emoca_short"),
        RngState(0),
    )
    train, val = split_dataset(data, 4000)
    model = build_classifier(156, "custom(8)", RngState(1), hidden_width=256)
    model, history = fit(
        model, train, None, TrainConfig(max_epochs=30), val
    )
    assert max(record.val_metrics["accuracy"] for record in history) >= 0.95


@pytest.mark.slow
def test_two_stage_recovers_linear_va():
    data = synth_generate(
        SynthSpec(
            n_samples=3000,
            n_classes=8,
            dim=32,
            kind="custom(32)",
            with_va=True,
            va_noise=0.05,
        ),
        RngState(0),
    )
    train, val = split_dataset(data, 2400)
    model = build_classifier(32, "affectnet_8_va", RngState(1), hidden_width=128)
    cfg = TrainConfig(max_epochs=30, patience=5, base_lr=1e-5, max_lr=1e-3)
    model, _ = fit_two_stage_va(model, train, cfg, VaLossConfig(), val)
    pred = model.predict(val.features)
    assert ccc(pred[:, 0], val.va[:, 0]).value >= 0.9
    assert ccc(pred[:, 1], val.va[:, 1]).value >= 0.9
