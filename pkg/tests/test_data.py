import json
from pathlib import Path
from typing import List, Optional

from fei3d.data import (
    class_frequencies,
    FeatureSet,
    kind_dim,
    load_features,
    load_param_dataset,
    load_predictions,
    ParamDataset,
    predictions_from_outputs,
    PredictionSet,
    save_features,
    save_param_dataset,
    save_predictions,
    split_dataset,
    synth_generate,
)
from fei3d.exception import (
    ConfigurationError,
    DataError,
    FormatError,
    KindError,
    NormalizationError,
    ParseError,
    RangeError,
    SchemaError,
)
from fei3d.models import HeadSpec, SynthSpec
from fei3d.numerics import RngState

import numpy as np
import pytest


def write_dataset_csv(
    path: Path,
    rows: List[List[object]],
    dim: int,
    label_space: str = "affect8",
    kind: Optional[str] = None,
) -> Path:
    header = f"# label_space={label_space}" + (f" kind={kind}" if kind else "")
    columns = ["id", "label", "valence", "arousal"] + [f"p{i:03d}" for i in range(dim)]
    lines = [header, ",".join(columns)]
    lines.extend(",".join(str(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    return path


def row(sample_id: str, label: int, va=("", ""), dim: int = 3, fill: float = 0.5):
    return [sample_id, label, *va, *([fill] * dim)]


def test_kind_dims():
    assert kind_dim("emoca_short") == 156
    assert kind_dim("emoca_full") == 334
    assert kind_dim("smirk_short") == 353
    assert kind_dim("smirk_full") == 358
    assert kind_dim("custom(9)") == 9
    assert kind_dim("custom") is None
    with pytest.raises(ConfigurationError):
        kind_dim("flame")


def test_loads_classification_csv(tmp_path):
    path = write_dataset_csv(
        tmp_path / "raf.csv",
        [row("a", 3), row("b", 6)],
        dim=3,
        label_space="raf7",
    )
    ds = load_param_dataset(path)
    assert ds.kind == "custom(3)"
    assert ds.ids == ["a", "b"]
    assert ds.va is None
    assert ds.labels.tolist() == [3, 6]
    assert ds.features.dtype == np.float64


def test_kind_mismatch_names_both_dimensions(tmp_path):
    path = write_dataset_csv(
        tmp_path / "short.csv",
        [row("a", 0, dim=156)],
        dim=156,
        kind="emoca_short",
    )
    assert load_param_dataset(path, "emoca_short").dim == 156
    with pytest.raises(KindError) as info:
        load_param_dataset(path, "emoca_full")
    assert info.value.details["found"] == 156
    assert info.value.details["expected"] == 334


def test_out_of_range_valence_reports_line(tmp_path):
    path = write_dataset_csv(
        tmp_path / "va.csv",
        [row("a", 0, (0.1, 0.2)), row("b", 1, (1.5, 0.0))],
        dim=3,
    )
    with pytest.raises(RangeError) as info:
        load_param_dataset(path)
    assert info.value.details["line"] == 4


def test_partial_va_is_rejected(tmp_path):
    path = write_dataset_csv(
        tmp_path / "mixed.csv",
        [row("a", 0, (0.1, 0.2)), row("b", 1)],
        dim=3,
    )
    with pytest.raises(DataError) as info:
        load_param_dataset(path)
    assert info.value.details["line"] == 4


def test_non_numeric_parameter_reports_line(tmp_path):
    rows = [row("a", 0), row("b", 1)]
    rows[1][5] = "oops"
    path = write_dataset_csv(tmp_path / "bad.csv", rows, dim=3)
    with pytest.raises(ParseError) as info:
        load_param_dataset(path)
    assert info.value.details["line"] == 4


def test_duplicate_id_reports_line(tmp_path):
    path = write_dataset_csv(
        tmp_path / "dup.csv",
        [row("a", 0), row("b", 1), row("a", 2)],
        dim=3,
    )
    with pytest.raises(DataError) as info:
        load_param_dataset(path)
    assert info.value.details["line"] == 5


def test_label_outside_space(tmp_path):
    path = write_dataset_csv(
        tmp_path / "label.csv", [row("a", 7)], dim=3, label_space="raf7"
    )
    with pytest.raises(RangeError):
        load_param_dataset(path)


def test_missing_header_line(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("id,label,valence,arousal,p000\na,0,,,1.0\n")
    with pytest.raises(SchemaError):
        load_param_dataset(path)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_dataset_save_load_preserves_values(tmp_path, make_synth, suffix):
    ds = make_synth(label_space="affect8", n_classes=8, with_va=True)
    path = tmp_path / f"ds{suffix}"
    save_param_dataset(ds, path)
    loaded = load_param_dataset(path)
    assert loaded.ids == ds.ids
    assert loaded.kind == ds.kind
    np.testing.assert_array_equal(loaded.features, ds.features)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    np.testing.assert_array_equal(loaded.va, ds.va)


def test_truncated_binary_dataset(tmp_path, make_synth):
    path = tmp_path / "ds.bin"
    save_param_dataset(make_synth(), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_param_dataset(path)


def test_dataset_model_invariants():
    with pytest.raises(SchemaError):
        ParamDataset(
            kind="custom",
            label_space="raf7",
            ids=["a", "b"],
            features=np.zeros((3, 2)),
            labels=np.zeros(2, dtype=np.int64),
        )
    with pytest.raises(RangeError):
        ParamDataset(
            kind="custom",
            label_space="raf7",
            ids=["a"],
            features=np.zeros((1, 2)),
            labels=np.zeros(1, dtype=np.int64),
            va=np.array([[0.0, -1.2]]),
        )


def test_class_frequencies(make_synth):
    ds = make_synth(n_samples=21)
    counts = class_frequencies(ds)
    assert counts.tolist() == [3] * 7
    with pytest.raises(DataError):
        class_frequencies(ds.subset([]))


def test_synth_is_deterministic(tmp_path):
    spec = SynthSpec(n_samples=40, dim=10, kind="custom(10)", with_va=True)
    paths = []
    for name in ("one.bin", "two.bin"):
        save_param_dataset(synth_generate(spec, RngState(9)), tmp_path / name)
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_synth_clusters_and_va():
    spec = SynthSpec(
        n_samples=400,
        n_classes=8,
        dim=16,
        kind="custom(16)",
        with_va=True,
        va_noise=0.0,
    )
    ds = synth_generate(spec, RngState(1))
    assert np.bincount(ds.labels).tolist() == [50] * 8
    np.testing.assert_allclose(
        np.linalg.norm(ds.centers, axis=1), spec.separation, rtol=1e-12
    )
    assert np.all(np.abs(ds.va) <= 1.0)
    linear = ds.features @ ds.va_weights + ds.va_bias
    inside = (np.abs(linear) < 1.0).all(axis=1)
    np.testing.assert_allclose(ds.va[inside], linear[inside], rtol=0, atol=1e-12)


def test_synth_kind_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        synth_generate(SynthSpec(n_samples=4, dim=10, kind="emoca_short"), RngState(0))


def test_split_dataset(make_synth):
    first, second = split_dataset(make_synth(n_samples=10), 7)
    assert len(first) == 7 and len(second) == 3
    with pytest.raises(ConfigurationError):
        split_dataset(first, 7)


def test_load_predictions_csv_and_logits(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text(
        "id,p0,p1,valence,arousal\na,0.25,0.75,0.1,-0.2\nb,1.0,0.0,0.0,0.3\n",
    )
    preds = load_predictions(path)
    assert preds.source == "preds"
    np.testing.assert_array_equal(preds.probs, [[0.25, 0.75], [1.0, 0.0]])
    np.testing.assert_array_equal(preds.va, [[0.1, -0.2], [0.0, 0.3]])

    logits = tmp_path / "logits.csv"
    logits.write_text("id,p0,p1\na,2.0,0.0\n")
    with pytest.raises(NormalizationError) as info:
        load_predictions(logits)
    assert "--from-logits" in info.value.message
    softened = load_predictions(logits, from_logits=True)
    expected = [1 / (1 + np.exp(-2)), 1 / (1 + np.exp(2))]
    np.testing.assert_allclose(softened.probs[0], expected)


def test_load_predictions_jsonl(tmp_path):
    path = tmp_path / "preds.jsonl"
    records = [
        {"id": "a", "probs": [0.5, 0.5], "valence": 0.1, "arousal": 0.2},
        {"id": "b", "probs": [0.1, 0.9], "valence": -0.4, "arousal": 0.0},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    preds = load_predictions(path, source="2d")
    assert preds.source == "2d"
    assert preds.ids == ["a", "b"]
    np.testing.assert_array_equal(preds.va, [[0.1, 0.2], [-0.4, 0.0]])

    path.write_text('{"id": "a", "probs": "nope"}\n')
    with pytest.raises(ParseError) as info:
        load_predictions(path)
    assert info.value.details["line"] == 1


@pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
def test_predictions_save_load(tmp_path, suffix):
    preds = PredictionSet(
        source="p",
        ids=["x", "y"],
        probs=np.array([[0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]]),
        va=np.array([[0.5, -0.5], [0.0, 1.0]]),
    )
    path = tmp_path / f"p{suffix}"
    save_predictions(preds, path)
    loaded = load_predictions(path, source="p")
    np.testing.assert_array_equal(loaded.probs, preds.probs)
    np.testing.assert_array_equal(loaded.va, preds.va)


def test_prediction_set_needs_a_payload():
    with pytest.raises(SchemaError):
        PredictionSet(source="p", ids=["a"])


def test_prediction_rows_within_tolerance_are_renormalized():
    probs = np.array([[0.1234567, 0.8765432], [0.25, 0.75]])
    preds = PredictionSet(source="p", ids=["a", "b"], probs=probs)
    assert abs(preds.probs[0].sum() - 1.0) <= 1e-12
    np.testing.assert_array_equal(preds.probs[1], [0.25, 0.75])
    np.testing.assert_array_equal(probs[0], [0.1234567, 0.8765432])


@pytest.mark.parametrize("bad", [np.inf, -np.inf, np.nan, -0.1])
def test_invalid_probability_reports_row(bad):
    probs = np.array([[0.5, 0.5], [bad, 0.0]])
    with pytest.raises(NormalizationError) as info:
        PredictionSet(source="p", ids=["a", "b"], probs=probs)
    assert info.value.details["index"] == 1


def test_predictions_from_outputs_splits_head():
    outputs = np.zeros((2, 10))
    outputs[:, 8] = [2.0, -3.0]
    head = HeadSpec.parse("affectnet_8_va")
    preds = predictions_from_outputs(["a", "b"], outputs, head, "3d")
    np.testing.assert_allclose(preds.probs, np.full((2, 8), 1 / 8))
    np.testing.assert_array_equal(preds.va, [[1.0, 0.0], [-1.0, 0.0]])


def test_features_save_load(tmp_path):
    features = np.array([[0.5, 1.25], [-2.0, 3.0]])
    fs = FeatureSet(source="2d", ids=["a", "b"], features=features)
    path = tmp_path / "feat.csv"
    save_features(fs, path)
    assert path.read_text().splitlines()[0] == "id,f000,f001"
    loaded = load_features(path)
    np.testing.assert_array_equal(loaded.features, fs.features)
    path.write_text("id,x0\na,1.0\n")
    with pytest.raises(SchemaError):
        load_features(path)
