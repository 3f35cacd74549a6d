"""参数数据集、预测文件与特征文件的读写和校验

CSV 数据集格式::

    # label_space=affect8 kind=emoca_short
    id,label,valence,arousal,p000,p001,...

分类数据集(如 RAF-DB)的 valence / arousal 列留空。
"""
from pathlib import Path
import re
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

from .exception import (
    AlignmentError,
    ConfigurationError,
    DataError,
    KindError,
    NormalizationError,
    ParseError,
    RangeError,
    SchemaError,
    WriteError,
)
from .log import logger
from .losses import softmax
from .models import HeadSpec, SynthSpec
from .numerics import RngState
from .utils import read_envelope, write_envelope

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, root_validator, ValidationError

PARAM_DIMS: Dict[str, int] = {
    "emoca_short": 156,
    "emoca_full": 334,
    "smirk_short": 353,
    "smirk_full": 358,
}
"""各参数分组的维度"""

LABEL_SPACES: Dict[str, List[str]] = {
    "raf7": [
        "surprise",
        "fear",
        "disgust",
        "happiness",
        "sadness",
        "anger",
        "neutral",
    ],
    "affect8": [
        "neutral",
        "happy",
        "sad",
        "surprise",
        "fear",
        "disgust",
        "anger",
        "contempt",
    ],
}

LabelSpace = Literal["raf7", "affect8"]

DATASET_MAGIC = b"FEIDS"
DATASET_VERSION = 1
PROB_TOLERANCE = 1e-6
PROB_ATOL = 1e-9
_CUSTOM_KIND = re.compile(r"^custom(?:\((\d+)\))?$")
_HEADER_FIELD = re.compile(r"(\w+)=(\S+)")


def kind_dim(kind: str) -> Optional[int]:
    """参数分组对应的维度，`custom` 不限定维度时返回 None"""
    if kind in PARAM_DIMS:
        return PARAM_DIMS[kind]
    if match := _CUSTOM_KIND.match(kind):
        return int(match.group(1)) if match.group(1) else None
    raise ConfigurationError(
        f"unknown parameter kind {kind!r}",
        known=[*PARAM_DIMS, "custom(d)"],
    )


class ParamDataset(BaseModel):
    """3D 参数向量、类别标签与可选 VA 目标"""

    kind: str
    label_space: LabelSpace
    ids: List[str]
    features: np.ndarray
    labels: np.ndarray
    va: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_invariants(cls, values):
        features, labels, va = values["features"], values["labels"], values["va"]
        ids, kind = values["ids"], values["kind"]
        if features.ndim != 2 or features.shape[0] != len(ids):
            raise SchemaError(
                f"features of shape {features.shape} do not match {len(ids)} ids",
            )
        expected = kind_dim(kind)
        if expected is not None and features.shape[1] != expected:
            raise KindError(
                f"{kind} vectors have {expected} dimensions, found {features.shape[1]}",
                found=features.shape[1],
                expected=expected,
            )
        if labels.shape != (len(ids),):
            raise SchemaError(f"expected {len(ids)} labels, got {labels.shape}")
        n_classes = len(LABEL_SPACES[values["label_space"]])
        if bad := np.flatnonzero((labels < 0) | (labels >= n_classes)).tolist():
            raise RangeError(
                f"label {labels[bad[0]]} outside {values['label_space']}",
                index=bad[0],
            )
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0][0])
            raise DataError("non-finite parameter value", index=row)
        if va is not None:
            if va.shape != (len(ids), 2):
                raise SchemaError(f"VA targets must be ({len(ids)}, 2), got {va.shape}")
            if bad := np.flatnonzero(~(np.abs(va) <= 1.0).all(axis=1)).tolist():
                raise RangeError(
                    f"valence/arousal {va[bad[0]].tolist()} outside [-1, 1]",
                    index=bad[0],
                )
        _check_unique(ids)
        values["features"] = np.asarray(features, dtype=np.float64)
        values["labels"] = np.asarray(labels, dtype=np.int64)
        return values

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(LABEL_SPACES[self.label_space])

    def subset(self, rows: Sequence[int]) -> "ParamDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return ParamDataset(
            kind=self.kind,
            label_space=self.label_space,
            ids=[self.ids[i] for i in rows],
            features=self.features[rows],
            labels=self.labels[rows],
            va=None if self.va is None else self.va[rows],
        )


class SyntheticDataset(ParamDataset):
    """合成数据集，额外携带生成它的类中心与 VA 线性映射"""

    centers: np.ndarray
    va_weights: Optional[np.ndarray] = None
    va_bias: Optional[np.ndarray] = None


def _check_unique(ids: Sequence[str]) -> None:
    seen: Dict[str, int] = {}
    for i, sample_id in enumerate(ids):
        if sample_id in seen:
            raise DataError(
                f"duplicate id {sample_id!r} (first at row {seen[sample_id]})",
                index=i,
            )
        seen[sample_id] = i


def _parse_floats(
    column: pd.Series,
    name: str,
    first_line: int,
    allow_empty: bool = False,
) -> np.ndarray:
    """字符串列转 float64，空值为 NaN；失败时报告行号"""
    raw = column.to_numpy(dtype=object)
    empty = np.array([str(v).strip() == "" for v in raw], dtype=bool)
    if empty.any() and not allow_empty:
        row = int(np.flatnonzero(empty)[0])
        raise ParseError(f"empty {name}", line=first_line + row, index=row)
    out = np.full(raw.shape[0], np.nan)
    for row in np.flatnonzero(~empty):
        try:
            out[row] = float(raw[row])
        except ValueError as e:
            raise ParseError(
                f"{name} value {raw[row]!r} is not a number",
                line=first_line + int(row),
                index=int(row),
            ) from e
    if not np.all(np.isfinite(out[~empty])):
        row = int(np.flatnonzero(~empty & ~np.isfinite(out))[0])
        raise ParseError(f"non-finite {name}", line=first_line + row, index=row)
    return out


def _read_csv(path: Path, skiprows: int = 0) -> pd.DataFrame:
    try:
        return pd.read_csv(
            path,
            skiprows=skiprows,
            dtype=str,
            keep_default_na=False,
        )
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed CSV {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{path} has no header") from e


def _read_header_line(path: Path) -> Dict[str, str]:
    with path.open() as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        raise SchemaError(
            f"{path} must start with a '# label_space=...' header line",
            line=1,
        )
    return dict(_HEADER_FIELD.findall(first))


def load_param_dataset(
    path: Union[str, Path],
    expected_kind: Optional[str] = None,
) -> ParamDataset:
    """读取并完整校验参数数据集(CSV 或二进制)

    参数:
        path: 文件路径
        expected_kind: 期望的参数分组，如 `emoca_short`；为 None 时沿用文件声明

    返回:
        ParamDataset: 校验通过的数据集
    """
    path = Path(path)
    with path.open("rb") as f:
        is_binary = f.read(len(DATASET_MAGIC)) == DATASET_MAGIC
    ds = _load_binary(path) if is_binary else _load_csv(path, expected_kind)
    if expected_kind is not None and ds.kind != expected_kind:
        found_dim = ds.dim
        expected_dim = kind_dim(expected_kind)
        if expected_dim is not None and expected_dim != found_dim:
            raise KindError(
                f"{path} holds {found_dim}-dimensional vectors, "
                f"{expected_kind} expects {expected_dim}",
                found=found_dim,
                expected=expected_dim,
            )
        ds = ParamDataset(**{**ds.__dict__, "kind": expected_kind})
    logger.debug(
        f"Loaded {len(ds)} samples of {ds.kind} ({ds.dim} dims, {ds.label_space})"
        f"{' with VA' if ds.va is not None else ''} from {path}",
    )
    return ds


def _load_csv(path: Path, expected_kind: Optional[str]) -> ParamDataset:
    header = _read_header_line(path)
    label_space = header.get("label_space")
    if label_space not in LABEL_SPACES:
        raise SchemaError(
            f"header declares unknown label_space {label_space!r}",
            line=1,
            known=list(LABEL_SPACES),
        )
    frame = _read_csv(path, skiprows=1)
    columns = list(frame.columns)
    if columns[:4] != ["id", "label", "valence", "arousal"]:
        raise SchemaError(
            f"columns must start with id,label,valence,arousal, got {columns[:4]}",
            line=2,
        )
    params = columns[4:]
    width = max(3, len(str(len(params) - 1))) if params else 3
    if params != [f"p{i:0{width}d}" for i in range(len(params))]:
        raise SchemaError("parameter columns must be p000..p{d-1} in order", line=2)
    found = len(params)
    kind = expected_kind or header.get("kind") or f"custom({found})"
    expected = kind_dim(kind)
    if expected is not None and expected != found:
        raise KindError(
            f"{path} has {found} parameter columns, {kind} expects {expected}",
            found=found,
            expected=expected,
        )

    first_line = 3
    labels = _parse_floats(frame["label"], "label", first_line)
    if bad := np.flatnonzero(labels != np.round(labels)).tolist():
        raise ParseError(
            f"label {labels[bad[0]]} is not an integer",
            line=first_line + bad[0],
            index=bad[0],
        )
    valence = _parse_floats(frame["valence"], "valence", first_line, allow_empty=True)
    arousal = _parse_floats(frame["arousal"], "arousal", first_line, allow_empty=True)
    va = np.stack([valence, arousal], axis=1)
    missing = np.isnan(va)
    if missing.all():
        va = None
    elif missing.any():
        row = int(np.flatnonzero(missing.any(axis=1))[0])
        raise DataError(
            "valence/arousal must be given for every row or for none",
            line=first_line + row,
            index=row,
        )
    else:
        if bad := np.flatnonzero(~(np.abs(va) <= 1.0).all(axis=1)).tolist():
            raise RangeError(
                f"valence/arousal {va[bad[0]].tolist()} outside [-1, 1]",
                line=first_line + bad[0],
                index=bad[0],
            )
    features = np.empty((len(frame), found))
    for j, name in enumerate(params):
        features[:, j] = _parse_floats(frame[name], name, first_line)
    ids = frame["id"].tolist()
    try:
        _check_unique(ids)
    except DataError as e:
        e.details["line"] = first_line + e.details["index"]
        raise
    return ParamDataset(
        kind=kind,
        label_space=label_space,
        ids=ids,
        features=features,
        labels=labels.astype(np.int64),
        va=va,
    )


def _load_binary(path: Path) -> ParamDataset:
    _, header, blocks = read_envelope(
        path.read_bytes(),
        DATASET_MAGIC,
        (DATASET_VERSION,),
    )
    return ParamDataset(
        kind=header["kind"],
        label_space=header["label_space"],
        ids=header["ids"],
        features=blocks["features"],
        labels=blocks["labels"],
        va=blocks.get("va"),
    )


def _fmt(value: float) -> str:
    return repr(float(value))


def save_param_dataset(ds: ParamDataset, path: Union[str, Path]) -> None:
    """保存数据集，`.bin` 后缀写二进制，其余写 CSV"""
    path = Path(path)
    try:
        if path.suffix == ".bin":
            blocks = [("labels", ds.labels), ("features", ds.features)]
            if ds.va is not None:
                blocks.append(("va", ds.va))
            header = {
                "kind": ds.kind,
                "label_space": ds.label_space,
                "ids": ds.ids,
            }
            path.write_bytes(
                write_envelope(DATASET_MAGIC, DATASET_VERSION, header, blocks),
            )
            return
        width = max(3, len(str(ds.dim - 1)))
        frame = pd.DataFrame(
            [[_fmt(v) for v in row] for row in ds.features],
            columns=[f"p{i:0{width}d}" for i in range(ds.dim)],
        )
        frame.insert(0, "id", ds.ids)
        frame.insert(1, "label", ds.labels.tolist())
        frame.insert(
            2,
            "valence",
            [""] * len(ds) if ds.va is None else [_fmt(v) for v in ds.va[:, 0]],
        )
        frame.insert(
            3,
            "arousal",
            [""] * len(ds) if ds.va is None else [_fmt(v) for v in ds.va[:, 1]],
        )
        with path.open("w", newline="") as f:
            f.write(f"# label_space={ds.label_space} kind={ds.kind}\n")
            frame.to_csv(f, index=False, lineterminator="\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


def class_frequencies(ds: ParamDataset) -> np.ndarray:
    """按标签空间顺序统计每类样本数"""
    if len(ds) == 0:
        raise DataError("cannot count classes of an empty dataset")
    return np.bincount(ds.labels, minlength=ds.n_classes)


class PredictionSet(BaseModel):
    """某个模型对每个样本输出的类别概率和/或 VA"""

    source: str
    ids: List[str]
    probs: Optional[np.ndarray] = None
    va: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_payloads(cls, values):
        probs, va, n = values.get("probs"), values.get("va"), len(values["ids"])
        if probs is None and va is None:
            raise SchemaError("prediction set carries neither probabilities nor VA")
        if probs is not None:
            if probs.ndim != 2 or probs.shape[0] != n:
                raise SchemaError(f"probabilities of shape {probs.shape} for {n} ids")
            valid = (probs >= 0) & np.isfinite(probs)
            if not valid.all():
                row = int(np.flatnonzero(~valid.all(axis=1))[0])
                raise NormalizationError(
                    "negative or non-finite probability",
                    index=row,
                )
            sums = probs.sum(axis=1)
            if bad := np.flatnonzero(np.abs(sums - 1.0) > PROB_TOLERANCE).tolist():
                raise NormalizationError(
                    f"probability row sums to {sums[bad[0]]:.8f}; "
                    "pass logits with --from-logits",
                    index=bad[0],
                )
            # 融合按 PROB_ATOL 校验行和，超出的行在这里重新归一化
            if (drift := np.abs(sums - 1.0) > PROB_ATOL).any():
                probs = probs.copy()
                probs[drift] /= sums[drift, None]
                values["probs"] = probs
        if va is not None:
            if va.shape != (n, 2):
                raise SchemaError(f"VA predictions must be ({n}, 2), got {va.shape}")
            if not np.all(np.isfinite(va)):
                raise DataError("non-finite VA prediction")
        _check_unique(values["ids"])
        return values

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return 0 if self.probs is None else self.probs.shape[1]

    def subset(self, rows: Sequence[int]) -> "PredictionSet":
        rows = np.asarray(rows, dtype=np.int64)
        return PredictionSet(
            source=self.source,
            ids=[self.ids[i] for i in rows],
            probs=None if self.probs is None else self.probs[rows],
            va=None if self.va is None else self.va[rows],
        )


class PredictionRecord(BaseModel):
    """JSON-lines 预测文件中的一行"""

    id: str
    probs: Optional[List[float]] = None
    logits: Optional[List[float]] = None
    valence: Optional[float] = None
    arousal: Optional[float] = None


def load_predictions(
    path: Union[str, Path],
    from_logits: bool = False,
    source: Optional[str] = None,
) -> PredictionSet:
    """读取外部模型的预测

    CSV 格式为 `id,p0..p{C-1}[,valence,arousal]`，`.jsonl` 为逐行 JSON。

    参数:
        path: 文件路径
        from_logits: 文件中是 logits，读取后做 softmax
        source: 来源标记，默认为文件名

    返回:
        PredictionSet: 校验后的预测
    """
    path = Path(path)
    source = source or path.stem
    if path.suffix in (".jsonl", ".json"):
        ids, rows, va_rows = [], [], []
        for line_no, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = PredictionRecord.parse_raw(line)
            except ValidationError as e:
                raise ParseError(f"invalid prediction record: {e}", line=line_no) from e
            ids.append(record.id)
            rows.append(record.logits if from_logits else record.probs)
            va_rows.append(
                None
                if record.valence is None or record.arousal is None
                else [record.valence, record.arousal],
            )
        scores = None if all(r is None for r in rows) else _stack(rows, "scores")
        va = None if all(r is None for r in va_rows) else _stack(va_rows, "VA")
    else:
        frame = _read_csv(path)
        columns = list(frame.columns)
        if not columns or columns[0] != "id":
            raise SchemaError(f"{path} must start with an id column", line=1)
        score_cols = [c for c in columns[1:] if re.fullmatch(r"p\d+", c)]
        if score_cols != [f"p{i}" for i in range(len(score_cols))]:
            raise SchemaError("score columns must be p0..p{C-1} in order", line=1)
        has_va = "valence" in columns and "arousal" in columns
        extra = set(columns[1:]) - set(score_cols) - {"valence", "arousal"}
        if extra:
            raise SchemaError(f"unexpected prediction columns {sorted(extra)}", line=1)
        ids = frame["id"].tolist()
        scores = (
            np.stack([_parse_floats(frame[c], c, 2) for c in score_cols], axis=1)
            if score_cols
            else None
        )
        va = (
            np.stack(
                [_parse_floats(frame[c], c, 2) for c in ("valence", "arousal")],
                axis=1,
            )
            if has_va
            else None
        )
    probs = None
    if scores is not None:
        probs = softmax(scores) if from_logits else scores
    preds = PredictionSet(source=source, ids=ids, probs=probs, va=va)
    logger.debug(
        f"Loaded {len(preds)} predictions from {path} "
        f"(classes={preds.n_classes}, va={preds.va is not None})",
    )
    return preds


def _stack(rows: List[Optional[List[float]]], name: str) -> np.ndarray:
    if bad := [i for i, r in enumerate(rows) if r is None]:
        raise SchemaError(f"{name} missing for some records", index=bad[0])
    try:
        return np.asarray(rows, dtype=np.float64)
    except ValueError as e:
        raise SchemaError(f"{name} rows have different lengths") from e


def save_predictions(preds: PredictionSet, path: Union[str, Path]) -> None:
    """保存预测，`.jsonl` 后缀写逐行 JSON，其余写 CSV"""
    path = Path(path)
    try:
        if path.suffix in (".jsonl", ".json"):
            lines = []
            for i, sample_id in enumerate(preds.ids):
                record = PredictionRecord(
                    id=sample_id,
                    probs=None if preds.probs is None else preds.probs[i].tolist(),
                    valence=None if preds.va is None else float(preds.va[i, 0]),
                    arousal=None if preds.va is None else float(preds.va[i, 1]),
                )
                lines.append(record.json(exclude_none=True))
            path.write_text("".join(line + "\n" for line in lines))
            return
        frame = pd.DataFrame({"id": preds.ids})
        for c in range(preds.n_classes):
            frame[f"p{c}"] = [_fmt(v) for v in preds.probs[:, c]]  # type: ignore
        if preds.va is not None:
            frame["valence"] = [_fmt(v) for v in preds.va[:, 0]]
            frame["arousal"] = [_fmt(v) for v in preds.va[:, 1]]
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


def predictions_from_outputs(
    ids: Sequence[str],
    outputs: np.ndarray,
    head: HeadSpec,
    source: str,
) -> PredictionSet:
    """模型原始输出转为预测: 类别 logits 做 softmax，VA 截断到 [-1, 1]"""
    c = head.n_classes
    return PredictionSet(
        source=source,
        ids=list(ids),
        probs=softmax(outputs[:, :c]) if c else None,
        va=np.clip(outputs[:, c : c + 2], -1.0, 1.0) if head.has_va else None,
    )


class Alignment(BaseModel):
    """按 id 内连接的结果"""

    left: List[int]
    right: List[int]
    ids: List[str]
    dropped: Dict[str, int] = Field(default_factory=dict)


def align(a: Sequence[str], b: Sequence[str]) -> Alignment:
    """按 id 内连接两个序列，保持 a 的顺序

    返回:
        Alignment: 成对下标与两侧丢弃的 id 数
    """
    b_index = {sample_id: j for j, sample_id in enumerate(b)}
    left, right, ids = [], [], []
    for i, sample_id in enumerate(a):
        j = b_index.get(sample_id)
        if j is not None:
            left.append(i)
            right.append(j)
            ids.append(sample_id)
    if not ids:
        raise AlignmentError("the two id sets do not intersect")
    dropped = {"a": len(a) - len(ids), "b": len(b) - len(ids)}
    if dropped["a"] or dropped["b"]:
        logger.warning(
            f"Alignment dropped {dropped['a']} unmatched ids from a "
            f"and {dropped['b']} from b",
        )
    return Alignment(left=left, right=right, ids=ids, dropped=dropped)


class FeatureSet(BaseModel):
    """中间融合使用的特征记录，`id,f000..` CSV"""

    source: str
    ids: List[str]
    features: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_shape(cls, values):
        features = values["features"]
        if features.ndim != 2 or features.shape[0] != len(values["ids"]):
            raise SchemaError(
                f"features of shape {features.shape} for {len(values['ids'])} ids",
            )
        _check_unique(values["ids"])
        return values

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def load_features(path: Union[str, Path], source: str = "2d") -> FeatureSet:
    path = Path(path)
    frame = _read_csv(path)
    columns = list(frame.columns)
    if not columns or columns[0] != "id":
        raise SchemaError(f"{path} must start with an id column", line=1)
    names = columns[1:]
    width = max(3, len(str(len(names) - 1))) if names else 3
    if not names or names != [f"f{i:0{width}d}" for i in range(len(names))]:
        raise SchemaError("feature columns must be f000..f{d-1} in order", line=1)
    features = np.stack([_parse_floats(frame[c], c, 2) for c in names], axis=1)
    return FeatureSet(source=source, ids=frame["id"].tolist(), features=features)


def save_features(fs: FeatureSet, path: Union[str, Path]) -> None:
    width = max(3, len(str(fs.dim - 1)))
    frame = pd.DataFrame(
        [[_fmt(v) for v in row] for row in fs.features],
        columns=[f"f{i:0{width}d}" for i in range(fs.dim)],
    )
    frame.insert(0, "id", fs.ids)
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


def synth_generate(spec: SynthSpec, rng: RngState) -> SyntheticDataset:
    """生成高斯类簇与线性 VA 目标

    类中心两两正交，到原点距离为 `spec.separation`；VA = X·W + b + 噪声，截断到 [-1, 1]。

    参数:
        spec: 合成参数
        rng: 随机数状态

    返回:
        SyntheticDataset: 数据集及其生成参数
    """
    kind_rng, label_rng, noise_rng, va_rng = rng.split(4)
    basis, _ = np.linalg.qr(kind_rng.normal(size=(spec.dim, spec.n_classes)))
    centers = spec.separation * basis.T
    labels = label_rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    features = centers[labels] + spec.noise * noise_rng.normal(
        size=(spec.n_samples, spec.dim),
    )
    va = weights = bias = None
    if spec.with_va:
        directions = va_rng.normal(size=(spec.dim, 2))
        directions /= np.linalg.norm(directions, axis=0)
        projected = features @ directions
        scale = spec.va_scale / np.maximum(projected.std(axis=0), 1e-12)
        weights = directions * scale
        bias = -projected.mean(axis=0) * scale
        va = features @ weights + bias
        if spec.va_noise:
            va = va + spec.va_noise * va_rng.normal(size=va.shape)
        va = np.clip(va, -1.0, 1.0)
    width = len(str(spec.n_samples - 1))
    try:
        return SyntheticDataset(
            kind=spec.kind,
            label_space=spec.label_space,
            ids=[f"{spec.id_prefix}{i:0{width}d}" for i in range(spec.n_samples)],
            features=features,
            labels=labels.astype(np.int64),
            va=va,
            centers=centers,
            va_weights=weights,
            va_bias=bias,
        )
    except KindError as e:
        raise ConfigurationError(f"invalid synthetic spec: {e.message}") from e


def split_dataset(ds: ParamDataset, n_first: int) -> Tuple[ParamDataset, ParamDataset]:
    """按行序切成两份(合成数据生成训练/验证文件时使用)"""
    if not 0 < n_first < len(ds):
        raise ConfigurationError(f"cannot split {len(ds)} rows at {n_first}")
    return ds.subset(range(n_first)), ds.subset(range(n_first, len(ds)))
