"""2D 与 3D 表示的融合

中间融合: 3D 特征经线性投影后与 2D 特征拼接，送入与 3D 分类器相同结构的 MLP。
后期融合: 两个独立模型输出的概率或 VA 按 max / min / mean / weighted 组合。
"""
from typing import List, Literal, Optional, Sequence, Tuple

from .data import align, FeatureSet, ParamDataset, PredictionSet, PROB_ATOL
from .exception import (
    AlignmentError,
    ConfigurationError,
    NormalizationError,
    RangeError,
    SchemaError,
    ShapeError,
)
from .log import logger
from .losses import ccc
from .metrics import classification_report
from .models import (
    FusionStrategy,
    HeadSpec,
    IntermediateArchitecture,
    SweepPoint,
    SweepResult,
)
from .nn import DEFAULT_HIDDEN_WIDTH, Layer, LinearLayer, MlpModel, Model
from .numerics import DEFAULT_LEAKY_SLOPE, RngState
from .typing import Matrix, Mode

import numpy as np

DEFAULT_PROJ_DIM = 256

SweepObjective = Literal["accuracy", "f1_macro", "ccc", "rmse"]
_MINIMIZED = {"rmse"}


class IntermediateFusionModel(Model):
    """[2D 特征 | 3D 特征] → [2D 特征 | proj(3D 特征)] → MLP

    输入按列拼接，前 dim_2d 列为 2D 特征。
    """

    def __init__(
        self,
        dim_2d: int,
        dim_3d: int,
        head: HeadSpec,
        rng: RngState,
        proj_dim: int = DEFAULT_PROJ_DIM,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH,
        negative_slope: float = DEFAULT_LEAKY_SLOPE,
        **classifier_kwargs,
    ):
        super().__init__()
        if min(dim_2d, dim_3d, proj_dim) < 1:
            raise ConfigurationError(
                f"fusion dimensions must be positive, got 2d={dim_2d}, "
                f"3d={dim_3d}, proj={proj_dim}",
            )
        proj_rng, classifier_rng = rng.split(2)
        self.dim_2d = dim_2d
        self.dim_3d = dim_3d
        self.proj_dim = proj_dim
        self.input_dim = dim_2d + dim_3d
        self.projection = LinearLayer(dim_3d, proj_dim, proj_rng, negative_slope)
        self.classifier = MlpModel(
            dim_2d + proj_dim,
            head,
            classifier_rng,
            hidden_width=hidden_width,
            negative_slope=negative_slope,
            **classifier_kwargs,
        )

    @property
    def head(self) -> HeadSpec:  # type: ignore[override]
        return self.classifier.head

    def named_layers(self) -> List[Tuple[str, Layer]]:
        return [
            ("projection", self.projection),
            *(
                (f"classifier.{name}", layer)
                for name, layer in self.classifier.named_layers()
            ),
        ]

    def _forward_layers(self, batch: Matrix, train: bool) -> Matrix:
        projected = self.projection.forward(batch[:, self.dim_2d :], train)
        joined = np.concatenate([batch[:, : self.dim_2d], projected], axis=1)
        return self.classifier._forward_layers(joined, train)

    def _backward_layers(self, grad_output: Matrix) -> Matrix:
        grad_joined = self.classifier._backward_layers(grad_output)
        grad_3d = self.projection.backward(grad_joined[:, self.dim_2d :])
        return np.concatenate([grad_joined[:, : self.dim_2d], grad_3d], axis=1)

    def replace_head(self, head: HeadSpec, rng: RngState) -> None:
        self.classifier.replace_head(head, rng)
        self._cached = False

    def architecture(self) -> IntermediateArchitecture:
        return IntermediateArchitecture(
            dim_2d=self.dim_2d,
            dim_3d=self.dim_3d,
            proj_dim=self.proj_dim,
            classifier=self.classifier.architecture(),
        )

    @classmethod
    def from_architecture(
        cls,
        arch: IntermediateArchitecture,
        rng: RngState,
    ) -> "IntermediateFusionModel":
        inner = arch.classifier
        if inner.input_dim != arch.dim_2d + arch.proj_dim:
            raise ConfigurationError(
                f"classifier input {inner.input_dim} differs from "
                f"{arch.dim_2d} + {arch.proj_dim}",
            )
        return cls(
            arch.dim_2d,
            arch.dim_3d,
            HeadSpec.parse(inner.head),
            rng,
            proj_dim=arch.proj_dim,
            hidden_width=inner.hidden_width,
            negative_slope=inner.negative_slope,
            dropout=inner.dropout,
            batch_norm=inner.batch_norm,
            bn_eps=inner.bn_eps,
            bn_momentum=inner.bn_momentum,
        )

    def __repr__(self) -> str:
        return (
            f"IntermediateFusionModel(2d={self.dim_2d}, "
            f"3d={self.dim_3d}→{self.proj_dim}, {self.classifier!r})"
        )


def intermediate_forward(
    fm: IntermediateFusionModel,
    feat2d: Matrix,
    feat3d: Matrix,
    mode: Mode = "eval",
    ids2d: Optional[Sequence[str]] = None,
    ids3d: Optional[Sequence[str]] = None,
) -> Matrix:
    """拼接两路特征后前向传播

    参数:
        fm: 中间融合模型
        feat2d: (N × dim_2d) 2D 图像特征
        feat3d: (N × dim_3d) 3D 参数
        mode: "train" 或 "eval"
        ids2d: 2D 行的样本 id，给出时必须与 ids3d 逐行一致
        ids3d: 3D 行的样本 id

    返回:
        Matrix: 模型输出
    """
    if feat2d.shape[0] != feat3d.shape[0]:
        raise AlignmentError(
            f"2D features have {feat2d.shape[0]} rows, 3D have {feat3d.shape[0]}",
        )
    if ids2d is not None and ids3d is not None:
        if len(ids2d) != len(ids3d):
            raise AlignmentError(f"{len(ids2d)} 2D ids against {len(ids3d)} 3D ids")
        for i, (a, b) in enumerate(zip(ids2d, ids3d)):
            if a != b:
                raise AlignmentError(
                    f"row {i} pairs 2D id {a!r} with 3D id {b!r}",
                    index=i,
                    id=a,
                )
    if feat2d.shape[1] != fm.dim_2d or feat3d.shape[1] != fm.dim_3d:
        raise ShapeError(
            f"expected {fm.dim_2d} + {fm.dim_3d} feature columns, "
            f"got {feat2d.shape[1]} + {feat3d.shape[1]}",
        )
    return fm.forward(np.concatenate([feat2d, feat3d], axis=1), mode)


def fusion_dataset(features_2d: FeatureSet, params_3d: ParamDataset) -> ParamDataset:
    """按 id 内连接 2D 特征与 3D 参数数据集，列为 [2D | 3D]"""
    pairs = align(params_3d.ids, features_2d.ids)
    joined = np.concatenate(
        [features_2d.features[pairs.right], params_3d.features[pairs.left]],
        axis=1,
    )
    return ParamDataset(
        kind=f"custom({joined.shape[1]})",
        label_space=params_3d.label_space,
        ids=pairs.ids,
        features=joined,
        labels=params_3d.labels[pairs.left],
        va=None if params_3d.va is None else params_3d.va[pairs.left],
    )


def _check_probabilities(name: str, probs: Matrix) -> None:
    if np.any(probs < 0):
        row = int(np.flatnonzero((probs < 0).any(axis=1))[0])
        raise NormalizationError(f"{name} has negative probabilities", index=row)
    sums = probs.sum(axis=1)
    if bad := np.flatnonzero(~(np.abs(sums - 1.0) <= PROB_ATOL)).tolist():
        raise NormalizationError(
            f"{name} row {bad[0]} sums to {sums[bad[0]]!r}; "
            "late fusion takes probabilities, not logits",
            index=bad[0],
        )


def _weighted(a: Matrix, b: Matrix, w: float) -> Matrix:
    if w == 0.0:
        return a.copy()
    if w == 1.0:
        return b.copy()
    return (1.0 - w) * a + w * b


def late_fuse_class(p2d: Matrix, p3d: Matrix, s: FusionStrategy) -> Matrix:
    """融合两组类别概率

    max / min 取逐元素极值后重新归一化；某行极值全为 0 时该行退化为均值。

    参数:
        p2d: (N × C) 2D 模型概率
        p3d: (N × C) 3D 模型概率，与 p2d 逐行对齐
        s: 融合策略

    返回:
        Matrix: (N × C) 融合后的概率
    """
    if p2d.shape != p3d.shape or p2d.ndim != 2:
        raise ShapeError(f"probability shapes differ: {p2d.shape} vs {p3d.shape}")
    _check_probabilities("2D probabilities", p2d)
    _check_probabilities("3D probabilities", p3d)
    if s.kind == "mean":
        return (p2d + p3d) / 2.0
    if s.kind == "weighted":
        return _weighted(p2d, p3d, s.w)  # type: ignore[arg-type]
    extreme = np.maximum(p2d, p3d) if s.kind == "max" else np.minimum(p2d, p3d)
    sums = extreme.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0.0
    if empty.any():
        logger.debug(f"{int(empty.sum())} rows fell back to mean fusion")
        extreme[empty] = (p2d[empty] + p3d[empty]) / 2.0
        sums[empty] = 1.0
    return extreme / sums


def late_fuse_va(va2d: Matrix, va3d: Matrix, s: FusionStrategy) -> Matrix:
    """逐维融合 valence / arousal，两维共用一个权重"""
    if va2d.shape != va3d.shape or va2d.ndim != 2 or va2d.shape[1] != 2:
        raise ShapeError(f"VA shapes must be (N, 2), got {va2d.shape} and {va3d.shape}")
    for name, va in (("2D", va2d), ("3D", va3d)):
        if bad := np.flatnonzero(~(np.abs(va) <= 1.0).all(axis=1)).tolist():
            raise RangeError(
                f"{name} VA {va[bad[0]].tolist()} outside [-1, 1]",
                index=bad[0],
            )
    if s.kind == "mean":
        return (va2d + va3d) / 2.0
    if s.kind == "max":
        return np.maximum(va2d, va3d)
    if s.kind == "min":
        return np.minimum(va2d, va3d)
    return _weighted(va2d, va3d, s.w)  # type: ignore[arg-type]


def objective_value(objective: SweepObjective, fused: Matrix, targets) -> float:
    """融合结果在目标上的得分；accuracy / f1_macro / ccc 越大越好，rmse 越小越好"""
    if objective == "accuracy":
        return float(np.mean(fused.argmax(axis=1) == np.asarray(targets)))
    if objective == "f1_macro":
        report = classification_report(targets, fused.argmax(axis=1), fused.shape[1])
        return report.macro.f1
    targets = np.asarray(targets, dtype=np.float64)
    if objective == "ccc":
        return float(
            np.mean([ccc(fused[:, d], targets[:, d]).value for d in range(2)]),
        )
    if objective == "rmse":
        return float(np.mean(np.sqrt(np.mean((fused - targets) ** 2, axis=0))))
    raise ConfigurationError(f"unknown sweep objective {objective!r}")


def sweep_fusion_weight(
    pred2d: Matrix,
    pred3d: Matrix,
    targets,
    grid: Sequence[float],
    objective: SweepObjective = "accuracy",
) -> SweepResult:
    """在网格上搜索加权融合的 3D 权重

    参数:
        pred2d: 2D 模型的概率 (分类) 或 VA (回归)
        pred3d: 3D 模型的概率或 VA
        targets: 类别标签或 (N × 2) VA 目标
        grid: 候选权重，均在 [0, 1]
        objective: `accuracy`、`f1_macro`、`ccc` 或 `rmse`

    返回:
        SweepResult: 最优权重(并列时取较小者)与完整结果表
    """
    if not grid:
        raise ConfigurationError("sweep grid must not be empty")
    if bad := [w for w in grid if not 0.0 <= w <= 1.0]:
        raise ConfigurationError(f"sweep weights must be in [0, 1], got {bad[0]}")
    regression = objective in ("ccc", "rmse")
    fuse = late_fuse_va if regression else late_fuse_class
    table = [
        SweepPoint(
            w=float(w),
            value=objective_value(
                objective,
                fuse(pred2d, pred3d, FusionStrategy(kind="weighted", w=w)),
                targets,
            ),
        )
        for w in grid
    ]
    sign = -1.0 if objective in _MINIMIZED else 1.0
    best = min(table, key=lambda p: (-sign * p.value, p.w))
    logger.info(
        f"Fusion sweep over {len(table)} weights: best w={best.w:g} "
        f"({objective}={best.value:.6f})",
    )
    return SweepResult(
        objective=objective,
        best_w=best.w,
        best_value=best.value,
        table=table,
    )


def parse_grid(text: str) -> List[float]:
    """`lo:hi:step` 或逗号分隔的权重列表"""
    try:
        if ":" in text:
            lo, hi, step = (float(part) for part in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return [round(lo + i * step, 12) for i in range(n + 1)]
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"invalid grid {text!r}") from e


def fuse_predictions(
    a: PredictionSet,
    b: PredictionSet,
    strategy: FusionStrategy,
) -> PredictionSet:
    """按 id 对齐两组预测并融合双方都有的负载，b 视为 3D 一侧"""
    pairs = align(a.ids, b.ids)
    left, right = a.subset(pairs.left), b.subset(pairs.right)
    probs = va = None
    if left.probs is not None and right.probs is not None:
        if left.n_classes != right.n_classes:
            raise ShapeError(
                f"{a.source} has {left.n_classes} classes, "
                f"{b.source} has {right.n_classes}",
            )
        probs = late_fuse_class(left.probs, right.probs, strategy)
    if left.va is not None and right.va is not None:
        va = late_fuse_va(left.va, right.va, strategy)
    if probs is None and va is None:
        raise SchemaError(f"{a.source} and {b.source} share no prediction payload")
    logger.info(
        f"Fused {len(pairs.ids)} samples of {a.source} and {b.source} "
        f"with {strategy}",
    )
    return PredictionSet(
        source=f"{a.source}+{b.source}",
        ids=pairs.ids,
        probs=probs,
        va=va,
    )
