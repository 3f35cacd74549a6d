"""分类与 VA 回归评估指标"""
from typing import List, Literal, Optional, Sequence, Tuple

from .exception import ConfigurationError, DataError, RangeError, ShapeError
from .losses import ccc, pcc
from .models import (
    AverageMetrics,
    ClassificationReport,
    ClassMetrics,
    DimensionMetrics,
    MetricsReport,
    RegressionReport,
    SweepResult,
)
from .typing import Labels, Matrix

import numpy as np
import pandas as pd
from sklearn.metrics import (
    confusion_matrix,
    mean_absolute_error,
    mean_squared_error,
    precision_recall_fscore_support,
)

MacroMode = Literal["all", "present"]
TableLayout = Literal["balanced", "unbalanced", "va", "va_per_dim"]


def _check_pair(true_labels: Labels, pred_labels: Labels, n_classes: int):
    true = np.asarray(true_labels)
    pred = np.asarray(pred_labels)
    if true.shape != pred.shape or true.ndim != 1:
        raise ShapeError(
            f"label arrays differ in shape: {true.shape} vs {pred.shape}",
        )
    for name, labels in (("true", true), ("predicted", pred)):
        if bad := np.flatnonzero((labels < 0) | (labels >= n_classes)).tolist():
            raise RangeError(
                f"{name} label {labels[bad[0]]} outside [0, {n_classes})",
                index=bad[0],
            )
    return true.astype(np.int64), pred.astype(np.int64)


def confusion(true_labels: Labels, pred_labels: Labels, n_classes: int) -> np.ndarray:
    """C × C 计数矩阵，行为真实类别，列为预测类别"""
    true, pred = _check_pair(true_labels, pred_labels, n_classes)
    return confusion_matrix(true, pred, labels=np.arange(n_classes)).astype(np.int64)


def classification_report(
    true_labels: Labels,
    pred_labels: Labels,
    n_classes: int,
    macro: MacroMode = "all",
) -> ClassificationReport:
    """计算分类报告

    分母为 0 的 P / R / F1 记为 0。各类 support 相等时 weighted 与 macro 完全一致，
    weighted recall 恒等于 accuracy。

    参数:
        true_labels: 真实类别
        pred_labels: 预测类别
        n_classes: 类别数 C
        macro: `all` 对所有类别取平均，`present` 只对 support > 0 的类别

    返回:
        ClassificationReport: 分类报告
    """
    if macro not in ("all", "present"):
        raise ConfigurationError(f"unknown macro mode {macro!r}")
    true, pred = _check_pair(true_labels, pred_labels, n_classes)
    n = true.shape[0]
    if n == 0:
        raise DataError("cannot report on zero samples")
    labels = np.arange(n_classes)
    matrix = confusion_matrix(true, pred, labels=labels).astype(np.int64)
    precision, recall, f1, support = precision_recall_fscore_support(
        true,
        pred,
        labels=labels,
        average=None,
        zero_division=0,
    )
    accuracy = float(np.trace(matrix)) / n

    mask = support > 0 if macro == "present" else np.ones(n_classes, dtype=bool)
    balanced = bool(np.all(support == support[0]))
    macro_avg = AverageMetrics(
        precision=float(np.mean(precision[mask])),
        recall=accuracy if balanced else float(np.mean(recall[mask])),
        f1=float(np.mean(f1[mask])),
    )
    if balanced:
        weighted_avg = macro_avg.copy()
    else:
        weighted_avg = AverageMetrics(
            precision=float(support @ precision) / n,
            recall=accuracy,
            f1=float(support @ f1) / n,
        )
    return ClassificationReport(
        accuracy=accuracy,
        per_class=[
            ClassMetrics(
                precision=float(p),
                recall=float(r),
                f1=float(f),
                support=int(s),
            )
            for p, r, f, s in zip(precision, recall, f1, support)
        ],
        weighted=weighted_avg,
        macro=macro_avg,
        confusion=matrix.tolist(),
        n_samples=n,
    )


def report_from_confusion(
    matrix: np.ndarray,
    macro: MacroMode = "all",
) -> ClassificationReport:
    """由混淆矩阵还原标签对后计算分类报告"""
    matrix = np.asarray(matrix, dtype=np.int64)
    if matrix.sum() == 0:
        raise DataError("cannot report on zero samples")
    n_classes = matrix.shape[0]
    true = np.repeat(np.arange(n_classes), matrix.sum(axis=1))
    pred = np.repeat(np.tile(np.arange(n_classes), n_classes), matrix.reshape(-1))
    return classification_report(true, pred, n_classes, macro)


def _dimension(pred: np.ndarray, target: np.ndarray) -> DimensionMetrics:
    mse = float(mean_squared_error(target, pred))
    return DimensionMetrics(
        mse=mse,
        mae=float(mean_absolute_error(target, pred)),
        rmse=float(np.sqrt(mse)),
        ccc=ccc(pred, target).value,
        pcc=pcc(pred, target).value,
        sagr=float(np.mean(np.sign(pred) == np.sign(target))),
    )


def _mean_dimension(a: DimensionMetrics, b: DimensionMetrics) -> DimensionMetrics:
    return DimensionMetrics(
        **{
            field: (getattr(a, field) + getattr(b, field)) / 2.0
            for field in a.__fields__
        },
    )


def regression_report(pred: Matrix, target: Matrix) -> RegressionReport:
    """valence / arousal 两维上的 MSE、MAE、RMSE、CCC、PCC、SAGR 及其均值

    参数:
        pred: (N × 2) 预测
        target: (N × 2) 目标，N ≥ 2

    返回:
        RegressionReport: 回归报告
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(
            f"VA arrays must both be (N, 2), got {pred.shape} and {target.shape}",
        )
    if pred.shape[0] < 2:
        raise DataError("CCC is undefined for fewer than 2 samples", n=pred.shape[0])
    valence = _dimension(pred[:, 0], target[:, 0])
    arousal = _dimension(pred[:, 1], target[:, 1])
    return RegressionReport(
        valence=valence,
        arousal=arousal,
        mean=_mean_dimension(valence, arousal),
        n_samples=pred.shape[0],
    )


class ConfusionAccumulator:
    """分批累积混淆矩阵，可结合地合并"""

    def __init__(self, n_classes: int, matrix: Optional[np.ndarray] = None):
        self.n_classes = n_classes
        self.matrix = (
            np.zeros((n_classes, n_classes), dtype=np.int64)
            if matrix is None
            else np.array(matrix, dtype=np.int64)
        )

    def update(
        self,
        true_labels: Labels,
        pred_labels: Labels,
    ) -> "ConfusionAccumulator":
        self.matrix += confusion(true_labels, pred_labels, self.n_classes)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ShapeError(
                f"cannot merge {self.n_classes}-class and "
                f"{other.n_classes}-class accumulators",
            )
        return ConfusionAccumulator(self.n_classes, self.matrix + other.matrix)

    def report(self, macro: MacroMode = "all") -> ClassificationReport:
        return report_from_confusion(self.matrix, macro)


class RegressionAccumulator:
    """分批累积 VA 的充分统计量

    每维保存 n、Σx、Σy、Σx²、Σy²、Σxy、Σ|x−y|、符号一致数。
    由矩计算的 CCC / PCC 与 `regression_report` 在舍入误差内一致。
    """

    _N_STATS = 7

    def __init__(self, n: int = 0, stats: Optional[np.ndarray] = None):
        self.n = n
        self.stats = np.zeros((2, self._N_STATS)) if stats is None else stats.copy()

    def update(self, pred: Matrix, target: Matrix) -> "RegressionAccumulator":
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
            raise ShapeError(f"VA batch shapes {pred.shape} and {target.shape}")
        x, y = pred.T, target.T
        self.stats += np.stack(
            [
                x.sum(axis=1),
                y.sum(axis=1),
                (x * x).sum(axis=1),
                (y * y).sum(axis=1),
                (x * y).sum(axis=1),
                np.abs(x - y).sum(axis=1),
                (np.sign(x) == np.sign(y)).sum(axis=1),
            ],
            axis=1,
        )
        self.n += pred.shape[0]
        return self

    def merge(self, other: "RegressionAccumulator") -> "RegressionAccumulator":
        return RegressionAccumulator(self.n + other.n, self.stats + other.stats)

    def _dimension(self, d: int) -> DimensionMetrics:
        n = self.n
        sx, sy, sxx, syy, sxy, sae, agree = self.stats[d]
        mx, my = sx / n, sy / n
        vx, vy = sxx / n - mx * mx, syy / n - my * my
        cov = sxy / n - mx * my
        mse = max((sxx - 2 * sxy + syy) / n, 0.0)
        denom = vx + vy + (mx - my) ** 2
        return DimensionMetrics(
            mse=mse,
            mae=sae / n,
            rmse=float(np.sqrt(mse)),
            ccc=float(np.clip(2 * cov / denom, -1, 1)) if denom > 0 else 1.0,
            pcc=(
                float(np.clip(cov / np.sqrt(vx * vy), -1, 1))
                if vx > 0 and vy > 0
                else 0.0
            ),
            sagr=agree / n,
        )

    def report(self) -> RegressionReport:
        if self.n < 2:
            raise DataError("CCC is undefined for fewer than 2 samples", n=self.n)
        valence, arousal = self._dimension(0), self._dimension(1)
        return RegressionReport(
            valence=valence,
            arousal=arousal,
            mean=_mean_dimension(valence, arousal),
            n_samples=self.n,
        )


def _layout_row(report: MetricsReport, layout: TableLayout) -> List[float]:
    if layout in ("balanced", "unbalanced"):
        cls = report.classification
        if cls is None:
            raise ConfigurationError(f"{layout} table needs a classification report")
        if layout == "balanced":
            return [
                cls.accuracy,
                cls.weighted.f1,
                cls.weighted.precision,
                cls.weighted.recall,
            ]
        return [
            cls.accuracy,
            cls.weighted.f1,
            cls.weighted.precision,
            cls.weighted.recall,
            cls.macro.f1,
            cls.macro.precision,
            cls.macro.recall,
        ]
    reg = report.regression
    if reg is None:
        raise ConfigurationError(f"{layout} table needs a regression report")
    if layout == "va":
        return [reg.mean.mse, reg.mean.mae, reg.mean.rmse, reg.mean.ccc]
    return [reg.valence.rmse, reg.arousal.rmse, reg.valence.ccc, reg.arousal.ccc]


_COLUMNS = {
    "balanced": ["Acc", "F1", "Precision", "Recall"],
    "unbalanced": ["Acc", "F1(w)", "P(w)", "R(w)", "F1(m)", "P(m)", "R(m)"],
    "va": ["MSE", "MAE", "RMSE", "CCC"],
    "va_per_dim": ["RMSE_val", "RMSE_aro", "CCC_val", "CCC_aro"],
}


def format_table(
    rows: Sequence[Tuple[str, MetricsReport]],
    layout: TableLayout,
    digits: int = 4,
) -> str:
    """按结果表的列顺序输出对齐的文本表格

    参数:
        rows: (方法名, 报告) 列表
        layout: `balanced`、`unbalanced`、`va` 或 `va_per_dim`
        digits: 小数位数. 默认为 4.

    返回:
        str: 文本表格，以换行结尾
    """
    if layout not in _COLUMNS:
        raise ConfigurationError(f"unknown table layout {layout!r}")
    frame = pd.DataFrame(
        [[name, *_layout_row(report, layout)] for name, report in rows],
        columns=["Method", *_COLUMNS[layout]],
    )
    text = frame.to_string(
        index=False,
        float_format=lambda v: f"{v:.{digits}f}",
        justify="left",
    )
    return text + "\n"


def default_layout(report: MetricsReport) -> List[TableLayout]:
    """按报告内容挑选表格: 各类 support 相等时用 balanced"""
    layouts: List[TableLayout] = []
    if report.classification is not None:
        supports = {c.support for c in report.classification.per_class}
        layouts.append("balanced" if len(supports) == 1 else "unbalanced")
    if report.regression is not None:
        layouts.extend(["va", "va_per_dim"])
    return layouts


def render_report(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """`report.txt` 的内容

    表格种类由第一行决定，缺少对应部分的行不进入该表。
    """
    if not rows:
        return ""
    tables = []
    for layout in default_layout(rows[0][1]):
        section = "regression" if layout.startswith("va") else "classification"
        usable = [row for row in rows if getattr(row[1], section) is not None]
        tables.append(format_table(usable, layout))
    return "\n".join(tables)


def format_sweep(result: SweepResult, digits: int = 6) -> str:
    frame = pd.DataFrame(
        [[point.w, point.value] for point in result.table],
        columns=["w", result.objective],
    )
    text = frame.to_string(index=False, float_format=lambda v: f"{v:.{digits}f}")
    best = f"{result.objective} = {result.best_value:.{digits}f}"
    return f"{text}\nbest w = {result.best_w:g} ({best})\n"
