"""分类与 VA 回归的损失函数，每个都同时返回损失值与梯度"""
from abc import ABC, abstractmethod
from typing import NamedTuple, Optional, Sequence, Tuple, Union

from .exception import BatchSizeError, ConfigurationError, DataError, ShapeError
from .models import ClassWeights, HeadKind, HeadSpec, LossWeights, VaLossConfig
from .numerics import rng_uniform, RngState
from .typing import Labels, Matrix

import numpy as np
from sklearn.utils.class_weight import compute_class_weight

WeightsLike = Union[ClassWeights, Sequence[float], np.ndarray]


class Correlation(NamedTuple):
    value: float
    grad: np.ndarray
    """对 pred 的梯度"""
    degenerate: bool


def _check_labels(labels: Labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        raise DataError(
            f"label {labels[bad[0]]} outside [0, {n_classes})",
            index=int(bad[0]),
        )
    return labels.astype(np.int64)


def _per_sample_ce(logits: Matrix, labels: Labels) -> Tuple[np.ndarray, Matrix]:
    """每个样本的 −log p 与 softmax − onehot"""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    residual = np.exp(log_probs)
    residual[rows, labels] -= 1.0
    return -log_probs[rows, labels], residual


def softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Matrix, labels: Labels) -> Tuple[float, Matrix]:
    """平均负对数似然

    参数:
        logits: (N × C) 原始得分
        labels: N 个 [0, C) 的类别索引

    返回:
        Tuple[float, Matrix]: 损失与 (softmax − onehot)/N
    """
    nll, residual = _per_sample_ce(logits, labels)
    return float(np.mean(nll)), residual / nll.shape[0]


def weighted_cross_entropy(
    logits: Matrix,
    labels: Labels,
    weights: WeightsLike,
    reduction: str = "mean",
) -> Tuple[float, Matrix]:
    """按真实类别加权的交叉熵

    参数:
        logits: (N × C) 原始得分
        labels: 类别索引
        weights: 长度为 C 的非负权重
        reduction: "mean" 除以 N；"weighted_mean" 除以样本权重之和

    返回:
        Tuple[float, Matrix]: 损失与对 logits 的梯度
    """
    values = np.asarray(
        weights.values if isinstance(weights, ClassWeights) else weights,
        dtype=np.float64,
    )
    if values.shape != (logits.shape[1],):
        raise ShapeError(
            f"expected {logits.shape[1]} class weights, got {values.shape[0]}",
        )
    if np.any(values < 0):
        raise ConfigurationError("class weights must be non-negative")
    nll, residual = _per_sample_ce(logits, labels)
    sample_w = values[np.asarray(labels, dtype=np.int64)]
    if reduction == "mean":
        norm = float(nll.shape[0])
    elif reduction == "weighted_mean":
        norm = float(sample_w.sum())
        if norm == 0.0:
            return 0.0, np.zeros_like(logits)
    else:
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    if reduction == "mean":
        loss = float(np.mean(nll * sample_w))
    else:
        loss = float(np.sum(nll * sample_w) / norm)
    return loss, residual * sample_w[:, None] / norm


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    """逆频率权重 w_c = N / (C · n_c)"""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigurationError("class counts must be a non-empty vector")
    if missing := np.flatnonzero(counts < 1).tolist():
        raise ConfigurationError(
            "every class needs at least one training sample",
            absent_classes=missing,
        )
    classes = np.arange(counts.size)
    values = compute_class_weight(
        "balanced",
        classes=classes,
        y=np.repeat(classes, counts),
    )
    return ClassWeights(values=values.tolist())


def mse_loss(pred: Matrix, target: Matrix) -> Tuple[float, Matrix]:
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} differs from target {target.shape}",
        )
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _as_pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise BatchSizeError("correlation needs at least 2 samples", n=x.size)
    return x, y


def pcc(pred, target) -> Correlation:
    """Pearson 相关系数

    pred 或 target 为常数时返回 0、零梯度，并置 degenerate。
    """
    x, y = _as_pair(pred, target)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(0.0, np.zeros_like(x), True)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy, sxy = xc @ xc, yc @ yc, xc @ yc
    norm = np.sqrt(sxx * syy)
    r = sxy / norm
    grad = yc / norm - r * xc / sxx
    return Correlation(float(np.clip(r, -1.0, 1.0)), grad, False)


def ccc(pred, target) -> Correlation:
    """一致性相关系数 2·cov / (σx² + σy² + (μx − μy)²)，总体矩

    两者都为常数: 相等时为 1，不等时为 0，并置 degenerate。
    """
    x, y = _as_pair(pred, target)
    n = x.size
    mx, my = x.mean(), y.mean()
    xc, yc = x - mx, y - my
    both_constant = np.ptp(x) == 0 and np.ptp(y) == 0
    if both_constant and mx == my:
        return Correlation(1.0, np.zeros_like(x), True)
    sxx, syy, sxy = (xc @ xc) / n, (yc @ yc) / n, (xc @ yc) / n
    denom = sxx + syy + (mx - my) ** 2
    value = 2.0 * sxy / denom
    grad = (2.0 / (n * denom)) * (yc - value * (xc + mx - my))
    return Correlation(float(np.clip(value, -1.0, 1.0)), grad, bool(both_constant))


def _va_correlations(va_pred: Matrix, va_target: Matrix, fn) -> Tuple[float, Matrix]:
    """逐维 (valence, arousal) 计算后取平均"""
    if va_pred.shape != va_target.shape or va_pred.ndim != 2:
        raise ShapeError(
            f"VA prediction shape {va_pred.shape} differs from {va_target.shape}",
        )
    if va_pred.shape[0] < 2:
        raise BatchSizeError(
            "CCC/PCC need a batch of at least 2 rows",
            n=va_pred.shape[0],
        )
    dims = va_pred.shape[1]
    grad = np.zeros_like(va_pred)
    total = 0.0
    for d in range(dims):
        result = fn(va_pred[:, d], va_target[:, d])
        total += result.value
        grad[:, d] = result.grad / dims
    return total / dims, grad


def combined_affectnet_loss(
    logits: Matrix,
    va_pred: Matrix,
    labels: Labels,
    va_target: Matrix,
    w: LossWeights,
) -> Tuple[float, Tuple[Matrix, Matrix]]:
    """CE + α'·MSE + β'·(1 − CCC) + γ'·(1 − PCC)，α' 等为归一化后的份额

    返回:
        Tuple[float, Tuple[Matrix, Matrix]]: 损失与 (logits 梯度, VA 梯度)
    """
    if va_pred.shape[0] < 2:
        raise BatchSizeError("combined loss needs at least 2 rows", n=va_pred.shape[0])
    a, b, g = w.shares
    ce, grad_logits = softmax_cross_entropy(logits, labels)
    mse, grad_mse = mse_loss(va_pred, va_target)
    mean_ccc, grad_ccc = _va_correlations(va_pred, va_target, ccc)
    mean_pcc, grad_pcc = _va_correlations(va_pred, va_target, pcc)
    loss = ce + a * mse + b * (1.0 - mean_ccc) + g * (1.0 - mean_pcc)
    grad_va = a * grad_mse - b * grad_ccc - g * grad_pcc
    return float(loss), (grad_logits, grad_va)


def stage1_combined_loss(
    logits: Matrix,
    va_pred: Matrix,
    labels: Labels,
    va_target: Matrix,
    class_weights: WeightsLike,
    cfg: VaLossConfig,
) -> Tuple[float, Tuple[Matrix, Matrix]]:
    """加权交叉熵 + w1 · MSE"""
    wce, grad_logits = weighted_cross_entropy(logits, labels, class_weights)
    mse, grad_mse = mse_loss(va_pred, va_target)
    return wce + cfg.w1 * mse, (grad_logits, cfg.w1 * grad_mse)


def stage2_va_loss(
    va_pred: Matrix,
    va_target: Matrix,
    cfg: VaLossConfig,
) -> Tuple[float, Matrix]:
    """CCC 项 + w2 · MSE

    `cfg.ccc_as_one_minus` 为真时 CCC 项取 1 − 平均 CCC，否则照字面取平均 CCC。
    """
    mean_ccc, grad_ccc = _va_correlations(va_pred, va_target, ccc)
    mse, grad_mse = mse_loss(va_pred, va_target)
    if cfg.ccc_as_one_minus:
        return (1.0 - mean_ccc) + cfg.w2 * mse, cfg.w2 * grad_mse - grad_ccc
    return mean_ccc + cfg.w2 * mse, cfg.w2 * grad_mse + grad_ccc


def sample_loss_weights(rng: RngState) -> LossWeights:
    """从 U(0, 1) 采样 α, β, γ，零值重抽"""
    draws = []
    while len(draws) < 3:
        value = rng_uniform(rng, 0.0, 1.0)
        if value > 0.0:
            draws.append(value)
    return LossWeights(alpha=draws[0], beta=draws[1], gamma=draws[2])


class Objective(ABC):
    """训练循环使用的损失选择器"""

    @abstractmethod
    def __call__(
        self,
        outputs: Matrix,
        labels: Optional[Labels],
        va: Optional[Matrix],
        train: bool,
    ) -> Tuple[float, Matrix]:
        raise NotImplementedError

    needs_va: bool = False


class ClassificationObjective(Objective):
    def __init__(self, class_weights: Optional[WeightsLike] = None):
        self.class_weights = class_weights

    def __call__(self, outputs, labels, va, train):
        if self.class_weights is None:
            return softmax_cross_entropy(outputs, labels)
        return weighted_cross_entropy(outputs, labels, self.class_weights)


class AffectNetObjective(Objective):
    """8 类 + VA 输出头的组合损失，训练时每个 batch 重新采样 α, β, γ"""

    needs_va = True

    def __init__(self, rng: RngState, n_classes: int = 8):
        self.rng = rng
        self.n_classes = n_classes
        self.last_weights: Optional[LossWeights] = None

    def __call__(self, outputs, labels, va, train):
        c = self.n_classes
        weights = (
            sample_loss_weights(self.rng)
            if train
            else LossWeights(alpha=1.0, beta=1.0, gamma=1.0)
        )
        self.last_weights = weights
        loss, (grad_logits, grad_va) = combined_affectnet_loss(
            outputs[:, :c],
            outputs[:, c:],
            labels,
            va,
            weights,
        )
        return loss, np.concatenate([grad_logits, grad_va], axis=1)


class Stage1Objective(Objective):
    needs_va = True

    def __init__(
        self,
        class_weights: WeightsLike,
        cfg: VaLossConfig,
        n_classes: int = 8,
    ):
        self.class_weights = class_weights
        self.cfg = cfg
        self.n_classes = n_classes

    def __call__(self, outputs, labels, va, train):
        c = self.n_classes
        loss, (grad_logits, grad_va) = stage1_combined_loss(
            outputs[:, :c],
            outputs[:, c:],
            labels,
            va,
            self.class_weights,
            self.cfg,
        )
        return loss, np.concatenate([grad_logits, grad_va], axis=1)


class Stage2Objective(Objective):
    needs_va = True

    def __init__(self, cfg: VaLossConfig):
        self.cfg = cfg

    def __call__(self, outputs, labels, va, train):
        return stage2_va_loss(outputs, va, self.cfg)


def select_objective(
    head: HeadSpec,
    rng: Optional[RngState] = None,
    class_weights: Optional[WeightsLike] = None,
    va_cfg: Optional[VaLossConfig] = None,
    stage: int = 0,
) -> Objective:
    """按输出头选择损失

    参数:
        head: 模型输出头
        rng: 组合损失采样 α, β, γ 的随机数状态
        class_weights: 分类权重，提供时使用加权交叉熵
        va_cfg: 两阶段 VA 训练配置
        stage: 0 为单阶段，1 / 2 为两阶段 VA 训练的阶段
    """
    if head.kind == HeadKind.VA_ONLY_2:
        return Stage2Objective(va_cfg or VaLossConfig())
    if head.kind == HeadKind.AFFECTNET_8_VA:
        if stage == 1:
            if class_weights is None:
                raise ConfigurationError("stage-1 training needs class weights")
            return Stage1Objective(class_weights, va_cfg or VaLossConfig())
        if rng is None:
            raise ConfigurationError("the combined loss needs a random state")
        return AffectNetObjective(rng)
    return ClassificationObjective(class_weights)
