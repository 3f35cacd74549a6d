from fei3d import (
    classification_report,
    late_fuse_class,
    logger,
    sweep_fusion_weight,
)
from fei3d.metrics import format_sweep
from fei3d.models import FusionStrategy

import numpy as np

rng = np.random.default_rng(0)
labels = rng.integers(0, 7, size=500)


def noisy_probs(accuracy: float) -> np.ndarray:
    """以 accuracy 的概率把大部分概率分给正确类别"""
    probs = rng.dirichlet(np.ones(7), size=labels.size) * 0.3
    hit = rng.random(labels.size) < accuracy
    target = np.where(hit, labels, rng.integers(0, 7, size=labels.size))
    probs[np.arange(labels.size), target] += 0.7
    return probs


p2d = noisy_probs(0.6)  # 2D 模型的输出
p3d = noisy_probs(0.5)  # 3D 模型的输出

# 四种融合方式: max / min / mean / weighted
for strategy in (
    FusionStrategy(kind="max"),
    FusionStrategy(kind="mean"),
    FusionStrategy(kind="weighted", w=0.2),  # w 为 3D 一侧的权重
):
    fused = late_fuse_class(p2d, p3d, strategy)
    report = classification_report(labels, fused.argmax(axis=1), 7)
    logger.info(f"{strategy}: accuracy={report.accuracy:.4f}")

# 在验证集上搜索最佳权重
grid = [round(0.05 * i, 2) for i in range(21)]
result = sweep_fusion_weight(p2d, p3d, labels, grid, "accuracy")
logger.info(format_sweep(result))
