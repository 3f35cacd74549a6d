"""训练循环: AdamW、三角循环学习率、早停、两阶段 VA 训练与检查点"""
from functools import reduce
import math
from pathlib import Path
from typing import (
    Callable,
    Iterable,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

from .exception import (
    ConfigurationError,
    DataError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .log import logger
from .losses import (
    class_weights_from_counts,
    Objective,
    select_objective,
    Stage1Objective,
    Stage2Objective,
)
from .metrics import ConfusionAccumulator, RegressionAccumulator
from .models import (
    CheckpointMeta,
    EpochRecord,
    HeadKind,
    HeadSpec,
    IntermediateArchitecture,
    MlpArchitecture,
    TrainConfig,
    VaLossConfig,
)
from .nn import MlpModel, Model
from .numerics import RngState
from .typing import Matrix
from .utils import read_envelope, write_envelope

import numpy as np
from pydantic import ValidationError

CHECKPOINT_MAGIC = b"FEI3D\0"
CHECKPOINT_VERSION = 1
SUPPORTED_CHECKPOINT_VERSIONS = (1,)
IMPROVEMENT_EPS = 1e-12
EVAL_CHUNK_ROWS = 1024

ObjectiveSelector = Callable[[HeadSpec, RngState], Objective]


class SupervisedSplit(Protocol):
    features: Matrix
    labels: Optional[np.ndarray]
    va: Optional[Matrix]

    def __len__(self) -> int:
        ...


def cyclic_lr(cfg: TrainConfig, global_step: int) -> float:
    """三角循环学习率，无循环动量

    参数:
        cfg: 训练配置，需已确定 step_size
        global_step: 从 0 开始的全局步数

    返回:
        float: 当前学习率
    """
    if cfg.step_size is None:
        raise ConfigurationError("step_size must be resolved before scheduling")
    step_size = cfg.step_size
    position = global_step % (2 * step_size)
    rise = 1.0 - abs(position - step_size) / step_size
    if cfg.scheduler_mode == "triangular2":
        scale = 1.0 / (2.0 ** (global_step // (2 * step_size)))
    elif cfg.scheduler_mode == "exp_range":
        scale = cfg.scheduler_gamma**global_step
    else:
        scale = 1.0
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * rise * scale


class OptimizerState:
    """Adam 的一阶/二阶矩与步数"""

    def __init__(
        self,
        shapes: Iterable[Tuple[int, ...]],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.first = [np.zeros(shape) for shape in shapes]
        self.second = [np.zeros_like(m) for m in self.first]
        self.step = 0
        self.betas = betas
        self.eps = eps


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> Tuple[Sequence[np.ndarray], OptimizerState]:
    """原地执行一步带解耦权重衰减的 Adam

    θ ← θ·(1 − lr·wd)，随后 θ ← θ − lr·m̂ / (√v̂ + ε)。
    """
    if not len(params) == len(grads) == len(state.first):
        raise ShapeError(
            f"{len(params)} params, {len(grads)} grads, "
            f"{len(state.first)} moment slots",
        )
    for param, grad, m in zip(params, grads, state.first):
        if not param.shape == grad.shape == m.shape:
            raise ShapeError(
                f"param {param.shape}, grad {grad.shape}, moment {m.shape} disagree",
            )
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for param, grad, m, v in zip(params, grads, state.first, state.second):
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if weight_decay:
            param *= 1.0 - lr * weight_decay
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


class AdamOptimizer:
    def __init__(self, model: Model, cfg: TrainConfig):
        named = list(model.named_parameters())
        self.names = [name for name, _, _ in named]
        self.params = [param for _, param, _ in named]
        self.grads = [grad for _, _, grad in named]
        self.state = OptimizerState(
            (p.shape for p in self.params),
            betas=cfg.betas,
            eps=cfg.eps,
        )

    def step(self, lr: float, weight_decay: float) -> None:
        adam_step(self.params, self.grads, self.state, lr, weight_decay)


def early_stop_update(
    best: float,
    current_val_loss: float,
    stale_epochs: int,
    patience: int,
) -> Tuple[bool, float, int]:
    """更新早停状态

    返回:
        Tuple[bool, float, int]: (是否停止, 新的最优值, 新的未改进轮数)
    """
    if patience < 1:
        raise ConfigurationError(f"patience must be at least 1, got {patience}")
    if current_val_loss < best - IMPROVEMENT_EPS:
        return False, current_val_loss, 0
    stale_epochs += 1
    return stale_epochs >= patience, best, stale_epochs


def _default_selector(head: HeadSpec, rng: RngState) -> Objective:
    return select_objective(head, rng=rng)


def evaluate_split(
    model: Model,
    objective: Objective,
    split: SupervisedSplit,
    threads: int = 1,
) -> Tuple[float, dict]:
    """eval 模式下计算整个划分的损失与简要指标

    指标按 `EVAL_CHUNK_ROWS` 行分块累积后合并。
    """
    outputs = model.predict(split.features, threads=threads)
    loss, _ = objective(outputs, split.labels, split.va, False)
    metrics = {}
    head = model.head
    starts = range(0, len(split), EVAL_CHUNK_ROWS)
    if head.n_classes and split.labels is not None:
        pred = outputs[:, : head.n_classes].argmax(axis=1)
        confusion = reduce(
            ConfusionAccumulator.merge,
            (
                ConfusionAccumulator(head.n_classes).update(
                    split.labels[s : s + EVAL_CHUNK_ROWS],
                    pred[s : s + EVAL_CHUNK_ROWS],
                )
                for s in starts
            ),
        )
        metrics["accuracy"] = float(np.trace(confusion.matrix)) / len(split)
    if head.has_va and split.va is not None and len(split) >= 2:
        va_pred = outputs[:, head.n_classes : head.n_classes + 2]
        regression = reduce(
            RegressionAccumulator.merge,
            (
                RegressionAccumulator().update(
                    va_pred[s : s + EVAL_CHUNK_ROWS],
                    split.va[s : s + EVAL_CHUNK_ROWS],
                )
                for s in starts
            ),
        ).report()
        metrics["ccc_valence"] = regression.valence.ccc
        metrics["ccc_arousal"] = regression.arousal.ccc
    return loss, metrics


def fit(
    model: Model,
    dataset: SupervisedSplit,
    loss_selector: Optional[ObjectiveSelector],
    cfg: TrainConfig,
    val_split: SupervisedSplit,
    stage: int = 1,
    threads: int = 1,
) -> Tuple[Model, List[EpochRecord]]:
    """小批量训练，保留验证损失最低的参数

    参数:
        model: 待训练模型，原地更新
        dataset: 训练划分
        loss_selector: `(head, rng) -> Objective`，为 None 时按输出头选择
        cfg: 训练配置
        val_split: 与训练划分不相交的验证划分
        stage: 写入历史记录的阶段号
        threads: 验证推理线程数

    返回:
        Tuple[Model, List[EpochRecord]]: 训练后的模型与逐轮历史
    """
    n_train = len(dataset)
    if n_train == 0 or len(val_split) == 0:
        raise DataError("training and validation splits must be non-empty")
    n_batches = n_train // cfg.batch_size
    if n_batches == 0:
        raise DataError(
            f"training split has {n_train} rows, fewer than one batch "
            f"of {cfg.batch_size}",
        )
    cfg = cfg.copy(update={"step_size": cfg.resolved_step_size(n_train)})
    shuffle_rng, dropout_rng, loss_rng = RngState(cfg.seed).split(3)
    objective = (loss_selector or _default_selector)(model.head, loss_rng)
    if objective.needs_va and (dataset.va is None or val_split.va is None):
        raise DataError("this objective needs valence/arousal targets")
    model.set_rng(dropout_rng)
    optimizer = AdamOptimizer(model, cfg)
    logger.info(
        f"Training {model!r} on {n_train} rows: {n_batches} batches/epoch, "
        f"step_size={cfg.step_size}, max_epochs={cfg.max_epochs}",
    )

    history: List[EpochRecord] = []
    best, stale = math.inf, 0
    best_state, best_epoch = None, 0
    global_step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        batch_losses, lrs = [], []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = cyclic_lr(cfg, global_step)
            outputs = model.forward(dataset.features[idx], "train")
            loss, grad = objective(
                outputs,
                None if dataset.labels is None else dataset.labels[idx],
                None if dataset.va is None else dataset.va[idx],
                True,
            )
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {b}",
                )
            model.backprop(grad)
            optimizer.step(lr, cfg.weight_decay)
            global_step += 1
            batch_losses.append(loss)
            lrs.append(lr)
            logger.trace(f"epoch {epoch} batch {b}: loss={loss:.6f} lr={lr:.3e}")

        val_loss, val_metrics = evaluate_split(model, objective, val_split, threads)
        record = EpochRecord(
            stage=stage,
            epoch=epoch,
            lr_min=min(lrs),
            lr_max=max(lrs),
            train_loss=float(np.mean(batch_losses)),
            val_loss=val_loss,
            val_metrics=val_metrics,
        )
        history.append(record)
        metrics_text = " ".join(f"{k}={v:.4f}" for k, v in val_metrics.items())
        logger.info(
            f"Stage {stage} epoch {epoch}/{cfg.max_epochs}: "
            f"train_loss={record.train_loss:.5f} val_loss={val_loss:.5f} "
            f"{metrics_text}",
        )

        stop, new_best, stale = early_stop_update(best, val_loss, stale, cfg.patience)
        if new_best < best:
            best_state, best_epoch = model.state_dict(), epoch
        best = new_best
        if stop:
            logger.info(
                f"Early stopping after epoch {epoch}, best epoch {best_epoch}",
            )
            break

    if best_state is not None:
        model.load_state_dict(best_state)
        logger.success(f"Restored best epoch {best_epoch} (val_loss={best:.5f})")
    return model, history


def fit_two_stage_va(
    model: MlpModel,
    dataset: SupervisedSplit,
    cfg: TrainConfig,
    va_cfg: VaLossConfig,
    val_split: SupervisedSplit,
    stage2_cfg: Optional[TrainConfig] = None,
    threads: int = 1,
) -> Tuple[MlpModel, List[EpochRecord]]:
    """两阶段 VA 训练

    第一阶段用加权交叉熵 + w1·MSE 训练 8 类 + VA 输出头；
    第二阶段换上新初始化的 2 维 VA 输出头，保留主干，用 CCC 项 + w2·MSE 训练。
    """
    if dataset.labels is None or dataset.va is None:
        raise DataError("two-stage training needs class labels and VA targets")
    if val_split.va is None:
        raise DataError("two-stage training needs VA targets in the validation split")
    if model.head.kind != HeadKind.AFFECTNET_8_VA:
        raise ConfigurationError(
            f"stage 1 trains an affectnet_8_va head, model has {model.head}",
        )
    counts = np.bincount(dataset.labels, minlength=model.head.n_classes)
    weights = class_weights_from_counts(counts)
    logger.info(f"Stage 1 class weights: {[round(w, 4) for w in weights.values]}")
    _, history = fit(
        model,
        dataset,
        lambda head, rng: Stage1Objective(weights, va_cfg, head.n_classes),
        cfg,
        val_split,
        stage=1,
        threads=threads,
    )
    stage2_cfg = stage2_cfg or cfg
    head_rng = RngState(stage2_cfg.seed).split(4)[3]
    model.replace_head(HeadSpec(kind=HeadKind.VA_ONLY_2), head_rng)
    _, history2 = fit(
        model,
        dataset,
        lambda head, rng: Stage2Objective(va_cfg),
        stage2_cfg,
        val_split,
        stage=2,
        threads=threads,
    )
    return model, history + history2


def write_history(path: Union[str, Path], records: Iterable[EpochRecord]) -> None:
    """逐轮历史写为 JSON-lines"""
    lines = [record.json(sort_keys=True) for record in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def checkpoint_bytes(model: Model, meta: CheckpointMeta) -> bytes:
    header = {
        "architecture": model.architecture().dict(),
        "meta": meta.dict(),
    }
    return write_envelope(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        header,
        list(model.state_dict().items()),
    )


def save_checkpoint(
    model: Model,
    meta: CheckpointMeta,
    path: Union[str, Path],
) -> None:
    """保存检查点

    参数:
        model: 模型
        meta: 训练元数据
        path: 输出路径
    """
    Path(path).write_bytes(checkpoint_bytes(model, meta))
    logger.debug(f"Checkpoint written to {path}")


def read_checkpoint(path: Union[str, Path]) -> Tuple[Model, CheckpointMeta]:
    """读取检查点，完整校验后才构建模型"""
    from .fusion import IntermediateFusionModel

    raw = Path(path).read_bytes()
    _, header, blocks = read_envelope(
        raw,
        CHECKPOINT_MAGIC,
        SUPPORTED_CHECKPOINT_VERSIONS,
    )
    header_offset = len(CHECKPOINT_MAGIC) + 6
    try:
        arch = header["architecture"]
        meta = CheckpointMeta.parse_obj(header["meta"])
        rng = RngState(0)
        if arch.get("model") == "intermediate":
            model: Model = IntermediateFusionModel.from_architecture(
                IntermediateArchitecture.parse_obj(arch),
                rng,
            )
        else:
            model = MlpModel.from_architecture(MlpArchitecture.parse_obj(arch), rng)
        model.load_state_dict(blocks)
    except (KeyError, ValidationError, ShapeError, ConfigurationError) as e:
        raise FormatError(
            f"checkpoint header does not describe its blocks: {e}",
            offset=header_offset,
        ) from e
    return model, meta


def load_checkpoint(path: Union[str, Path]) -> Model:
    return read_checkpoint(path)[0]
