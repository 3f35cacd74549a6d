from enum import Enum
from pathlib import Path
import re
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, root_validator, validator


# 输出头
class HeadKind(str, Enum):
    RAF_DB_7 = "raf_db_7"
    AFFECTNET_8_VA = "affectnet_8_va"
    VA_ONLY_2 = "va_only_2"
    CUSTOM = "custom"

    def __repr__(self) -> str:
        return self.name


_CUSTOM_HEAD = re.compile(r"^custom\((\d+)\)$")


class HeadSpec(BaseModel):
    """分类器输出头"""

    kind: HeadKind
    n: Optional[int] = None
    """仅 custom 使用的输出宽度"""

    @root_validator
    @classmethod
    def _check_custom(cls, values):
        kind, n = values.get("kind"), values.get("n")
        if kind == HeadKind.CUSTOM and (n is None or n < 1):
            raise ValueError("custom head needs a positive width")
        if kind != HeadKind.CUSTOM and n is not None:
            raise ValueError(f"{kind.value} head has a fixed width")
        return values

    @classmethod
    def parse(cls, text: str) -> "HeadSpec":
        """解析 `raf_db_7`、`affectnet_8_va`、`va_only_2` 或 `custom(n)`"""
        if match := _CUSTOM_HEAD.match(text.strip()):
            return cls(kind=HeadKind.CUSTOM, n=int(match.group(1)))
        return cls(kind=HeadKind(text.strip()))

    @property
    def n_classes(self) -> int:
        if self.kind == HeadKind.RAF_DB_7:
            return 7
        if self.kind == HeadKind.AFFECTNET_8_VA:
            return 8
        if self.kind == HeadKind.VA_ONLY_2:
            return 0
        return self.n  # type: ignore

    @property
    def has_va(self) -> bool:
        return self.kind in (HeadKind.AFFECTNET_8_VA, HeadKind.VA_ONLY_2)

    @property
    def width(self) -> int:
        return self.n_classes + (2 if self.has_va else 0)

    def __str__(self) -> str:
        if self.kind == HeadKind.CUSTOM:
            return f"custom({self.n})"
        return self.kind.value


# 损失配置
class LossWeights(BaseModel):
    """组合损失中 MSE / CCC / PCC 三项的随机权重"""

    alpha: float
    beta: float
    gamma: float

    @validator("alpha", "beta", "gamma")
    @classmethod
    def _positive(cls, v: float):
        if not v > 0:
            raise ValueError("loss weights must be strictly positive")
        return v

    @property
    def shares(self) -> Tuple[float, float, float]:
        total = self.alpha + self.beta + self.gamma
        return self.alpha / total, self.beta / total, self.gamma / total


class ClassWeights(BaseModel):
    """按类别频率得到的交叉熵权重"""

    values: List[float]

    @validator("values")
    @classmethod
    def _check_values(cls, v: List[float]):
        if not v:
            raise ValueError("class weights must not be empty")
        if any(not w > 0 for w in v):
            raise ValueError("class weights must be strictly positive")
        return v

    def __len__(self) -> int:
        return len(self.values)


class VaLossConfig(BaseModel):
    w1: float = Field(default=1.0, ge=0)
    """第一阶段 MSE 权重"""
    w2: float = Field(default=1.0, ge=0)
    """第二阶段 MSE 权重"""
    ccc_as_one_minus: bool = True
    """第二阶段 CCC 项取 1 − CCC"""


# 训练配置
class TrainConfig(BaseModel):
    batch_size: int = Field(default=64, ge=2)
    weight_decay: float = Field(default=1e-5, ge=0)
    max_epochs: int = Field(default=100, ge=0)
    patience: int = Field(default=3, ge=1)
    base_lr: float = Field(default=1e-6, gt=0)
    max_lr: float = Field(default=1e-4, gt=0)
    step_size: Optional[int] = Field(default=None, ge=1)
    """为 None 时在训练开始时取 每轮 batch 数 // 2"""
    scheduler_mode: Literal["triangular", "triangular2", "exp_range"] = "triangular"
    scheduler_gamma: float = Field(default=1.0, gt=0, le=1)
    """exp_range 模式下每步的衰减系数"""
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    hidden_width: int = Field(default=2048, ge=1)
    negative_slope: float = Field(default=0.01, ge=0)

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_lr(cls, values):
        if not values["base_lr"] < values["max_lr"]:
            raise ValueError("base_lr must be smaller than max_lr")
        return values

    def resolved_step_size(self, n_train: int) -> int:
        """每轮 batch 数的一半，至少为 1"""
        if self.step_size is not None:
            return self.step_size
        return max(1, (n_train // self.batch_size) // 2)


class EpochRecord(BaseModel):
    stage: int = 1
    epoch: int
    lr_min: float
    lr_max: float
    train_loss: float
    val_loss: float
    val_metrics: Dict[str, float] = Field(default_factory=dict)


# 融合
class FusionStrategy(BaseModel):
    kind: Literal["max", "min", "mean", "weighted"]
    w: Optional[float] = None
    """3D 一侧的权重，仅 weighted 使用"""

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_weight(cls, values):
        kind, w = values["kind"], values.get("w")
        if kind == "weighted":
            if w is None or not 0.0 <= w <= 1.0:
                raise ValueError("weighted fusion needs w in [0, 1]")
        elif w is not None:
            raise ValueError(f"{kind} fusion takes no weight")
        return values

    def __str__(self) -> str:
        return f"weighted(w={self.w})" if self.kind == "weighted" else self.kind


class SweepPoint(BaseModel):
    w: float
    value: float


class SweepResult(BaseModel):
    objective: str
    best_w: float
    best_value: float
    table: List[SweepPoint]


# 数据合成
class SynthSpec(BaseModel):
    n_samples: int = Field(default=1000, ge=1)
    n_classes: int = Field(default=8, ge=1)
    dim: int = Field(default=156, ge=1)
    kind: str = "emoca_short"
    label_space: Literal["raf7", "affect8"] = "affect8"
    separation: float = Field(default=6.0, ge=0)
    """类中心到原点的距离"""
    noise: float = Field(default=1.0, ge=0)
    with_va: bool = False
    va_noise: float = Field(default=0.05, ge=0)
    va_scale: float = Field(default=0.35, gt=0)
    """线性 VA 映射输出的标准差"""
    id_prefix: str = "s"

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_classes(cls, values):
        space_size = 7 if values["label_space"] == "raf7" else 8
        if values["n_classes"] > space_size:
            raise ValueError(
                f"{values['label_space']} holds {space_size} classes, "
                f"asked for {values['n_classes']}",
            )
        if values["n_classes"] > values["dim"]:
            raise ValueError("n_classes must not exceed dim")
        return values


# 评估报告
class ClassMetrics(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int


class AverageMetrics(BaseModel):
    precision: float
    recall: float
    f1: float


class ClassificationReport(BaseModel):
    accuracy: float
    per_class: List[ClassMetrics]
    weighted: AverageMetrics
    macro: AverageMetrics
    confusion: List[List[int]]
    n_samples: int


class DimensionMetrics(BaseModel):
    mse: float
    mae: float
    rmse: float
    ccc: float
    pcc: float
    sagr: float
    """符号一致率"""


class RegressionReport(BaseModel):
    valence: DimensionMetrics
    arousal: DimensionMetrics
    mean: DimensionMetrics
    n_samples: int


class MetricsReport(BaseModel):
    title: str = ""
    classification: Optional[ClassificationReport] = None
    regression: Optional[RegressionReport] = None


# 文件头部
class MlpArchitecture(BaseModel):
    model: Literal["mlp"] = "mlp"
    input_dim: int
    hidden_width: int
    head: str
    negative_slope: float
    dropout: Tuple[float, float]
    batch_norm: bool
    bn_eps: float
    bn_momentum: float


class IntermediateArchitecture(BaseModel):
    model: Literal["intermediate"] = "intermediate"
    dim_2d: int
    dim_3d: int
    proj_dim: int
    classifier: MlpArchitecture


class CheckpointMeta(BaseModel):
    epoch: int = 0
    best_val_loss: Optional[float] = None
    seed: int = 0


# 命令行运行配置
RUN_PATH_FIELDS = (
    "data",
    "val",
    "test",
    "features",
    "val_features",
    "test_features",
    "a",
    "b",
    "labels",
    "preds",
    "checkpoint",
    "asset",
    "params",
)
"""运行前必须存在的输入路径"""


class RunConfig(BaseModel):
    """一次命令行运行的完整配置，写入输出目录的 `config.json`"""

    command: str
    seed: int = Field(default=0, ge=0, lt=2**64)
    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    out: Optional[Path] = None

    data: Optional[Path] = None
    val: Optional[Path] = None
    test: Optional[Path] = None
    kind: Optional[str] = None
    head: Optional[str] = None
    two_stage: bool = False
    class_weighting: bool = True

    features: Optional[Path] = None
    val_features: Optional[Path] = None
    test_features: Optional[Path] = None
    proj_dim: int = Field(default=256, ge=1)

    a: Optional[Path] = None
    b: Optional[Path] = None
    labels: Optional[Path] = None
    preds: Optional[Path] = None
    checkpoint: Optional[Path] = None
    from_logits: bool = False
    strategy: Optional[FusionStrategy] = None
    grid: str = "0:1:0.05"
    objective: Optional[Literal["accuracy", "f1_macro", "ccc", "rmse"]] = None
    macro: Literal["all", "present"] = "all"

    gradcheck_input_dim: int = Field(default=12, ge=1)
    gradcheck_hidden: int = Field(default=16, ge=1)
    gradcheck_rows: int = Field(default=16, ge=2)
    gradcheck_h: float = 1e-5
    gradcheck_tolerance: float = Field(default=1e-5, gt=0)

    synth: SynthSpec = Field(default_factory=SynthSpec)
    n_val: int = Field(default=0, ge=0)
    n_test: int = Field(default=0, ge=0)
    toy_asset: Optional[Tuple[int, int, int]] = None

    asset: Optional[Path] = None
    params: Optional[Path] = None

    train: TrainConfig = Field(default_factory=TrainConfig)
    va_loss: VaLossConfig = Field(default_factory=VaLossConfig)
    report_formats: List[Literal["json", "txt"]] = ["json", "txt"]

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_paths(cls, values):
        for field in RUN_PATH_FIELDS:
            path = values.get(field)
            if path is not None and not path.exists():
                raise ValueError(f"--{field.replace('_', '-')} {path} does not exist")
        if values["train"].seed != values["seed"]:
            values["train"] = values["train"].copy(update={"seed": values["seed"]})
        return values


__all__ = [
    "HeadKind",
    "HeadSpec",
    "LossWeights",
    "ClassWeights",
    "VaLossConfig",
    "TrainConfig",
    "EpochRecord",
    "FusionStrategy",
    "SweepPoint",
    "SweepResult",
    "SynthSpec",
    "ClassMetrics",
    "AverageMetrics",
    "ClassificationReport",
    "DimensionMetrics",
    "RegressionReport",
    "MetricsReport",
    "MlpArchitecture",
    "IntermediateArchitecture",
    "CheckpointMeta",
    "RunConfig",
]
