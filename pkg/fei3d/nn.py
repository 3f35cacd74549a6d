"""全连接层、BatchNorm、Leaky ReLU、Dropout 与分类 MLP

反向传播针对这几种层手写，不做任意计算图的自动微分。
"""
from abc import ABC, abstractmethod
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

from .exception import BatchNormError, ConfigurationError, ProtocolError, ShapeError
from .log import logger
from .models import HeadSpec, MlpArchitecture
from .numerics import (
    as_matrix,
    check_finite,
    DEFAULT_LEAKY_SLOPE,
    init_linear_params,
    matmul,
    RngState,
)
from .typing import Matrix, Mode

import numpy as np
from pydantic import BaseModel

DEFAULT_HIDDEN_WIDTH = 2048
DEFAULT_DROPOUT = (0.5, 0.4)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
N_HIDDEN = 4
ZERO_GRAD = 1e-9
GRAD_FLOOR = 1e-4

NamedTensor = Tuple[str, np.ndarray]
LossFn = Callable[[Matrix, object], Tuple[float, Matrix]]


class Layer(ABC):
    @abstractmethod
    def forward(self, x: Matrix, train: bool) -> Matrix:
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: Matrix) -> Matrix:
        raise NotImplementedError

    def parameters(self) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        """(名称, 参数, 梯度) 列表"""
        return []

    def buffers(self) -> List[NamedTensor]:
        return []

    def zero_grad(self) -> None:
        for _, _, grad in self.parameters():
            grad.fill(0.0)


class LinearLayer(Layer):
    def __init__(
        self,
        fan_in: int,
        fan_out: int,
        rng: RngState,
        negative_slope: float = DEFAULT_LEAKY_SLOPE,
    ):
        self.weights, self.bias = init_linear_params(
            fan_in,
            fan_out,
            rng,
            negative_slope,
        )
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._input: Optional[Matrix] = None

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: Matrix, train: bool) -> Matrix:
        if x.shape[1] != self.fan_in:
            raise ShapeError(
                f"linear layer expects {self.fan_in} inputs, got {x.shape[1]}",
            )
        if train:
            self._input = x
        return matmul(x, self.weights.T) + self.bias[:, 0]

    def backward(self, grad: Matrix) -> Matrix:
        self.grad_weights[...] = matmul(grad.T, self._input)
        self.grad_bias[...] = grad.sum(axis=0).reshape(-1, 1)
        return matmul(grad, self.weights)

    def parameters(self):
        return [
            ("weights", self.weights, self.grad_weights),
            ("bias", self.bias, self.grad_bias),
        ]

    def __repr__(self) -> str:
        return f"Linear({self.fan_in}→{self.fan_out})"


class BatchNormLayer(Layer):
    def __init__(
        self,
        n_features: int,
        momentum: float = BN_MOMENTUM,
        epsilon: float = BN_EPS,
    ):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"momentum must be in (0, 1), got {momentum}")
        if not epsilon > 0.0:
            raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(n_features)
        self.beta = np.zeros(n_features)
        self.grad_gamma = np.zeros(n_features)
        self.grad_beta = np.zeros(n_features)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self._x_hat: Optional[Matrix] = None
        self._inv_std: Optional[np.ndarray] = None

    def forward(self, x: Matrix, train: bool) -> Matrix:
        if not train:
            x_hat = (x - self.running_mean) / np.sqrt(self.running_var + self.epsilon)
            return self.gamma * x_hat + self.beta
        n = x.shape[0]
        if n < 2:
            raise BatchNormError(
                "batch normalization needs at least 2 rows in train mode",
                rows=n,
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean) * inv_std
        self._x_hat, self._inv_std = x_hat, inv_std
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mean
        self.running_var = (1.0 - m) * self.running_var + m * var * n / (n - 1)
        return self.gamma * x_hat + self.beta

    def backward(self, grad: Matrix) -> Matrix:
        x_hat, inv_std = self._x_hat, self._inv_std
        n = grad.shape[0]
        self.grad_gamma[...] = (grad * x_hat).sum(axis=0)
        self.grad_beta[...] = grad.sum(axis=0)
        d_x_hat = grad * self.gamma
        return (inv_std / n) * (
            n * d_x_hat
            - d_x_hat.sum(axis=0)
            - x_hat * (d_x_hat * x_hat).sum(axis=0)
        )

    def parameters(self):
        return [
            ("gamma", self.gamma, self.grad_gamma),
            ("beta", self.beta, self.grad_beta),
        ]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __repr__(self) -> str:
        return f"BatchNorm({self.gamma.shape[0]})"


class LeakyReLU(Layer):
    def __init__(self, negative_slope: float = DEFAULT_LEAKY_SLOPE):
        self.negative_slope = negative_slope
        self._input: Optional[Matrix] = None

    def forward(self, x: Matrix, train: bool) -> Matrix:
        if train:
            self._input = x
        return np.where(x >= 0, x, self.negative_slope * x)

    def backward(self, grad: Matrix) -> Matrix:
        return grad * np.where(self._input >= 0, 1.0, self.negative_slope)

    def __repr__(self) -> str:
        return f"LeakyReLU({self.negative_slope})"


class DropoutLayer(Layer):
    """反向缩放的 Dropout，eval 模式下为恒等映射"""

    def __init__(self, rate: float, rng: Optional[RngState] = None):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.mask: Optional[Matrix] = None

    def forward(self, x: Matrix, train: bool) -> Matrix:
        if not train:
            return x
        if self.rate == 0.0:
            self.mask = None
            return x
        if self.rng is None:
            raise ProtocolError("dropout layer has no random state")
        keep = 1.0 - self.rate
        self.mask = (self.rng.random(x.shape) < keep) / keep
        return x * self.mask

    def backward(self, grad: Matrix) -> Matrix:
        return grad if self.mask is None else grad * self.mask

    def __repr__(self) -> str:
        return f"Dropout({self.rate})"


class Model(ABC):
    """可训练模型的公共接口: 参数遍历、状态字典、缓存协议"""

    head: HeadSpec
    input_dim: int

    def __init__(self):
        self._cached = False
        self._output_shape: Optional[Tuple[int, int]] = None

    @abstractmethod
    def named_layers(self) -> List[Tuple[str, Layer]]:
        raise NotImplementedError

    @abstractmethod
    def _forward_layers(self, batch: Matrix, train: bool) -> Matrix:
        raise NotImplementedError

    @abstractmethod
    def _backward_layers(self, grad_output: Matrix) -> Matrix:
        raise NotImplementedError

    @abstractmethod
    def architecture(self) -> BaseModel:
        raise NotImplementedError

    def forward(self, batch: Matrix, mode: Mode = "eval") -> Matrix:
        """前向传播

        参数:
            batch: (N × input_dim) 输入
            mode: "train" 时使用 batch 统计量与 dropout，并缓存中间结果

        返回:
            Matrix: (N × head 宽度) 原始输出
        """
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected a batch with {self.input_dim} columns, got {batch.shape}",
            )
        train = mode == "train"
        self._cached = False
        output = check_finite("model output", self._forward_layers(batch, train))
        if train:
            self._cached = True
            self._output_shape = output.shape
        return output

    def backprop(self, grad_output: Matrix) -> Matrix:
        """反向传播，填充每层梯度

        参数:
            grad_output: 损失对输出的梯度，形状与最近一次 train 前向输出一致

        返回:
            Matrix: 损失对输入 batch 的梯度
        """
        if not self._cached:
            raise ProtocolError("backprop needs a preceding train-mode forward pass")
        if grad_output.shape != self._output_shape:
            raise ShapeError(
                f"grad_output shape {grad_output.shape} does not match "
                f"forward output {self._output_shape}",
            )
        return self._backward_layers(grad_output)

    def predict(
        self,
        batch: Matrix,
        threads: int = 1,
        chunk_rows: int = 1024,
    ) -> Matrix:
        """eval 模式推理，按行分块并行；一维输入视为单个样本"""
        batch = as_matrix(batch, "batch")
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected a batch with {self.input_dim} columns, got {batch.shape}",
            )
        chunks = [
            batch[start : start + chunk_rows]
            for start in range(0, batch.shape[0], chunk_rows)
        ] or [batch]
        if threads <= 1 or len(chunks) == 1:
            outputs = [self._forward_layers(chunk, False) for chunk in chunks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outputs = list(
                    pool.map(lambda chunk: self._forward_layers(chunk, False), chunks),
                )
        return check_finite("model output", np.concatenate(outputs, axis=0))

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for prefix, layer in self.named_layers():
            for name, param, grad in layer.parameters():
                yield f"{prefix}.{name}", param, grad

    def named_buffers(self) -> Iterator[NamedTensor]:
        for prefix, layer in self.named_layers():
            for name, buf in layer.buffers():
                yield f"{prefix}.{name}", buf

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """参数与 BatchNorm 运行统计量的拷贝，顺序固定"""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, param, _ in self.named_parameters():
            state[name] = param.copy()
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set()
        for prefix, layer in self.named_layers():
            for name, param, _ in layer.parameters():
                key = f"{prefix}.{name}"
                expected.add(key)
                _assign(param, state, key)
            for name, _ in layer.buffers():
                key = f"{prefix}.{name}"
                expected.add(key)
                value = state.get(key)
                if value is None or value.shape != getattr(layer, name).shape:
                    raise ShapeError(f"state entry {key!r} missing or misshaped")
                # 运行统计量在前向时整体替换，这里同样整体赋值
                setattr(layer, name, np.array(value, dtype=np.float64))
        if unknown := set(state) - expected:
            raise ShapeError(f"unexpected state entries: {sorted(unknown)}")

    def set_rng(self, rng: RngState) -> None:
        """替换 dropout 使用的随机数状态"""
        for _, layer in self.named_layers():
            if isinstance(layer, DropoutLayer):
                layer.rng = rng

    def dropout_layers(self) -> List[DropoutLayer]:
        return [
            layer for _, layer in self.named_layers() if isinstance(layer, DropoutLayer)
        ]

    def kink_margin(self, batch: Matrix) -> float:
        """train 前向(无 dropout)时所有 Leaky ReLU 输入到 0 的最小距离"""
        snapshot = self.state_dict()
        rates = [layer.rate for layer in self.dropout_layers()]
        try:
            for layer in self.dropout_layers():
                layer.rate = 0.0
            self.forward(batch, "train")
            return min(
                float(np.min(np.abs(layer._input)))
                for _, layer in self.named_layers()
                if isinstance(layer, LeakyReLU)
            )
        finally:
            for layer, rate in zip(self.dropout_layers(), rates):
                layer.rate = rate
            self.load_state_dict(snapshot)
            self._cached = False


def _assign(target: np.ndarray, state: Dict[str, np.ndarray], key: str) -> None:
    value = state.get(key)
    if value is None or value.shape != target.shape:
        raise ShapeError(f"state entry {key!r} missing or misshaped")
    np.copyto(target, value)


class MlpModel(Model):
    """输入 → 4 个全连接块 → 输出头

    块 i: Linear → BatchNorm → LeakyReLU，前两个块后接 Dropout(0.5) / Dropout(0.4)。
    """

    def __init__(
        self,
        input_dim: int,
        head: HeadSpec,
        rng: RngState,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH,
        negative_slope: float = DEFAULT_LEAKY_SLOPE,
        dropout: Tuple[float, float] = DEFAULT_DROPOUT,
        batch_norm: bool = True,
        bn_eps: float = BN_EPS,
        bn_momentum: float = BN_MOMENTUM,
    ):
        super().__init__()
        if input_dim < 1 or hidden_width < 1:
            raise ConfigurationError(
                f"dimensions must be positive, got input {input_dim}, "
                f"hidden {hidden_width}",
            )
        init_rng, dropout_rng = rng.split(2)
        self.input_dim = input_dim
        self.hidden_width = hidden_width
        self.negative_slope = negative_slope
        self.dropout = tuple(dropout)
        self.batch_norm = batch_norm
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.head = head
        self.trunk: List[Layer] = []
        fan_in = input_dim
        for block in range(N_HIDDEN):
            self.trunk.append(
                LinearLayer(fan_in, hidden_width, init_rng, negative_slope),
            )
            if batch_norm:
                self.trunk.append(BatchNormLayer(hidden_width, bn_momentum, bn_eps))
            self.trunk.append(LeakyReLU(negative_slope))
            if block < len(self.dropout):
                self.trunk.append(DropoutLayer(self.dropout[block], dropout_rng))
            fan_in = hidden_width
        self.output = LinearLayer(hidden_width, head.width, init_rng, negative_slope)

    def named_layers(self) -> List[Tuple[str, Layer]]:
        return [
            *((f"trunk.{i}", layer) for i, layer in enumerate(self.trunk)),
            ("output", self.output),
        ]

    def _forward_layers(self, batch: Matrix, train: bool) -> Matrix:
        x = batch
        for layer in self.trunk:
            x = layer.forward(x, train)
        return self.output.forward(x, train)

    def _backward_layers(self, grad_output: Matrix) -> Matrix:
        grad = self.output.backward(grad_output)
        for layer in reversed(self.trunk):
            grad = layer.backward(grad)
        return grad

    def replace_head(self, head: HeadSpec, rng: RngState) -> None:
        """换上新初始化的输出头，保留主干"""
        self.head = head
        self.output = LinearLayer(
            self.hidden_width,
            head.width,
            rng,
            self.negative_slope,
        )
        self._cached = False
        logger.debug(f"Replaced output head with {head} ({head.width} outputs)")

    def layer_widths(self) -> List[int]:
        widths = [self.input_dim]
        widths.extend(
            layer.fan_out for layer in self.trunk if isinstance(layer, LinearLayer)
        )
        widths.append(self.output.fan_out)
        return widths

    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(
            input_dim=self.input_dim,
            hidden_width=self.hidden_width,
            head=str(self.head),
            negative_slope=self.negative_slope,
            dropout=self.dropout,
            batch_norm=self.batch_norm,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
        )

    @classmethod
    def from_architecture(cls, arch: MlpArchitecture, rng: RngState) -> "MlpModel":
        return cls(
            input_dim=arch.input_dim,
            head=HeadSpec.parse(arch.head),
            rng=rng,
            hidden_width=arch.hidden_width,
            negative_slope=arch.negative_slope,
            dropout=arch.dropout,
            batch_norm=arch.batch_norm,
            bn_eps=arch.bn_eps,
            bn_momentum=arch.bn_momentum,
        )

    def __repr__(self) -> str:
        chain = "→".join(str(w) for w in self.layer_widths())
        return f"MlpModel({chain}, head={self.head})"


def build_classifier(
    input_dim: int,
    head_kind: Union[str, HeadSpec],
    rng: RngState,
    hidden_width: int = DEFAULT_HIDDEN_WIDTH,
    **kwargs,
) -> MlpModel:
    """构建表情分类器

    参数:
        input_dim: 3D 参数向量维度
        head_kind: 输出头，`raf_db_7`、`affectnet_8_va`、`va_only_2` 或 `custom(n)`
        rng: 随机数状态
        hidden_width: 隐藏层宽度. 默认为 2048.

    返回:
        MlpModel: 未训练的模型
    """
    if isinstance(head_kind, str):
        try:
            head_kind = HeadSpec.parse(head_kind)
        except ValueError as e:
            raise ConfigurationError(f"unknown head kind {head_kind!r}") from e
    if input_dim < 1:
        raise ConfigurationError(f"input_dim must be positive, got {input_dim}")
    return MlpModel(input_dim, head_kind, rng, hidden_width=hidden_width, **kwargs)


def mlp_forward(model: Model, batch: Matrix, mode: Mode) -> Matrix:
    return model.forward(batch, mode)


def mlp_backprop(model: Model, grad_output: Matrix) -> Dict[str, np.ndarray]:
    """反向传播并返回所有参数梯度的拷贝，`input` 键为输入梯度"""
    grad_input = model.backprop(grad_output)
    grads = {name: grad.copy() for name, _, grad in model.named_parameters()}
    grads["input"] = grad_input
    return grads


def _coordinate_error(analytic: float, numeric: float) -> float:
    diff = abs(analytic - numeric)
    if max(abs(analytic), abs(numeric)) <= ZERO_GRAD:
        return diff
    return diff / max(abs(analytic) + abs(numeric), GRAD_FLOOR)


def grad_check(
    model: Model,
    loss_fn: LossFn,
    batch: Matrix,
    targets: object,
    h: float = 1e-5,
) -> float:
    """用中心差分校验解析梯度

    每个坐标的误差为相对误差 |a − n| / max(|a| + |n|, GRAD_FLOOR)。
    |a| 与 |n| 都不超过 ZERO_GRAD 时该坐标视为零梯度，误差取绝对差。
    dropout 在校验期间关闭，BatchNorm 运行统计量在结束后恢复。

    参数:
        model: 待校验模型
        loss_fn: `loss_fn(outputs, targets) -> (loss, grad_outputs)`
        batch: 输入，需远离 Leaky ReLU 拐点
        targets: 传给 loss_fn 的目标
        h: 差分步长，取值 [1e-7, 1e-3]

    返回:
        float: 所有参数坐标上的最大误差
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"step h must be within [1e-7, 1e-3], got {h}")
    snapshot = model.state_dict()
    rates = [layer.rate for layer in model.dropout_layers()]
    for layer in model.dropout_layers():
        layer.rate = 0.0
    try:
        margin = model.kink_margin(batch)
        if margin < 10 * h:
            logger.warning(
                f"Batch lies within {margin:.2e} of a Leaky ReLU kink; "
                "finite differences may disagree there",
            )
        outputs = model.forward(batch, "train")
        _, grad_out = loss_fn(outputs, targets)
        model.backprop(grad_out)
        analytic = {name: grad.copy() for name, _, grad in model.named_parameters()}

        def loss_at() -> float:
            value, _ = loss_fn(model.forward(batch, "train"), targets)
            return value

        worst = 0.0
        for name, param, _ in model.named_parameters():
            flat = param.reshape(-1)
            expected = analytic[name].reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = loss_at()
                flat[i] = original - h
                minus = loss_at()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                worst = max(worst, _coordinate_error(expected[i], numeric))
        logger.debug(f"Gradient check finished, max error {worst:.3e}")
        return worst
    finally:
        for layer, rate in zip(model.dropout_layers(), rates):
            layer.rate = rate
        model.load_state_dict(snapshot)
        model._cached = False
