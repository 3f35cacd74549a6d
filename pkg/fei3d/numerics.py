"""稠密矩阵、确定性随机数与参数初始化

所有数值都以 float64 保存。随机数使用 numpy 的 PCG64 比特生成器，
同一 seed 在任何平台上都产生相同的序列。
"""
import math
from typing import List, Optional, Tuple

from .exception import DomainError, NumericalError, ShapeError
from .typing import Matrix

import numpy as np

DEFAULT_LEAKY_SLOPE = 0.01


def as_matrix(data, name: str = "matrix") -> Matrix:
    """转换为二维 float64 数组，并检查所有元素有限"""
    array = np.asarray(data, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")
    return check_finite(name, array)


def check_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))[0].tolist()
        raise NumericalError(f"{name} contains a non-finite value", position=bad)
    return array


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """矩阵乘法

    参数:
        a: (m × k) 矩阵
        b: (k × n) 矩阵

    返回:
        Matrix: (m × n) 乘积
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape} by {b.shape}",
            left=list(a.shape),
            right=list(b.shape),
        )
    return check_finite("matmul result", a @ b)


class RngState:
    """带种子的 PCG64 随机数状态

    并行使用时必须通过 `split` 派生独立的子状态，不能共享同一个实例。
    """

    def __init__(self, seed: int, _seed_seq: Optional[np.random.SeedSequence] = None):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._seed_seq = _seed_seq or np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seed_seq))

    def split(self, n: int) -> List["RngState"]:
        """派生 n 个互相独立的子状态"""
        return [
            RngState(self.seed, _seed_seq=child) for child in self._seed_seq.spawn(n)
        ]

    def uniform(self, lo: float, hi: float, size=None):
        return self.generator.uniform(lo, hi, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"


def rng_uniform(state: RngState, lo: float, hi: float) -> float:
    """从 [lo, hi) 均匀采样一个实数，并推进状态"""
    if not lo < hi:
        raise DomainError(f"empty interval [{lo}, {hi})", lo=lo, hi=hi)
    value = float(state.uniform(lo, hi))
    # 浮点舍入可能得到 hi
    return value if value < hi else lo


def kaiming_std(fan_in: int, negative_slope: float = DEFAULT_LEAKY_SLOPE) -> float:
    """Kaiming 均匀初始化对应的理论标准差"""
    gain = math.sqrt(2.0 / (1.0 + negative_slope**2))
    return gain / math.sqrt(fan_in)


def init_linear_params(
    fan_in: int,
    fan_out: int,
    rng: RngState,
    negative_slope: float = DEFAULT_LEAKY_SLOPE,
) -> Tuple[Matrix, Matrix]:
    """初始化全连接层参数

    权重服从 U(-b, b)，b = gain·√(3/fan_in)，gain = √(2/(1+s²))，s 为 Leaky ReLU 负斜率。

    参数:
        fan_in: 输入维度
        fan_out: 输出维度
        rng: 随机数状态

    返回:
        Tuple[Matrix, Matrix]: (fan_out × fan_in) 权重与 (fan_out × 1) 全零偏置
    """
    if fan_in < 1 or fan_out < 1:
        raise DomainError(
            f"layer dimensions must be positive, got {fan_in}→{fan_out}",
        )
    bound = kaiming_std(fan_in, negative_slope) * math.sqrt(3.0)
    weights = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    return weights, np.zeros((fan_out, 1))
