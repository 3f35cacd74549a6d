from typing import Any, Callable, Literal, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .models import RunConfig

Matrix = np.ndarray
"""float64 二维数组"""
Labels = np.ndarray
"""int64 一维类别索引"""

Mode = Literal["train", "eval"]

T_Command = Callable[["RunConfig"], Any]
