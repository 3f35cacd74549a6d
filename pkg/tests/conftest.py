from typing import Callable

from fei3d.data import ParamDataset, synth_generate
from fei3d.log import configure_logging
from fei3d.models import SynthSpec
from fei3d.numerics import RngState

import pytest


@pytest.fixture(autouse=True)
def _quiet_logging():
    # 命令行测试会把等级改回 --log-level 的值
    configure_logging("WARNING")


@pytest.fixture
def rng() -> RngState:
    return RngState(1234)


@pytest.fixture
def make_synth() -> Callable[..., ParamDataset]:
    """小规模合成数据集工厂，默认 12 维 raf7"""

    def _make(seed: int = 0, **overrides) -> ParamDataset:
        fields = {
            "n_samples": 64,
            "n_classes": 7,
            "dim": 12,
            "kind": "custom(12)",
            "label_space": "raf7",
        }
        fields.update(overrides)
        return synth_generate(SynthSpec(**fields), RngState(seed))

    return _make
