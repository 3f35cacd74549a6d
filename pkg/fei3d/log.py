import sys
from typing import TYPE_CHECKING, Union

from .exception import ConfigurationError

import loguru

if TYPE_CHECKING:
    from loguru import Logger, Record

logger: "Logger" = loguru.logger

LEVEL_KEY = "fei3d_log_level"
_DEFAULT_LEVELNO = 20


def default_filter(record: "Record") -> bool:
    """按 `extra` 中的 `fei3d_log_level` 过滤日志，未配置时为 INFO"""
    return record["level"].no >= record["extra"].get(LEVEL_KEY, _DEFAULT_LEVELNO)


default_format: str = (
    "<g>{time:MM-DD HH:mm:ss.SSS}</g> "
    "[<lvl>{level: <7}</lvl>] "
    "<c><u>{name}</u></c> | "
    "{message}"
)
"""默认日志格式"""


def _log_patcher(record: "loguru.Record"):
    # fei3d.training -> training
    record["name"] = record["name"].rsplit(".", 1)[-1]  # type: ignore


def configure_logging(level: Union[str, int] = "INFO") -> None:
    """设置日志等级

    参数:
        level: 等级名或数值. 默认为 "INFO".
    """
    try:
        levelno = logger.level(level.upper()).no if isinstance(level, str) else level
    except ValueError as e:
        raise ConfigurationError(f"unknown log level {level!r}") from e
    logger.configure(extra={LEVEL_KEY: levelno}, patcher=_log_patcher)


logger.remove()
logger_id = logger.add(
    sys.stdout,
    level=0,
    diagnose=False,
    backtrace=False,
    filter=default_filter,
    format=default_format,
)
