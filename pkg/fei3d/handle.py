from typing import Any, Dict, Tuple

from .exception import Fei3dError
from .log import logger
from .models import RunConfig
from .typing import T_Command
from .utils import escape_tag

from pydantic import BaseModel


class CommandFailed(Fei3dError):
    """子命令抛出了非 fei3d 的异常"""

    code = "internal"


class CommandHandler(BaseModel):
    name: str
    func: T_Command
    help: str = ""
    required: Tuple[str, ...] = ()
    """执行前必须给出的配置项"""

    def __str__(self) -> str:
        return f"Command(name={self.name}, func={self.func.__name__})"

    def __repr__(self) -> str:
        return super().__str__()

    def missing(self, cfg: RunConfig) -> Tuple[str, ...]:
        """cfg 中缺失的必需配置项"""
        return tuple(field for field in self.required if getattr(cfg, field) is None)

    def run(self, cfg: RunConfig) -> Dict[str, Any]:
        """运行子命令，返回写入 `metrics.json` 的内容"""
        logger.opt(colors=True).info(f"Run will be handled by <y>{self}</y>")
        try:
            result = self.func(cfg)
        except Fei3dError as e:
            logger.opt(colors=True).error(
                f"<y>{self}</y> failed: {escape_tag(repr(e))}",
            )
            raise
        except Exception as e:
            logger.opt(colors=True, exception=e).error(
                f"Unexpected error when running <y>{self}</y>",
            )
            raise CommandFailed(f"{type(e).__name__}: {e}", command=self.name) from e
        logger.opt(colors=True).success(f"<y>{self}</y> finished")
        return result or {}
