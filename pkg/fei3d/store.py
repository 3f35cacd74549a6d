from typing import Dict, Optional, TYPE_CHECKING

from .exception import ConfigurationError

if TYPE_CHECKING:
    from .handle import CommandHandler

_commands: Dict[str, "CommandHandler"] = {}


def get_command(name: Optional[str] = None) -> Optional["CommandHandler"]:
    """获取一个子命令处理器

    如果没有注册任何子命令，则返回 None。
    如果没有指定 name，则返回第一个注册的子命令。

    返回:
        Optional[CommandHandler]: 子命令处理器
    """
    if not _commands:
        return None
    if name is None:
        return _commands[list(_commands.keys())[0]]
    return _commands.get(name)


def get_commands() -> Dict[str, "CommandHandler"]:
    """获取所有子命令处理器"""
    return _commands


def store_command(handler: "CommandHandler") -> None:
    if handler.name in _commands:
        raise ConfigurationError(f"Command {handler.name} already registered")
    _commands[handler.name] = handler


__all__ = ["get_command", "get_commands", "store_command"]
