import json
import re
import struct
from typing import Any, Dict, List, Sequence, Tuple

from .exception import FormatError

import numpy as np


def escape_tag(s: str) -> str:
    """用于记录带颜色日志时转义 `<tag>` 类型特殊标签

    参考: [loguru color 标签](https://loguru.readthedocs.io/en/stable/api/logger.html#color)

    参数:
        s: 需要转义的字符串
    """
    return re.sub(r"</?((?:[fb]g\s)?[^<>\s]*)>", r"\\\g<0>", s)


_PREFIX = struct.Struct("<HI")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def write_envelope(
    magic: bytes,
    version: int,
    header: Dict[str, Any],
    blocks: Sequence[Tuple[str, np.ndarray]],
) -> bytes:
    """打包二进制容器

    布局: magic, u16 版本号, u32 头部长度, JSON 头部, 按声明顺序排列的小端 64 位数据块。

    参数:
        magic: 文件魔数
        version: 格式版本
        header: 可 JSON 序列化的头部
        blocks: (名称, 数组) 列表，浮点写为 `<f8`，整数写为 `<i8`
    """
    descriptors: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    for name, array in blocks:
        code = "i8" if np.issubdtype(array.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(array, dtype=_DTYPES[code])
        descriptors.append({"name": name, "dtype": code, "shape": list(data.shape)})
        payloads.append(data.tobytes())
    head = json.dumps(
        {**header, "blocks": descriptors},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return b"".join([magic, _PREFIX.pack(version, len(head)), head, *payloads])


def read_envelope(
    raw: bytes,
    magic: bytes,
    supported_versions: Sequence[int],
) -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    """解析 `write_envelope` 写出的二进制容器

    参数:
        raw: 文件全部字节
        magic: 期望的魔数
        supported_versions: 支持的版本号

    返回:
        Tuple[int, Dict, Dict[str, np.ndarray]]: 版本号、头部与数据块
    """
    if raw[: len(magic)] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    offset = len(magic)
    if len(raw) < offset + _PREFIX.size:
        raise FormatError("truncated prefix", offset=len(raw))
    version, head_len = _PREFIX.unpack_from(raw, offset)
    if version not in supported_versions:
        raise FormatError(
            f"unsupported version {version}, supported: {list(supported_versions)}",
            offset=offset,
            supported_versions=list(supported_versions),
        )
    offset += _PREFIX.size
    if len(raw) < offset + head_len:
        raise FormatError("truncated header", offset=len(raw))
    try:
        header = json.loads(raw[offset : offset + head_len].decode())
        descriptors = header.pop("blocks")
    except (ValueError, KeyError) as e:
        raise FormatError(f"invalid header: {e}", offset=offset) from e
    offset += head_len
    blocks: Dict[str, np.ndarray] = {}
    for desc in descriptors:
        dtype = _DTYPES.get(desc.get("dtype"))
        if dtype is None:
            raise FormatError(f"unknown block dtype {desc.get('dtype')}", offset=offset)
        shape = tuple(int(s) for s in desc["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) < offset + size:
            raise FormatError(
                f"truncated block {desc['name']!r}",
                offset=len(raw),
                expected_end=offset + size,
            )
        blocks[desc["name"]] = (
            np.frombuffer(raw, dtype=dtype, count=size // dtype.itemsize, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += size
    if offset != len(raw):
        raise FormatError("trailing bytes after last block", offset=offset)
    return version, header, blocks
