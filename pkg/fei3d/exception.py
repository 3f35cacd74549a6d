from typing import Any, Dict, Optional


class Fei3dError(Exception):
    """fei3d 所有错误的基类"""

    code: str = "error"

    def __init__(self, message: str, **details: Any):
        self.message = message
        self.details: Dict[str, Any] = details
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        """转换为可写入 `error.json` 的字典"""
        return {
            "error": self.__class__.__name__,
            "code": self.code,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }

    def __repr__(self) -> str:
        extra = "".join(f", {k}={v!r}" for k, v in self.details.items())
        return f"<{self.__class__.__name__}: {self.message}{extra}>"

    def __str__(self):
        return self.__repr__()


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)


class ShapeError(Fei3dError):
    code = "shape"


class DomainError(Fei3dError):
    code = "domain"


class ConfigurationError(Fei3dError):
    code = "configuration"


class DataError(Fei3dError):
    code = "data"

    def __init__(
        self,
        message: str,
        index: Optional[int] = None,
        line: Optional[int] = None,
        **details: Any,
    ):
        if index is not None:
            details["index"] = index
        if line is not None:
            details["line"] = line
        super().__init__(message, **details)


class KindError(DataError):
    code = "kind"


class ParseError(DataError):
    code = "parse"


class RangeError(DataError):
    code = "range"


class SchemaError(DataError):
    code = "schema"


class NormalizationError(DataError):
    code = "normalization"


class AlignmentError(DataError):
    code = "alignment"


class BatchNormError(Fei3dError):
    """训练模式下 batch 只有一行，无法计算 batch 统计量"""

    code = "batchnorm"


class BatchSizeError(Fei3dError):
    code = "batch_size"


class ProtocolError(Fei3dError):
    code = "protocol"


class NumericalError(Fei3dError):
    code = "numerical"


class FormatError(Fei3dError):
    code = "format"

    def __init__(self, message: str, offset: int, **details: Any):
        self.offset = offset
        super().__init__(message, offset=offset, **details)


class UsageError(Fei3dError):
    code = "usage"


class WriteError(Fei3dError):
    code = "write"
