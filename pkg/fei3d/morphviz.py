"""线性可变形人脸模型解码与 OBJ 导出

顶点 = 平均网格 + 形状基·β + 表情基·ψ。基矩阵的行按顶点交错排列 (x0, y0, z0, x1, ...)。
不包含姿态相关的校正形状与蒙皮。
"""
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

from .exception import FormatError, ParseError, ShapeError, WriteError
from .log import logger
from .numerics import RngState
from .utils import read_envelope, write_envelope

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, root_validator

ASSET_MAGIC = b"FEIMM"
ASSET_VERSION = 1
REQUIRED_BLOCKS = ("mean", "shape_basis", "expr_basis", "triangles")


class MorphableAsset(BaseModel):
    """平均网格、形状基、表情基与三角形索引

    `extra` 保存格式预留的可选数据块(如姿态基、蒙皮权重)，读写时原样保留。
    """

    mean: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    triangles: np.ndarray
    extra: Dict[str, np.ndarray] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_dims(cls, values):
        mean = values["mean"]
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ShapeError(f"mean must be (V, 3), got {mean.shape}", field="mean")
        rows = 3 * mean.shape[0]
        for field in ("shape_basis", "expr_basis"):
            basis = values[field]
            if basis.ndim != 2 or basis.shape[0] != rows:
                raise ShapeError(
                    f"{field} must have 3V = {rows} rows, got {basis.shape}",
                    field=field,
                )
            if not np.all(np.isfinite(basis)):
                raise ShapeError(f"{field} has non-finite entries", field=field)
        triangles = values["triangles"]
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ShapeError(
                f"triangles must be (T, 3), got {triangles.shape}",
                field="triangles",
            )
        if triangles.size and (triangles.min() < 0 or triangles.max() >= mean.shape[0]):
            raise ShapeError(
                f"triangle index outside [0, {mean.shape[0]})",
                field="triangles",
            )
        values["triangles"] = np.asarray(triangles, dtype=np.int64)
        return values

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]


class MeshResult(BaseModel):
    vertices: np.ndarray
    triangles: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    @classmethod
    def _check_finite(cls, values):
        if not np.all(np.isfinite(values["vertices"])):
            raise ShapeError("mesh has non-finite vertex coordinates", field="vertices")
        return values


def save_asset(asset: MorphableAsset, path: Union[str, Path]) -> None:
    blocks = [
        ("mean", asset.mean),
        ("shape_basis", asset.shape_basis),
        ("expr_basis", asset.expr_basis),
        ("triangles", asset.triangles),
        *sorted(asset.extra.items()),
    ]
    header = {
        "n_vertices": asset.n_vertices,
        "n_shape": asset.n_shape,
        "n_expr": asset.n_expr,
        "optional": sorted(asset.extra),
    }
    try:
        raw = write_envelope(ASSET_MAGIC, ASSET_VERSION, header, blocks)
        Path(path).write_bytes(raw)
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


def load_asset(path: Union[str, Path]) -> MorphableAsset:
    """读取并校验可变形模型资源

    参数:
        path: FEIMM 文件路径

    返回:
        MorphableAsset: 校验后的资源
    """
    _, header, blocks = read_envelope(
        Path(path).read_bytes(),
        ASSET_MAGIC,
        (ASSET_VERSION,),
    )
    header_offset = len(ASSET_MAGIC) + 6
    if missing := [name for name in REQUIRED_BLOCKS if name not in blocks]:
        raise FormatError(
            f"asset lacks block {missing[0]!r}",
            offset=header_offset,
            field=missing[0],
        )
    declared = {
        "n_vertices": blocks["mean"].shape[0],
        "n_shape": blocks["shape_basis"].shape[-1],
        "n_expr": blocks["expr_basis"].shape[-1],
    }
    for field, found in declared.items():
        if header.get(field) != found:
            raise FormatError(
                f"header declares {field}={header.get(field)}, blocks hold {found}",
                offset=header_offset,
                field=field,
            )
    try:
        asset = MorphableAsset(
            **{name: blocks[name] for name in REQUIRED_BLOCKS},
            extra={k: v for k, v in blocks.items() if k not in REQUIRED_BLOCKS},
        )
    except ShapeError as e:
        raise FormatError(e.message, offset=header_offset, **e.details) from e
    logger.debug(
        f"Loaded asset with {asset.n_vertices} vertices, "
        f"{asset.n_shape} shape / {asset.n_expr} expression components",
    )
    return asset


def _padded(params: Optional[Sequence[float]], width: int, name: str) -> np.ndarray:
    values = np.zeros(width)
    if params is None:
        return values
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.size > width:
        raise ShapeError(
            f"{name} vector has {params.size} entries, basis has {width} columns",
            field=name,
        )
    values[: params.size] = params
    return values


def decode_mesh(
    asset: MorphableAsset,
    shape_params: Optional[Sequence[float]] = None,
    expr_params: Optional[Sequence[float]] = None,
) -> MeshResult:
    """由形状与表情参数解码网格，较短的参数向量末尾补零

    参数:
        asset: 可变形模型
        shape_params: 形状系数 β，长度不超过形状基列数
        expr_params: 表情系数 ψ，长度不超过表情基列数

    返回:
        MeshResult: (V × 3) 顶点与共享的三角形列表
    """
    beta = _padded(shape_params, asset.n_shape, "shape")
    psi = _padded(expr_params, asset.n_expr, "expression")
    offsets = asset.shape_basis @ beta + asset.expr_basis @ psi
    vertices = asset.mean + offsets.reshape(asset.n_vertices, 3)
    return MeshResult(vertices=vertices, triangles=asset.triangles)


def _canonical(value: float) -> str:
    if value == 0.0:
        return "0"
    return np.format_float_positional(value, unique=True, trim="-")


def obj_text(mesh: MeshResult) -> str:
    lines = [
        " ".join(["v", *(_canonical(c) for c in vertex)]) for vertex in mesh.vertices
    ]
    lines.extend(
        " ".join(["f", *(str(int(i) + 1) for i in tri)]) for tri in mesh.triangles
    )
    return "".join(line + "\n" for line in lines)


def export_obj(mesh: MeshResult, path: Union[str, Path]) -> None:
    """写出 Wavefront OBJ: 先 `v x y z`，后 1 起始的 `f a b c`"""
    try:
        Path(path).write_text(obj_text(mesh))
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


def parse_obj(path: Union[str, Path]) -> MeshResult:
    """读取 `v` 与三角形 `f` 行，忽略其余行"""
    vertices, faces = [], []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
                if len(vertices[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangles are supported")
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        except ValueError as e:
            raise ParseError(f"malformed OBJ line: {e}", line=line_no) from e
    triangles = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise ParseError("face references a missing vertex")
    return MeshResult(
        vertices=np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        triangles=triangles,
    )


def make_toy_asset(
    n_vertices: int,
    n_shape: int,
    n_expr: int,
    rng: RngState,
) -> MorphableAsset:
    """随机小资源，三角形按扇形连接顶点 0"""
    if n_vertices < 3:
        raise ShapeError("a mesh needs at least 3 vertices", field="n_vertices")
    rows = 3 * n_vertices
    triangles = np.array(
        [(0, i, i + 1) for i in range(1, n_vertices - 1)],
        dtype=np.int64,
    )
    return MorphableAsset(
        mean=rng.normal(size=(n_vertices, 3)),
        shape_basis=rng.normal(scale=0.1, size=(rows, n_shape)),
        expr_basis=rng.normal(scale=0.05, size=(rows, n_expr)),
        triangles=triangles,
    )


def load_param_rows(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """读取 `decode-mesh` 的参数文件: 一行 `shape` 系数、一行 `expr` 系数

    每行形如 `shape,0.1,0.2,...`，任一行可省略。
    """
    path = Path(path)
    shape, expr = np.zeros(0), np.zeros(0)
    lines = path.read_text().splitlines()
    if not lines:
        return shape, expr
    # 两行系数个数不同，列数取最长的一行
    width = max(line.count(",") + 1 for line in lines)
    try:
        frame = pd.read_csv(
            path,
            header=None,
            names=list(range(width)),
            index_col=0,
            dtype=str,
            skip_blank_lines=False,
            skipinitialspace=True,
        )
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed parameter file {path}: {e}") from e
    for line_no, (name, row) in enumerate(frame.iterrows(), start=1):
        if pd.isna(name):
            continue
        try:
            values = pd.to_numeric(row.dropna()).to_numpy(dtype=np.float64)
        except ValueError as e:
            raise ParseError(f"malformed coefficient: {e}", line=line_no) from e
        if name.strip() == "shape":
            shape = values
        elif name.strip() == "expr":
            expr = values
        else:
            raise ParseError(f"unknown row {name!r}", line=line_no)
    return shape, expr
