"""
点群ファイルの読み書き（XYZ / PLY）
"""

import io
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from plyfile import (
    PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError, PlyListProperty, PlyParseError,
)

from point_cloud import PointCloud
from pu_exceptions import PointCloudFormatError, PointCloudParseError

logger = logging.getLogger('mpu_tta.io')

PathLike = Union[str, Path]

VERTEX_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
TEXT_FORMAT = "%.17g"


def read_point_cloud(path: PathLike) -> PointCloud:
    """拡張子（.xyz / .ply）で形式を判定して読み込む"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path)
    if suffix == ".ply":
        return read_ply(path)
    raise PointCloudFormatError(f"unsupported point cloud extension '{suffix}' ({path})")


def write_point_cloud(pc: PointCloud, path: PathLike, binary: bool = True) -> Path:
    """拡張子で形式を判定して書き出す（PLYはデフォルトでバイナリ）"""
    path = Path(path)
    suffix = path.suffix.lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if suffix == ".xyz":
        return write_xyz(pc, path)
    if suffix == ".ply":
        return write_ply(pc, path, binary=binary)
    raise PointCloudFormatError(f"unsupported point cloud extension '{suffix}' ({path})")


# ---------------------------------------------------------------------------
# XYZ
# ---------------------------------------------------------------------------

def parse_xyz(text: str, source: Optional[str] = None) -> PointCloud:
    """1行1点、空白区切り3フィールド。'#'以降はコメント"""
    points: List[Tuple[float, float, float]] = []
    for line_number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise PointCloudParseError(f"expected 3 coordinates, got {len(fields)}", source, line_number)
        try:
            points.append((float(fields[0]), float(fields[1]), float(fields[2])))
        except ValueError as exc:
            raise PointCloudParseError(f"invalid coordinate: {exc}", source, line_number) from exc
    if not points:
        raise PointCloudParseError("no points found", source)
    return PointCloud(np.array(points, dtype=np.float64))


def read_xyz(path: PathLike) -> PointCloud:
    path = Path(path)
    pc = parse_xyz(path.read_text(encoding="utf-8"), source=str(path))
    logger.debug(f"📂 [XYZ] 読み込み: {path} ({pc.count}点)")
    return pc


def write_xyz(pc: PointCloud, path: PathLike) -> Path:
    path = Path(path)
    np.savetxt(path, pc.points, fmt=TEXT_FORMAT, delimiter=" ")
    return path


# ---------------------------------------------------------------------------
# PLY（plyfile）
# ---------------------------------------------------------------------------

def _ascii_line_number(data: bytes, element_name: str, row: Optional[int]) -> Optional[int]:
    """
    ASCII PLYで element_name の row 行目（0始まり）がファイルの何行目か

    バイナリ形式や行が特定できない場合は None
    """
    if row is None:
        return None
    header, found, _ = data.partition(b"end_header")
    if not found or b"format ascii" not in header:
        return None
    header_lines = header.count(b"\n") + 1
    preceding = 0
    for raw in header.split(b"\n"):
        tokens = raw.decode("ascii", errors="replace").split()
        if len(tokens) != 3 or tokens[0] != "element":
            continue
        if tokens[1] == element_name:
            return header_lines + preceding + row + 1
        preceding += int(tokens[2]) if tokens[2].isdigit() else 0
    return None


def _vertex_element(ply: PlyData, source: str) -> PlyElement:
    """x, y, z が浮動小数のスカラーであるvertex要素を探す"""
    for element in ply.elements:
        if element.name != "vertex":
            continue
        if any(isinstance(prop, PlyListProperty) for prop in element.properties):
            raise PointCloudFormatError(f"{source}: list properties in vertex element")
        names = element.data.dtype.names or ()
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise PointCloudFormatError(f"{source}: vertex element has no '{axis}' property")
            if element.data.dtype[axis].kind != "f":
                raise PointCloudFormatError(
                    f"{source}: unsupported type '{element.data.dtype[axis]}' for vertex '{axis}'"
                )
        return element
    raise PointCloudFormatError(f"{source}: no vertex element")


def parse_ply(data: bytes, source: str = "<bytes>") -> PointCloud:
    """ASCII / バイナリ（両エンディアン）のPLYから頂点位置だけを読む"""
    try:
        ply = PlyData.read(io.BytesIO(data), mmap=False)
    except PlyHeaderParseError as exc:
        raise PointCloudParseError(str(exc), source, exc.line) from exc
    except PlyElementParseError as exc:
        name = exc.element.name if exc.element is not None else ""
        raise PointCloudParseError(str(exc), source, _ascii_line_number(data, name, exc.row)) from exc
    except (PlyParseError, UnicodeDecodeError) as exc:
        raise PointCloudParseError(str(exc), source) from exc

    vertex = _vertex_element(ply, source)
    if vertex.count == 0:
        raise PointCloudParseError("vertex element is empty", source)
    return PointCloud(np.column_stack([vertex.data[axis].astype(np.float64) for axis in ("x", "y", "z")]))


def read_ply(path: PathLike) -> PointCloud:
    path = Path(path)
    pc = parse_ply(path.read_bytes(), source=str(path))
    logger.debug(f"📂 [PLY] 読み込み: {path} ({pc.count}点)")
    return pc


def write_ply(pc: PointCloud, path: PathLike, binary: bool = True) -> Path:
    """double型のx, y, zを持つPLYを書き出す（バイナリはリトルエンディアン）"""
    path = Path(path)
    records = np.empty(pc.count, dtype=VERTEX_DTYPE)
    for column, axis in enumerate(("x", "y", "z")):
        records[axis] = pc.points[:, column]
    element = PlyElement.describe(records, "vertex")
    ply = PlyData([element], text=not binary, byte_order="<", comments=["generated by MPU-TTA"])
    ply.write(str(path))
    return path
