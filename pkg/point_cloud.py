"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

点群の表現・正規化・合成形状生成・ノイズ付加
他の全モジュールが使う基本ジオメトリ
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from pu_exceptions import DegenerateInputError, ParameterError

logger = logging.getLogger("mpu_tta.geometry")

# 合成形状ファミリー（ShapeNetの代替）
FAMILIES = ("sphere", "torus", "superellipsoid", "bump_plane", "cylinder")

# ファミリーごとのデフォルトパラメータ
DEFAULT_PARAMETERS: Dict[str, Dict[str, float]] = {
    "sphere": {"radius": 0.5},
    "torus": {"major_radius": 0.35, "minor_radius": 0.15},
    "superellipsoid": {"a": 0.5, "b": 0.4, "c": 0.3, "e1": 0.5, "e2": 0.5},
    "bump_plane": {"height": 0.4, "width": 0.15},
    "cylinder": {"radius": 0.35, "height": 0.9},
}

MAX_NOISE_LEVEL = 0.1


@dataclass(frozen=True)
class PointCloud:
    """N×3の点群（倍精度）"""
    points: np.ndarray
    label: Optional[str] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ParameterError(f"points must have shape (N, 3), got {points.shape}")
        if points.shape[0] < 1:
            raise ParameterError("point cloud must contain at least one point")
        if not np.all(np.isfinite(points)):
            raise ParameterError("point cloud contains non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """ラベルを保ったまま座標だけ差し替える"""
        return PointCloud(points, label=self.label)


@dataclass(frozen=True)
class BoundingBox:
    """軸平行バウンディングボックス"""
    min_corner: np.ndarray
    max_corner: np.ndarray
    diagonal: float

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0


@dataclass(frozen=True)
class ShapeSpec:
    """合成形状の指定（ファミリー + パラメータ + シード）"""
    family: str
    parameters: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def resolved_parameters(self) -> Dict[str, float]:
        """デフォルト値を補ったパラメータを返す"""
        if self.family not in DEFAULT_PARAMETERS:
            raise ParameterError(f"unknown shape family '{self.family}', expected one of {FAMILIES}")
        params = dict(DEFAULT_PARAMETERS[self.family])
        unknown = set(self.parameters) - set(params)
        if unknown:
            raise ParameterError(f"{self.family}: unknown parameters {sorted(unknown)}")
        params.update({k: float(v) for k, v in self.parameters.items()})
        return params

    def validate(self) -> Dict[str, float]:
        """パラメータ範囲を検証して解決済みパラメータを返す"""
        p = self.resolved_parameters()
        family = self.family
        if family == "sphere":
            _check_range(family, "radius", p["radius"], 0.0, 0.5)
        elif family == "torus":
            _check_range(family, "major_radius", p["major_radius"], 0.0, 0.5)
            _check_range(family, "minor_radius", p["minor_radius"], 0.0, 0.5)
            if p["minor_radius"] >= p["major_radius"]:
                raise ParameterError("torus: minor_radius must be smaller than major_radius")
            if p["major_radius"] + p["minor_radius"] > 0.5:
                raise ParameterError("torus: major_radius + minor_radius must not exceed 0.5")
        elif family == "superellipsoid":
            for axis in ("a", "b", "c"):
                _check_range(family, axis, p[axis], 0.0, 0.5)
            for exponent in ("e1", "e2"):
                _check_range(family, exponent, p[exponent], 0.1, 4.0, low_inclusive=True)
        elif family == "bump_plane":
            _check_range(family, "height", p["height"], 0.0, 0.5, low_inclusive=True)
            _check_range(family, "width", p["width"], 0.02, 0.5, low_inclusive=True)
        elif family == "cylinder":
            _check_range(family, "radius", p["radius"], 0.0, 0.5)
            _check_range(family, "height", p["height"], 0.0, 1.0)
        return p

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "parameters": dict(self.parameters), "seed": self.seed}


def _check_range(family: str, name: str, value: float, low: float, high: float,
                 low_inclusive: bool = False) -> None:
    ok_low = value >= low if low_inclusive else value > low
    if not (ok_low and value <= high and math.isfinite(value)):
        bracket = "[" if low_inclusive else "("
        raise ParameterError(f"{family}: {name}={value} outside {bracket}{low}, {high}]")


def generate_shape(spec: ShapeSpec, n: int) -> PointCloud:
    """
    パラメトリック曲面上にn点をサンプリングする

    Args:
        spec: 形状指定
        n: 点数（8以上）

    Returns:
        原点中心・単位立方体内の点群（シードに対して決定的）
    """
    if n < 8:
        raise ParameterError(f"generate_shape requires n >= 8, got {n}")
    p = spec.validate()
    rng = np.random.default_rng(spec.seed)
    family = spec.family

    if family == "sphere":
        directions = rng.standard_normal((n, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        points = p["radius"] * directions
    elif family == "torus":
        points = _sample_torus(rng, n, p["major_radius"], p["minor_radius"])
    elif family == "superellipsoid":
        points = _sample_superellipsoid(rng, n, p)
    elif family == "bump_plane":
        xy = rng.uniform(-0.5, 0.5, size=(n, 2))
        z = bump_height(xy[:, 0], xy[:, 1], p["height"], p["width"])
        points = np.column_stack([xy, z])
    else:
        theta = rng.uniform(-math.pi, math.pi, size=n)
        z = rng.uniform(-p["height"] / 2.0, p["height"] / 2.0, size=n)
        points = np.column_stack([p["radius"] * np.cos(theta), p["radius"] * np.sin(theta), z])

    logger.debug(f"🔷 [形状生成] family={family}, n={n}, seed={spec.seed}")
    return PointCloud(points, label=family)


def bump_height(x: np.ndarray, y: np.ndarray, height: float, width: float) -> np.ndarray:
    """ガウシアンバンプ平面の高さ（z方向中心化済み）"""
    return height * np.exp(-(x ** 2 + y ** 2) / (2.0 * width ** 2)) - height / 2.0


def _sample_torus(rng: np.random.Generator, n: int, major: float, minor: float) -> np.ndarray:
    # 面積一様になるよう棄却サンプリング
    us, vs = [], []
    accepted = 0
    while accepted < n:
        u = rng.uniform(-math.pi, math.pi, size=2 * n)
        v = rng.uniform(-math.pi, math.pi, size=2 * n)
        keep = rng.uniform(0.0, 1.0, size=2 * n) <= (major + minor * np.cos(v)) / (major + minor)
        us.append(u[keep])
        vs.append(v[keep])
        accepted += int(keep.sum())
    u = np.concatenate(us)[:n]
    v = np.concatenate(vs)[:n]
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


def _signed_power(values: np.ndarray, exponent: float) -> np.ndarray:
    return np.sign(values) * np.abs(values) ** exponent


def _sample_superellipsoid(rng: np.random.Generator, n: int, p: Dict[str, float]) -> np.ndarray:
    eta = np.arcsin(rng.uniform(-1.0, 1.0, size=n))
    omega = rng.uniform(-math.pi, math.pi, size=n)
    ce = _signed_power(np.cos(eta), p["e1"])
    x = p["a"] * ce * _signed_power(np.cos(omega), p["e2"])
    y = p["b"] * ce * _signed_power(np.sin(omega), p["e2"])
    z = p["c"] * _signed_power(np.sin(eta), p["e1"])
    return np.column_stack([x, y, z])


def random_shape_spec(family: str, seed: int) -> ShapeSpec:
    """
    ファミリー内でパラメータをランダムに選んだ形状指定を作る

    データセット生成用。パラメータもサンプリングもseedから決まる
    """
    rng = np.random.default_rng(seed)
    if family == "sphere":
        params = {"radius": float(rng.uniform(0.3, 0.5))}
    elif family == "torus":
        minor = float(rng.uniform(0.08, 0.18))
        major = float(rng.uniform(minor + 0.1, 0.5 - minor))
        params = {"major_radius": major, "minor_radius": minor}
    elif family == "superellipsoid":
        params = {
            "a": float(rng.uniform(0.25, 0.5)),
            "b": float(rng.uniform(0.25, 0.5)),
            "c": float(rng.uniform(0.2, 0.5)),
            "e1": float(rng.uniform(0.3, 1.5)),
            "e2": float(rng.uniform(0.3, 1.5)),
        }
    elif family == "bump_plane":
        params = {"height": float(rng.uniform(0.15, 0.45)), "width": float(rng.uniform(0.08, 0.25))}
    elif family == "cylinder":
        params = {"radius": float(rng.uniform(0.2, 0.45)), "height": float(rng.uniform(0.5, 1.0))}
    else:
        raise ParameterError(f"unknown shape family '{family}', expected one of {FAMILIES}")
    return ShapeSpec(family=family, parameters=params, seed=int(rng.integers(0, 2 ** 31 - 1)))


def bounding_box(pc: PointCloud) -> BoundingBox:
    """点群のタイトな軸平行バウンディングボックス"""
    lo = pc.points.min(axis=0)
    hi = pc.points.max(axis=0)
    return BoundingBox(min_corner=lo, max_corner=hi, diagonal=float(np.linalg.norm(hi - lo)))


def add_gaussian_noise(pc: PointCloud, level: float, seed: int) -> PointCloud:
    """
    ガウシアンノイズを付加する

    Args:
        pc: 入力点群
        level: ノイズレベル（バウンディングボックス対角長に対する比率, [0, 0.1]）
        seed: 乱数シード

    Returns:
        σ = level × 対角長 の零平均ノイズを加えた点群
    """
    if level < 0:
        raise ParameterError(f"noise level must be nonnegative, got {level}")
    if level > MAX_NOISE_LEVEL:
        raise ParameterError(f"noise level must not exceed {MAX_NOISE_LEVEL}, got {level}")
    if level == 0:
        return pc.with_points(pc.points.copy())
    sigma = level * bounding_box(pc).diagonal
    rng = np.random.default_rng(seed)
    noisy = pc.points + rng.normal(0.0, sigma, size=pc.points.shape)
    return pc.with_points(noisy)


def normalize_to_unit(pc: PointCloud) -> Tuple[PointCloud, float, np.ndarray]:
    """
    点群を[-0.5, 0.5]^3に収める

    Returns:
        (正規化済み点群, scale, offset)。元の点は normalized * scale + offset
    """
    box = bounding_box(pc)
    if box.diagonal == 0.0:
        raise DegenerateInputError("cannot normalize a point cloud with zero bounding-box diagonal")
    scale = float(box.extent.max())
    offset = box.center
    return pc.with_points((pc.points - offset) / scale), scale, offset


def denormalize(pc: PointCloud, scale: float, offset: np.ndarray) -> PointCloud:
    """normalize_to_unitの逆変換"""
    return pc.with_points(pc.points * scale + np.asarray(offset, dtype=np.float64))
