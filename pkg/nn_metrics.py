"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

厳密な最近傍探索（k-d木）と評価指標（Chamfer距離・PSNR）
学習全体で使う微分可能なChamfer損失もここで計算する
"""

import logging
import math
from typing import List, Tuple, Union

import numpy as np

from models.reports import MetricReport
from point_cloud import PointCloud, bounding_box
from pu_exceptions import DegenerateInputError, ParameterError

logger = logging.getLogger("mpu_tta.metrics")

PointsLike = Union[PointCloud, np.ndarray]

DEFAULT_LEAF_SIZE = 16
# これを超えるペア数ではk-d木を使う
BRUTE_FORCE_PAIR_LIMIT = 4_000_000
BRUTE_FORCE_CHUNK = 512
CD_REPORT_SCALE = 100.0


def _as_points(pc: PointsLike, name: str) -> np.ndarray:
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ParameterError(f"{name}: expected an (N, 3) array, got shape {points.shape}")
    if points.shape[0] == 0:
        raise ParameterError(f"{name}: point cloud is empty")
    return points


class SpatialIndex:
    """
    点群上の静的k-d木（厳密探索のみ）

    構築後は不変なので、複数スレッドから同時にクエリしてよい
    """

    def __init__(self, pc: PointsLike, leaf_size: int = DEFAULT_LEAF_SIZE):
        if leaf_size < 1:
            raise ParameterError(f"leaf_size must be positive, got {leaf_size}")
        self.points = _as_points(pc, "SpatialIndex")
        self.leaf_size = leaf_size
        self._order = np.arange(self.points.shape[0], dtype=np.int64)
        # ノード配列: 分割軸, 分割値, 左, 右, 範囲
        self._dim: List[int] = []
        self._split: List[float] = []
        self._left: List[int] = []
        self._right: List[int] = []
        self._start: List[int] = []
        self._end: List[int] = []
        self._root = self._build(0, self.points.shape[0])

    @property
    def node_count(self) -> int:
        return len(self._dim)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def _new_node(self, start: int, end: int) -> int:
        self._dim.append(-1)
        self._split.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._end.append(end)
        return len(self._dim) - 1

    def _build(self, start: int, end: int) -> int:
        node = self._new_node(start, end)
        size = end - start
        if size <= self.leaf_size:
            return node
        idx = self._order[start:end]
        coords = self.points[idx]
        extent = coords.max(axis=0) - coords.min(axis=0)
        dim = int(np.argmax(extent))
        if extent[dim] == 0.0:
            # 全点が一致するなら分割しない
            return node
        mid = size // 2
        part = np.argpartition(coords[:, dim], mid)
        self._order[start:end] = idx[part]
        self._dim[node] = dim
        self._split[node] = float(self.points[self._order[start + mid], dim])
        self._left[node] = self._build(start, start + mid)
        self._right[node] = self._build(start + mid, end)
        return node

    def query(self, q: np.ndarray) -> Tuple[int, float]:
        """最近傍の(インデックス, 二乗距離)。同距離なら最小インデックス"""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        best_d = math.inf
        best_i = -1
        stack = [(self._root, 0.0)]
        while stack:
            node, bound = stack.pop()
            # 同距離のタイブレークのため等号では枝刈りしない
            if bound > best_d:
                continue
            dim = self._dim[node]
            if dim < 0:
                idx = self._order[self._start[node]:self._end[node]]
                d2 = ((self.points[idx] - q) ** 2).sum(axis=1)
                m = float(d2.min())
                cand = int(idx[d2 == m].min())
                if m < best_d or (m == best_d and cand < best_i):
                    best_d, best_i = m, cand
                continue
            diff = q[dim] - self._split[node]
            if diff < 0:
                near, far = self._left[node], self._right[node]
            else:
                near, far = self._right[node], self._left[node]
            stack.append((far, diff * diff))
            stack.append((near, 0.0))
        return best_i, best_d

    def query_many(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """複数クエリをまとめて処理する"""
        queries = np.asarray(queries, dtype=np.float64)
        idx = np.empty(queries.shape[0], dtype=np.int64)
        d2 = np.empty(queries.shape[0], dtype=np.float64)
        for i, q in enumerate(queries):
            idx[i], d2[i] = self.query(q)
        return idx, d2


def nearest(index: SpatialIndex, q: np.ndarray) -> Tuple[int, float]:
    """k-d木で厳密な最近傍を求める"""
    return index.query(q)


def brute_force_nearest(points: np.ndarray, q: np.ndarray) -> Tuple[int, float]:
    """線形走査による最近傍（テストのオラクル兼小規模用）"""
    d2 = ((np.asarray(points, dtype=np.float64) - np.asarray(q, dtype=np.float64)) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    return i, float(d2[i])


def directed_nearest(a: np.ndarray, b: np.ndarray, backend: str = "auto") -> Tuple[np.ndarray, np.ndarray]:
    """
    aの各点についてbでの最近傍を求める

    Returns:
        (インデックス配列, 二乗距離配列)
    """
    if backend == "auto":
        backend = "brute" if a.shape[0] * b.shape[0] <= BRUTE_FORCE_PAIR_LIMIT else "kdtree"
    if backend == "kdtree":
        return SpatialIndex(b).query_many(a)
    if backend != "brute":
        raise ParameterError(f"unknown nearest-neighbor backend '{backend}'")
    idx = np.empty(a.shape[0], dtype=np.int64)
    d2 = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], BRUTE_FORCE_CHUNK):
        block = a[start:start + BRUTE_FORCE_CHUNK]
        dist = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        nn = np.argmin(dist, axis=1)
        idx[start:start + block.shape[0]] = nn
        d2[start:start + block.shape[0]] = dist[np.arange(block.shape[0]), nn]
    return idx, d2


def chamfer_distance(y: PointsLike, g: PointsLike, reduction: str = "sum", backend: str = "auto") -> float:
    """
    Chamfer距離（二乗距離）

    Args:
        y: アップサンプリング結果
        g: 正解点群
        reduction: "sum"（各方向の総和）または "mean"（各方向を点数で割る）

    Returns:
        (y, g)について対称な非負の値
    """
    a = _as_points(y, "chamfer_distance(y)")
    b = _as_points(g, "chamfer_distance(g)")
    _, d_ab = directed_nearest(a, b, backend)
    _, d_ba = directed_nearest(b, a, backend)
    if reduction == "sum":
        return float(d_ab.sum()) + float(d_ba.sum())
    if reduction == "mean":
        return float(d_ab.sum()) / a.shape[0] + float(d_ba.sum()) / b.shape[0]
    raise ParameterError(f"unknown reduction '{reduction}', expected 'sum' or 'mean'")


def psnr(y: PointsLike, g: PointsLike, backend: str = "auto") -> float:
    """
    点群PSNR = min(PSNR(Y,G), PSNR(G,Y))

    p_sは正解点群gのバウンディングボックス対角長。
    両方向とも誤差ゼロなら +inf を返す
    """
    a = _as_points(y, "psnr(y)")
    b = _as_points(g, "psnr(g)")
    _, d_ab = directed_nearest(a, b, backend)
    _, d_ba = directed_nearest(b, a, backend)
    mse_ab = float(d_ab.mean())
    mse_ba = float(d_ba.mean())
    if mse_ab == 0.0 and mse_ba == 0.0:
        return math.inf
    peak = bounding_box(PointCloud(b)).diagonal
    if peak == 0.0:
        raise DegenerateInputError("psnr: ground-truth cloud has zero bounding-box diagonal")

    def directional(mse: float) -> float:
        return math.inf if mse == 0.0 else 10.0 * math.log10(peak * peak / mse)

    return min(directional(mse_ab), directional(mse_ba))


def chamfer_loss_grad(y: PointsLike, g: PointsLike, reduction: str = "mean",
                      backend: str = "auto") -> Tuple[float, np.ndarray]:
    """
    Chamfer損失とyに関する勾配

    最近傍対応は固定して微分する（minの劣勾配）:
        dL/dy_a = 2(y_a - nn_G(y_a))/|Y| + Σ_{b: nn_Y(b)=a} 2(y_a - b)/|G|
    reduction="sum" では点数で割らない（chamfer_distanceの"sum"と同じ値）
    """
    a = _as_points(y, "chamfer_loss_grad(y)")
    b = _as_points(g, "chamfer_loss_grad(g)")
    if reduction == "mean":
        n_ab, n_ba = a.shape[0], b.shape[0]
    elif reduction == "sum":
        n_ab = n_ba = 1
    else:
        raise ParameterError(f"unknown reduction '{reduction}', expected 'sum' or 'mean'")
    nn_ab, d_ab = directed_nearest(a, b, backend)
    nn_ba, d_ba = directed_nearest(b, a, backend)
    loss = float(d_ab.sum()) / n_ab + float(d_ba.sum()) / n_ba
    grad = 2.0 * (a - b[nn_ab]) / n_ab
    np.add.at(grad, nn_ba, 2.0 * (a[nn_ba] - b) / n_ba)
    return loss, grad


def evaluate(y: PointsLike, g: PointsLike, wall_time_ms: float = 0.0) -> MetricReport:
    """CD（両方の集約）とPSNRをまとめたレポートを作る"""
    a = _as_points(y, "evaluate(y)")
    b = _as_points(g, "evaluate(g)")
    report = MetricReport(
        cd_sum=chamfer_distance(a, b, "sum"),
        cd_mean=chamfer_distance(a, b, "mean"),
        psnr_db=psnr(a, b),
        wall_time_ms=wall_time_ms,
        y_count=a.shape[0],
        g_count=b.shape[0],
    )
    logger.debug(f"📏 [評価] CD={report.cd_sum:.6f}, PSNR={report.psnr_text()}")
    return report
