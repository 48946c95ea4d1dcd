"""
決定的ダウンサンプリング
内部タスク (X↓, X) の構築とメタテストで使う
"""

import logging
from dataclasses import dataclass

import numpy as np

from point_cloud import PointCloud
from pu_exceptions import DegenerateInputError, ParameterError

logger = logging.getLogger("mpu_tta.sampling")

SAMPLING_METHODS = ("fps", "random")
MIN_DOWNSAMPLED_POINTS = 4


@dataclass(frozen=True)
class SampleIndexSet:
    """元点群から選ばれたインデックス列（選択順）"""
    indices: np.ndarray
    source_count: int

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        if indices.ndim != 1 or indices.size < 1:
            raise ParameterError("sample index set must contain at least one index")
        if indices.min() < 0 or indices.max() >= self.source_count:
            raise ParameterError(f"sample indices out of range for {self.source_count} points")
        if np.unique(indices).size != indices.size:
            raise ParameterError("sample indices must be distinct")
        indices.setflags(write=False)
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return int(self.indices.size)

    def take(self, pc: PointCloud) -> PointCloud:
        return pc.with_points(pc.points[self.indices])


def farthest_point_sample(pc: PointCloud, k: int) -> SampleIndexSet:
    """
    最遠点サンプリング（貪欲なmax-min選択）

    最初の点は重心から最も遠い点、以降は選択済み集合への最小距離が最大の点。
    同距離は最小インデックスを選ぶ。

    Args:
        pc: 入力点群
        k: 選択数（1 <= k <= pc.count）
    """
    if k < 1 or k > pc.count:
        raise ParameterError(f"farthest_point_sample: k={k} must be in [1, {pc.count}]")
    points = pc.points
    centroid = points.mean(axis=0)
    # argmaxは同値なら先頭（最小インデックス）を返す
    first = int(np.argmax(((points - centroid) ** 2).sum(axis=1)))

    selected = np.empty(k, dtype=np.int64)
    selected[0] = first
    min_dist = ((points - points[first]) ** 2).sum(axis=1)
    min_dist[first] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        np.minimum(min_dist, ((points - points[nxt]) ** 2).sum(axis=1), out=min_dist)
        min_dist[nxt] = -1.0
    return SampleIndexSet(selected, pc.count)


def random_sample(pc: PointCloud, k: int, seed: int) -> SampleIndexSet:
    """一様ランダムな非復元抽出（アブレーション用）"""
    if k < 1 or k > pc.count:
        raise ParameterError(f"random_sample: k={k} must be in [1, {pc.count}]")
    rng = np.random.default_rng(seed)
    return SampleIndexSet(rng.choice(pc.count, size=k, replace=False), pc.count)


def downsample(pc: PointCloud, ratio: int, method: str = "fps", seed: int = 0) -> PointCloud:
    """
    点群をfloor(count / ratio)点に間引く

    Args:
        pc: 入力点群
        ratio: 間引き率 r（2以上）
        method: "fps" または "random"
        seed: method="random"のときのシード

    Returns:
        入力点の部分集合からなる点群
    """
    if ratio < 2:
        raise ParameterError(f"downsample ratio must be >= 2, got {ratio}")
    k = pc.count // ratio
    if k < MIN_DOWNSAMPLED_POINTS:
        raise DegenerateInputError(
            f"downsampling {pc.count} points by {ratio} leaves {k} < {MIN_DOWNSAMPLED_POINTS} points"
        )
    if method == "fps":
        chosen = farthest_point_sample(pc, k)
    elif method == "random":
        chosen = random_sample(pc, k, seed)
    else:
        raise ParameterError(f"unknown sampling method '{method}', expected one of {SAMPLING_METHODS}")
    return chosen.take(pc)
