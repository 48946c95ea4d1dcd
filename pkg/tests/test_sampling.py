"""
最遠点サンプリングと間引きのテスト
"""

import numpy as np
import pytest

from point_cloud import PointCloud, ShapeSpec, generate_shape
from pu_exceptions import DegenerateInputError, ParameterError
from sampling import SampleIndexSet, downsample, farthest_point_sample, random_sample


def _pairwise_min(points: np.ndarray) -> float:
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def _coverage(points: np.ndarray, chosen: np.ndarray) -> float:
    d = np.linalg.norm(points[:, None, :] - chosen[None, :, :], axis=2)
    return float(d.min(axis=1).max())


def test_fps_hand_trace():
    """重心(0.775,0,0)から最遠のP3、次にP0"""
    pc = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0], [2.0, 0, 0]]))
    assert farthest_point_sample(pc, 2).indices.tolist() == [3, 0]


def test_fps_full_selection_is_permutation():
    pc = generate_shape(ShapeSpec("sphere", seed=4), 64)
    chosen = farthest_point_sample(pc, 64)
    assert sorted(chosen.indices.tolist()) == list(range(64))


def test_fps_tie_breaks_to_lowest_index():
    corners = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    assert farthest_point_sample(PointCloud(corners), 1).indices.tolist() == [0]


def test_fps_invalid_k():
    pc = PointCloud(np.eye(3))
    with pytest.raises(ParameterError):
        farthest_point_sample(pc, 4)
    with pytest.raises(ParameterError):
        farthest_point_sample(pc, 0)


def test_sample_index_set_validation():
    with pytest.raises(ParameterError):
        SampleIndexSet(np.array([0, 0]), 3)
    with pytest.raises(ParameterError):
        SampleIndexSet(np.array([3]), 3)
    with pytest.raises(ParameterError):
        SampleIndexSet(np.array([], dtype=int), 3)


def test_downsample_is_subset_with_floor_count():
    pc = generate_shape(ShapeSpec("torus", seed=2), 1024)
    down = downsample(pc, 4)
    assert down.count == 256
    source = {tuple(p) for p in pc.points}
    assert all(tuple(p) in source for p in down.points)

    assert downsample(PointCloud(np.random.default_rng(0).normal(size=(103, 3))), 4).count == 25


def test_downsample_spreads_points():
    """出力の最小点間距離は入力以上"""
    pc = generate_shape(ShapeSpec("sphere", seed=9), 400)
    down = downsample(pc, 4)
    assert _pairwise_min(down.points) >= _pairwise_min(pc.points)


def test_downsample_degenerate_and_bad_ratio():
    pc = PointCloud(np.random.default_rng(0).normal(size=(15, 3)))
    with pytest.raises(DegenerateInputError):
        downsample(pc, 4)
    with pytest.raises(ParameterError):
        downsample(pc, 1)
    with pytest.raises(ParameterError):
        downsample(PointCloud(np.random.default_rng(0).normal(size=(64, 3))), 4, method="voxel")


def test_fps_covers_better_than_random():
    """20シード平均でFPSの被覆半径はランダム以下"""
    fps_radius, random_radius = [], []
    for seed in range(20):
        pc = generate_shape(ShapeSpec("sphere", seed=seed), 256)
        fps_radius.append(_coverage(pc.points, farthest_point_sample(pc, 32).take(pc).points))
        random_radius.append(_coverage(pc.points, random_sample(pc, 32, seed).take(pc).points))
    assert np.mean(fps_radius) <= np.mean(random_radius)


def test_random_sample_is_seeded():
    pc = PointCloud(np.random.default_rng(0).normal(size=(50, 3)))
    a = random_sample(pc, 10, seed=3).indices
    b = random_sample(pc, 10, seed=3).indices
    assert np.array_equal(a, b)
    assert downsample(pc, 5, method="random", seed=3).count == 10


def test_fps_is_set_function():
    """点の並べ替えに対して選ばれる点集合は同じ（同距離がない場合）"""
    pc = PointCloud(np.random.default_rng(5).normal(size=(80, 3)))
    perm = np.random.default_rng(6).permutation(80)
    shuffled = PointCloud(pc.points[perm])
    a = {tuple(p) for p in farthest_point_sample(pc, 20).take(pc).points}
    b = {tuple(p) for p in farthest_point_sample(shuffled, 20).take(shuffled).points}
    assert a == b
