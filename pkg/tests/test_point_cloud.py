"""
点群・形状生成・ノイズ・正規化のテスト
"""

import math

import numpy as np
import pytest

from point_cloud import (
    FAMILIES, PointCloud, ShapeSpec, add_gaussian_noise, bounding_box, denormalize, generate_shape,
    normalize_to_unit, random_shape_spec,
)
from pu_exceptions import DegenerateInputError, ParameterError


def test_point_cloud_rejects_bad_input():
    """形状・空・非有限値はパラメータエラー"""
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ParameterError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_point_cloud_is_read_only():
    pc = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0
    assert pc.count == len(pc) == 3


def test_sphere_points_lie_on_surface():
    """半径0.5の球面上の点"""
    pc = generate_shape(ShapeSpec("sphere", {"radius": 0.5}, seed=3), 1000)
    assert pc.count == 1000
    assert np.allclose(np.linalg.norm(pc.points, axis=1), 0.5, atol=1e-9)
    assert pc.label == "sphere"


def test_torus_implicit_residual():
    """(sqrt(x²+y²) - R)² + z² = r²"""
    pc = generate_shape(ShapeSpec("torus", {"major_radius": 0.35, "minor_radius": 0.15}, seed=1), 512)
    p = pc.points
    residual = (np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - 0.35) ** 2 + p[:, 2] ** 2 - 0.15 ** 2
    assert pc.count == 512
    assert np.max(np.abs(residual)) <= 1e-9


def test_cylinder_and_bump_plane_residuals():
    cyl = generate_shape(ShapeSpec("cylinder", {"radius": 0.3, "height": 0.8}, seed=2), 256).points
    assert np.allclose(np.hypot(cyl[:, 0], cyl[:, 1]), 0.3, atol=1e-9)
    assert np.all(np.abs(cyl[:, 2]) <= 0.4)

    bump = generate_shape(ShapeSpec("bump_plane", {"height": 0.4, "width": 0.15}, seed=2), 256).points
    expected = 0.4 * np.exp(-(bump[:, 0] ** 2 + bump[:, 1] ** 2) / (2 * 0.15 ** 2)) - 0.2
    assert np.max(np.abs(bump[:, 2] - expected)) <= 1e-9


def test_superellipsoid_implicit_residual():
    params = {"a": 0.5, "b": 0.4, "c": 0.3, "e1": 0.8, "e2": 1.2}
    p = generate_shape(ShapeSpec("superellipsoid", params, seed=5), 400).points
    xy = (np.abs(p[:, 0] / 0.5) ** (2 / 1.2) + np.abs(p[:, 1] / 0.4) ** (2 / 1.2)) ** (1.2 / 0.8)
    value = xy + np.abs(p[:, 2] / 0.3) ** (2 / 0.8)
    assert np.max(np.abs(value - 1.0)) <= 1e-9


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_deterministic_and_in_unit_cube(family):
    spec = random_shape_spec(family, seed=11)
    a = generate_shape(spec, 300)
    b = generate_shape(spec, 300)
    assert np.array_equal(a.points, b.points)
    assert np.all(np.abs(a.points) <= 0.5 + 1e-12)


def test_invalid_family_parameters():
    """torusは minor < major が必要"""
    with pytest.raises(ParameterError):
        generate_shape(ShapeSpec("torus", {"major_radius": 0.1, "minor_radius": 0.2}), 64)
    with pytest.raises(ParameterError):
        generate_shape(ShapeSpec("sphere", {"radius": -1.0}), 64)
    with pytest.raises(ParameterError):
        generate_shape(ShapeSpec("sphere"), 4)
    with pytest.raises(ParameterError):
        generate_shape(ShapeSpec("cube"), 64)


def test_bounding_box():
    box = bounding_box(PointCloud(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])))
    assert np.array_equal(box.min_corner, [0, 0, 0])
    assert np.array_equal(box.max_corner, [1, 1, 1])
    assert box.diagonal == pytest.approx(math.sqrt(3))

    assert bounding_box(PointCloud(np.array([[0.3, 0.2, 0.1]]))).diagonal == 0.0

    points = np.random.default_rng(0).normal(size=(100, 3))
    box = bounding_box(PointCloud(points))
    assert np.array_equal(box.min_corner, points.min(axis=0))
    assert np.array_equal(box.max_corner, points.max(axis=0))


def test_zero_noise_is_identity():
    pc = generate_shape(ShapeSpec("sphere"), 100)
    assert np.array_equal(add_gaussian_noise(pc, 0.0, seed=1).points, pc.points)


def test_noise_statistics_and_determinism():
    """σ = level × 対角長"""
    points = np.random.default_rng(1).uniform(0.0, 1.0, size=(100_000, 3))
    points[0], points[1] = [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]
    pc = PointCloud(points)
    noisy = add_gaussian_noise(pc, 0.01, seed=7)
    again = add_gaussian_noise(pc, 0.01, seed=7)
    assert np.array_equal(noisy.points, again.points)
    std = (noisy.points - pc.points).std(axis=0)
    assert np.all(np.abs(std - 0.01 * math.sqrt(3)) <= 0.1 * 0.01 * math.sqrt(3))


@pytest.mark.parametrize("family", ["sphere", "torus", "superellipsoid"])
def test_noise_grows_bounding_box_by_at_most_six_sigma(family):
    pc = generate_shape(ShapeSpec(family), 2000)
    box = bounding_box(pc)
    sigma = 0.05 * box.diagonal
    noisy = bounding_box(add_gaussian_noise(pc, 0.05, seed=3))
    assert np.all(noisy.min_corner >= box.min_corner - 6 * sigma)
    assert np.all(noisy.max_corner <= box.max_corner + 6 * sigma)


def test_negative_noise_level_rejected():
    pc = PointCloud(np.eye(3))
    with pytest.raises(ParameterError):
        add_gaussian_noise(pc, -0.01, seed=0)
    with pytest.raises(ParameterError):
        add_gaussian_noise(pc, 0.2, seed=0)


def test_normalize_to_unit():
    """[0,2]³ → [-0.5,0.5]³, scale=2"""
    points = np.random.default_rng(2).uniform(0.0, 2.0, size=(200, 3))
    points[0], points[1] = [0.0, 0.0, 0.0], [2.0, 2.0, 2.0]
    normalized, scale, offset = normalize_to_unit(PointCloud(points))
    assert scale == pytest.approx(2.0)
    assert np.all(np.abs(normalized.points) <= 0.5 + 1e-12)
    restored = denormalize(normalized, scale, offset)
    assert np.max(np.abs(restored.points - points)) <= 1e-12


def test_normalize_fixed_point():
    points = np.array([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5], [0.1, -0.2, 0.3]])
    normalized, scale, offset = normalize_to_unit(PointCloud(points))
    assert scale == 1.0
    assert np.array_equal(offset, [0.0, 0.0, 0.0])
    assert np.array_equal(normalized.points, points)


def test_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        normalize_to_unit(PointCloud(np.ones((5, 3))))
