"""
XYZ / PLY の読み書きのテスト
"""

import struct

import numpy as np
import pytest

from point_cloud import PointCloud
from pu_exceptions import PointCloudFormatError, PointCloudParseError
from utils.point_cloud_io import parse_ply, parse_xyz, read_point_cloud, write_point_cloud


def _random_cloud(n: int = 1000, seed: int = 0) -> PointCloud:
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)))


def test_binary_ply_round_trip_is_bit_exact(tmp_path):
    pc = _random_cloud()
    path = write_point_cloud(pc, tmp_path / "cloud.ply")
    assert np.array_equal(read_point_cloud(path).points, pc.points)


@pytest.mark.parametrize("name", ["cloud.xyz", "cloud_ascii.ply"])
def test_text_round_trip(tmp_path, name):
    pc = _random_cloud(200, seed=1)
    path = write_point_cloud(pc, tmp_path / name, binary=False)
    assert np.allclose(read_point_cloud(path).points, pc.points, rtol=1e-9, atol=0.0)


def test_xyz_line_and_comments():
    pc = parse_xyz("# header\n0.1 0.2 0.3\n\n  1 2 3  # trailing\n")
    assert pc.points.tolist() == [[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]]


def test_xyz_wrong_field_count_names_line():
    with pytest.raises(PointCloudParseError) as info:
        parse_xyz("0 0 0\n# comment\n1.0 2.0\n", source="a.xyz")
    assert info.value.line_number == 3
    assert "a.xyz:3" in str(info.value)


def test_xyz_invalid_number_and_empty():
    with pytest.raises(PointCloudParseError) as info:
        parse_xyz("0 0 0\n1 two 3\n")
    assert info.value.line_number == 2
    with pytest.raises(PointCloudParseError):
        parse_xyz("# nothing here\n")


def test_ply_float_vertices_with_extra_properties():
    """float32 の x,y,z と余分なスカラー（法線・色）は位置だけ読む"""
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment test\n"
        "element vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty float nx\nend_header\n"
    ).encode("ascii")
    body = struct.pack("<fffBf", 1.5, 2.5, -3.0, 200, 0.1) + struct.pack("<fffBf", 0.0, 0.25, 4.0, 7, 0.2)
    pc = parse_ply(header + body)
    assert pc.points.tolist() == [[1.5, 2.5, -3.0], [0.0, 0.25, 4.0]]


def test_ascii_ply_with_leading_element():
    text = (
        "ply\nformat ascii 1.0\nelement camera 1\nproperty float px\n"
        "element vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty int flag\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "9.0\n0 0 1 5\n1 2 3 6\n3 0 1 2\n"
    )
    assert parse_ply(text.encode("ascii")).points.tolist() == [[0.0, 0.0, 1.0], [1.0, 2.0, 3.0]]


def test_ply_errors():
    base = "ply\nformat ascii 1.0\nelement vertex 1\nproperty {kind} x\nproperty float y\nproperty float z\nend_header\n"
    with pytest.raises(PointCloudFormatError):
        parse_ply((base.format(kind="int") + "1 2 3\n").encode())
    with pytest.raises(PointCloudFormatError):
        parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                  b"property float z\nproperty list uchar int idx\nend_header\n0 0 0 1 2\n")
    with pytest.raises(PointCloudFormatError):
        parse_ply(b"ply\nformat ascii 1.0\nelement face 1\nproperty float a\nend_header\n1\n")
    with pytest.raises(PointCloudParseError):
        parse_ply(b"not a ply\n")
    with pytest.raises(PointCloudParseError) as info:
        parse_ply((base.format(kind="float") + "1 2\n").encode(), source="bad.ply")
    assert info.value.line_number == 8
    assert "bad.ply:8" in str(info.value)


def test_ascii_ply_bad_row_after_leading_element_names_line():
    text = (
        "ply\nformat ascii 1.0\nelement camera 2\nproperty float px\n"
        "element vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
        "1.0\n2.0\n0 0 0\n1 oops 3\n"
    )
    with pytest.raises(PointCloudParseError) as info:
        parse_ply(text.encode("ascii"))
    assert info.value.line_number == 13


def test_big_endian_ply_is_read():
    header = (
        "ply\nformat binary_big_endian 1.0\nelement vertex 2\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    ).encode("ascii")
    body = struct.pack(">ddd", 0.5, -1.25, 3.0) + struct.pack(">ddd", 1e-3, 2.0, -7.5)
    assert parse_ply(header + body).points.tolist() == [[0.5, -1.25, 3.0], [1e-3, 2.0, -7.5]]


def test_empty_vertex_element_is_a_parse_error():
    with pytest.raises(PointCloudParseError):
        parse_ply(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                  b"property float x\nproperty float y\nproperty float z\nend_header\n")


def test_truncated_binary_ply():
    header = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\n" \
             b"property double y\nproperty double z\nend_header\n"
    with pytest.raises(PointCloudParseError) as info:
        parse_ply(header + bytes(8 * 3 * 2))
    assert info.value.line_number is None


def test_unsupported_extension(tmp_path):
    with pytest.raises(PointCloudFormatError):
        write_point_cloud(_random_cloud(4), tmp_path / "cloud.obj")
    with pytest.raises(PointCloudFormatError):
        read_point_cloud(tmp_path / "cloud.pcd")
