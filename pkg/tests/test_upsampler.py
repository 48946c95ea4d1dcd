"""
バックボーン（順伝播・損失・チェックポイント）のテスト
"""

import numpy as np
import pytest

import diff_engine as de
from meta_learner import AdamState, adam_step
from nn_metrics import chamfer_distance
from point_cloud import PointCloud, ShapeSpec, generate_shape
from pu_exceptions import CheckpointFormatError, ConfigurationError, ParameterError, PointCloudFormatError
from sampling import downsample
from upsampler import (
    BackboneConfig, Upsampler, forward, load_checkpoint, loss_and_grad, loss_forward, predict,
    save_checkpoint,
)


def _cloud(n: int = 16, seed: int = 0) -> PointCloud:
    return generate_shape(ShapeSpec("sphere", {"radius": 0.4}, seed=seed), n)


def test_init_is_deterministic():
    config = BackboneConfig(ratio=4, feature_dim=16, seed=3)
    assert Upsampler.init(config).params.bit_equal(Upsampler.init(config).params)
    assert not Upsampler.init(config).params.bit_equal(Upsampler.init(BackboneConfig(feature_dim=16, seed=4)).params)


def test_parameter_count_closed_form():
    """F=32, H=2, r=4 で 5571"""
    config = BackboneConfig(ratio=4, feature_dim=32, hidden_layers=2)
    assert config.parameter_count() == 5571
    assert Upsampler.init(config).params.size == 5571
    for ratio, f, h in [(2, 8, 1), (8, 16, 3), (16, 8, 2)]:
        config = BackboneConfig(ratio=ratio, feature_dim=f, hidden_layers=h)
        assert Upsampler.init(config).params.size == config.parameter_count()


def test_invalid_backbone_config():
    with pytest.raises(ParameterError):
        Upsampler.init(BackboneConfig(ratio=3))
    with pytest.raises(ParameterError):
        Upsampler.init(BackboneConfig(feature_dim=4))
    with pytest.raises(ParameterError):
        Upsampler.init(BackboneConfig(hidden_layers=0))
    with pytest.raises(ParameterError):
        Upsampler.init(BackboneConfig(offset_scale=-0.1))


@pytest.mark.parametrize("ratio", [2, 4, 8, 16])
def test_output_count_is_ratio_times_input(ratio):
    model = Upsampler.init(BackboneConfig(ratio=ratio, feature_dim=8))
    x = _cloud(10)
    y, graph = forward(model, x)
    assert y.count == ratio * x.count
    assert graph.output is not None


def test_zero_offset_scale_replicates_input():
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=8, offset_scale=0.0))
    x = _cloud(12)
    assert np.array_equal(predict(model, x).points, np.repeat(x.points, 4, axis=0))


def test_offsets_are_bounded():
    model = Upsampler.init(BackboneConfig(ratio=8, feature_dim=16, offset_scale=0.05, seed=1))
    x = _cloud(20)
    y = predict(model, x).points.reshape(20, 8, 3)
    assert np.max(np.abs(y - x.points[:, None, :])) <= 0.05 + 1e-12


def test_permutation_equivariance():
    """入力の並べ替えは出力ブロックの並べ替えになる"""
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=16, seed=2))
    x = _cloud(24)
    perm = np.random.default_rng(0).permutation(24)
    y = predict(model, x).points.reshape(24, 4, 3)
    y_perm = predict(model, PointCloud(x.points[perm])).points.reshape(24, 4, 3)
    assert np.allclose(y_perm, y[perm], rtol=0.0, atol=1e-12)


def test_too_few_input_points():
    model = Upsampler.init(BackboneConfig(feature_dim=8))
    with pytest.raises(ParameterError):
        forward(model, PointCloud(np.eye(3)))


def test_self_target_has_zero_loss():
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=8))
    x = _cloud(8)
    loss, graph = loss_forward(model, x, predict(model, x))
    assert loss == 0.0
    assert graph.output.value.size == 1


def test_end_to_end_gradient_matches_finite_differences():
    """4点・feature_dim=8 で相対誤差 < 1e-4"""
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=8, seed=5))
    x = PointCloud(np.array([[0.1, 0.2, -0.1], [-0.3, 0.1, 0.2], [0.2, -0.25, 0.05], [0.0, 0.3, -0.3]]))
    target = generate_shape(ShapeSpec("sphere", {"radius": 0.35}, seed=6), 16)
    _, analytic = loss_and_grad(model, x, target)
    numeric = de.finite_difference_grad(lambda p: loss_and_grad(model, x, target, p)[0], model.params)
    assert de.relative_error(analytic, numeric) < 1e-4


def test_overfitting_a_single_pair():
    """同じ組で50ステップ更新すると損失は半分以下"""
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=8, seed=7))
    x = _cloud(16, seed=8)
    target = PointCloud(x.points + np.array([0.05, 0.0, 0.0]))
    params = model.params
    adam = AdamState.for_params(params, base_lr=1e-2, decay=1.0)
    initial, _ = loss_and_grad(model, x, target, params)
    for _ in range(50):
        _, grads = loss_and_grad(model, x, target, params)
        params = adam_step(adam, params, grads)
    final, _ = loss_and_grad(model, x, target, params)
    assert final <= 0.5 * initial


def test_zero_offset_lower_bound():
    """offset_scale=0 の出力は複製したX↓そのもの"""
    x = generate_shape(ShapeSpec("torus", seed=9), 64)
    x_down = downsample(x, 4)
    model = Upsampler.init(BackboneConfig(ratio=4, feature_dim=8, offset_scale=0.0))
    replicated = np.repeat(x_down.points, 4, axis=0)
    assert chamfer_distance(predict(model, x_down), x) == chamfer_distance(replicated, x)


def test_checkpoint_round_trip(tmp_path):
    model = Upsampler.init(BackboneConfig(ratio=8, feature_dim=16, hidden_layers=3, offset_scale=0.07, seed=11))
    path = save_checkpoint(model, tmp_path / "model.mpu")
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.params.bit_equal(model.params)
    assert path.read_bytes()[:4] == b"MPU1"


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.mpu")

    bad = tmp_path / "bad.mpu"
    bad.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)


@pytest.mark.parametrize("keep", [10, 60, -16])
def test_truncated_checkpoint_is_a_format_error(tmp_path, keep):
    """ヘッダー途中・パラメータ名の途中・値の途中で切れたファイル"""
    path = save_checkpoint(Upsampler.init(BackboneConfig(feature_dim=8)), tmp_path / "ok.mpu")
    truncated = tmp_path / "truncated.mpu"
    truncated.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(truncated)
    assert isinstance(info.value, PointCloudFormatError)
    assert info.value.code == "format"
    assert str(truncated) in str(info.value)
