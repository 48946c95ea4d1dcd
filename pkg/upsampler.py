"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

コンパクトな置換同変アップサンプリングネットワーク F_θ: N×3 → rN×3
複製＋オフセット方式（点ごとのエンコーダ → r個のレプリカコード → オフセットデコーダ）
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

import diff_engine as de
from diff_engine import Graph, ParameterSet, Tensor
from nn_metrics import chamfer_loss_grad
from point_cloud import PointCloud
from pu_exceptions import CheckpointFormatError, ConfigurationError, ParameterError

logger = logging.getLogger("mpu_tta.upsampler")

VALID_RATIOS = (2, 4, 8, 16)
MIN_FEATURE_DIM = 8
MIN_INPUT_POINTS = 4
CODE_INIT_RANGE = 0.1

CHECKPOINT_MAGIC = b"MPU1"
CHECKPOINT_VERSION = 1
# magic, version, ratio, feature_dim, hidden_layers, offset_scale, seed, parameter数
_HEADER = struct.Struct("<4sIIIIdqI")


@dataclass(frozen=True)
class BackboneConfig:
    """バックボーンの構成"""
    ratio: int = 4
    feature_dim: int = 32
    hidden_layers: int = 2
    offset_scale: float = 0.1
    seed: int = 0

    def validate(self) -> "BackboneConfig":
        if self.ratio not in VALID_RATIOS:
            raise ParameterError(f"ratio must be one of {VALID_RATIOS}, got {self.ratio}")
        if self.feature_dim < MIN_FEATURE_DIM:
            raise ParameterError(f"feature_dim must be >= {MIN_FEATURE_DIM}, got {self.feature_dim}")
        if self.hidden_layers < 1:
            raise ParameterError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if not (self.offset_scale >= 0.0 and math.isfinite(self.offset_scale)):
            raise ParameterError(f"offset_scale must be a finite nonnegative number, got {self.offset_scale}")
        return self

    def parameter_count(self) -> int:
        """
        パラメータ数の閉形式（F=feature_dim, H=hidden_layers, r=ratio）

            encoder: (3F + F) + (H-1)(F² + F)
            codes:   rF
            decoder: (3F·F + F) + (H-1)(F² + F) + (3F + 3)
        """
        f, h, r = self.feature_dim, self.hidden_layers, self.ratio
        hidden = (h - 1) * (f * f + f)
        encoder = (3 * f + f) + hidden
        decoder = (3 * f * f + f) + hidden + (3 * f + 3)
        return encoder + r * f + decoder


@dataclass(frozen=True)
class Upsampler:
    """設定とパラメータの組（パラメータ更新は新しいインスタンスを返す）"""
    config: BackboneConfig
    params: ParameterSet

    @classmethod
    def init(cls, config: BackboneConfig) -> "Upsampler":
        """
        Glorot一様分布で重みを初期化する

        重みは U(-s, s), s = sqrt(6 / (fan_in + fan_out))、バイアスは0、
        レプリカコードは U(-0.1, 0.1)。シードに対して決定的
        """
        config.validate()
        rng = np.random.default_rng(config.seed)
        f = config.feature_dim
        arrays: Dict[str, np.ndarray] = {}

        def dense(prefix: str, fan_in: int, fan_out: int) -> None:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[f"{prefix}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            arrays[f"{prefix}.bias"] = np.zeros(fan_out)

        for layer in range(config.hidden_layers):
            dense(f"encoder.{layer}", 3 if layer == 0 else f, f)
        arrays["codes"] = rng.uniform(-CODE_INIT_RANGE, CODE_INIT_RANGE, size=(config.ratio, f))
        for layer in range(config.hidden_layers):
            dense(f"decoder.{layer}", 3 * f if layer == 0 else f, f)
        dense("decoder.out", f, 3)

        model = cls(config=config, params=ParameterSet(arrays))
        logger.debug(f"🧱 [バックボーン] 初期化: {config}, params={model.params.size}")
        return model

    @property
    def ratio(self) -> int:
        return self.config.ratio

    def with_params(self, params: ParameterSet) -> "Upsampler":
        self.params.check_schema(params, "with_params")
        return Upsampler(config=self.config, params=params)


def _check_input(x: PointCloud) -> None:
    if x.count < MIN_INPUT_POINTS:
        raise ParameterError(f"upsampler input needs at least {MIN_INPUT_POINTS} points, got {x.count}")


def build_forward(graph: Graph, config: BackboneConfig, tensors: Dict[str, Tensor], points: np.ndarray) -> Tensor:
    """グラフ上に順伝播を組み立て、(rN, 3) の出力テンソルを返す"""
    n = points.shape[0]
    x = graph.constant(points)

    h = x
    for layer in range(config.hidden_layers):
        h = de.relu(de.linear(h, tensors[f"encoder.{layer}.weight"], tensors[f"encoder.{layer}.bias"]))
    # 点ごとの特徴と形状全体の特徴
    pooled = de.replicate(de.reduce_mean(h, axis=0), n)
    features = de.replicate(de.concat([h, pooled]), config.ratio)
    codes = de.tile(tensors["codes"], n)

    z = de.concat([features, codes])
    for layer in range(config.hidden_layers):
        z = de.relu(de.linear(z, tensors[f"decoder.{layer}.weight"], tensors[f"decoder.{layer}.bias"]))
    delta = de.linear(z, tensors["decoder.out.weight"], tensors["decoder.out.bias"])
    offsets = de.scale(de.tanh(delta), config.offset_scale)
    return de.add(de.replicate(x, config.ratio), offsets)


def chamfer(y: Tensor, target: np.ndarray, reduction: str = "mean") -> Tensor:
    """Chamfer損失をグラフに記録する（対応は逆伝播中固定）"""
    loss, grad_y = chamfer_loss_grad(y.value, target, reduction)

    def vjp(g: np.ndarray):
        return (float(g) * grad_y,)

    return y.graph.record("chamfer", [y], np.array(loss), vjp)


def forward(model: Upsampler, x: PointCloud, params: Optional[ParameterSet] = None) -> Tuple[PointCloud, Graph]:
    """
    アップサンプリングの順伝播

    Args:
        model: バックボーン
        x: 単位立方体に正規化済みの入力（4点以上）
        params: 差し替えるパラメータ（適応後のθ′など）。省略時はmodel.params

    Returns:
        (r·N点の点群, 計算グラフ)。出力ブロック i·r + j は入力点iのj番目のレプリカ
    """
    _check_input(x)
    params = model.params if params is None else params
    graph = Graph()
    y = build_forward(graph, model.config, graph.parameters_from(params), x.points)
    graph.output = y
    return PointCloud(y.value, label=x.label), graph


def loss_forward(model: Upsampler, x: PointCloud, target: PointCloud,
                 params: Optional[ParameterSet] = None, reduction: str = "mean") -> Tuple[float, Graph]:
    """F_θ(x) と target のCD（既定は平均CD）。graph.outputが損失ノード"""
    _check_input(x)
    params = model.params if params is None else params
    graph = Graph()
    y = build_forward(graph, model.config, graph.parameters_from(params), x.points)
    loss = chamfer(y, target.points, reduction)
    graph.output = loss
    return float(loss.value), graph


def loss_and_grad(model: Upsampler, x: PointCloud, target: PointCloud,
                  params: Optional[ParameterSet] = None, reduction: str = "mean") -> Tuple[float, ParameterSet]:
    """損失とパラメータ勾配"""
    loss, graph = loss_forward(model, x, target, params, reduction)
    return loss, de.backward(graph)


def predict(model: Upsampler, x: PointCloud, params: Optional[ParameterSet] = None) -> PointCloud:
    y, _ = forward(model, x, params)
    return y


# ---------------------------------------------------------------------------
# チェックポイント（"MPU1" バイナリ形式）
# ---------------------------------------------------------------------------

def save_checkpoint(model: Upsampler, path: Union[str, Path]) -> Path:
    """
    チェックポイントを書き出す

    ヘッダー {magic "MPU1", version u32, 設定値}、続いて各パラメータについて
    名前長・名前・次元数・形状・リトルエンディアン float64 の値
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.ratio, cfg.feature_dim,
                           cfg.hidden_layers, cfg.offset_scale, cfg.seed, len(model.params))]
    for name, array in model.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info(f"💾 [チェックポイント] 保存: {path} (params={model.params.size})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Upsampler:
    """save_checkpointの逆（ビット単位で一致）"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("truncated checkpoint header", path=str(path))
    magic, version, ratio, feature_dim, hidden_layers, offset_scale, seed, count = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not an MPU1 checkpoint (magic={magic!r})", path=str(path))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", path=str(path))
    config = BackboneConfig(ratio=ratio, feature_dim=feature_dim, hidden_layers=hidden_layers,
                            offset_scale=offset_scale, seed=seed)

    offset = _HEADER.size
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if offset + 8 * size > len(data):
                raise CheckpointFormatError(f"truncated values for parameter '{name}'", path=str(path))
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape)
            offset += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}", path=str(path)) from exc

    model = Upsampler(config=config.validate(), params=ParameterSet(arrays))
    expected = Upsampler.init(config).params.schema
    if model.params.schema != expected:
        raise CheckpointFormatError("parameter schema does not match the backbone configuration", path=str(path))
    logger.info(f"📂 [チェックポイント] 読み込み: {path} ({asdict(config)})")
    return model
