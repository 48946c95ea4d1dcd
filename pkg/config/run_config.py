"""
実験設定（RunConfig）の読み書き

設定ファイルは `key = value` 形式のフラットなテキスト。
'#' 以降はコメント、リストはカンマ区切り、省略可能な値は none
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from meta_learner import MetaConfig
from point_cloud import FAMILIES
from pu_exceptions import ConfigurationError
from upsampler import MIN_INPUT_POINTS, VALID_RATIOS, BackboneConfig

logger = logging.getLogger('mpu_tta.config')

# 環境変数の読み込み
load_dotenv()


class RunConfig(BaseModel):
    """実験1回分の設定（MetaConfig + バックボーン + データセット + 出力）"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # メタ学習
    alpha: float = Field(default=0.2, ge=0.0)
    beta: float = Field(default=1.0, ge=0.0)
    inner_steps: int = Field(default=5, ge=0, le=32)
    batch_size: int = Field(default=8, ge=1)
    gradient_mode: Literal["first_order", "fd_hvp"] = "first_order"
    ratio: int = 4
    max_meta_iters: int = Field(default=100, ge=0)
    seed: int = 0
    batch_reduction: Literal["sum", "mean"] = "sum"
    clip_grad_norm: Optional[float] = Field(default=0.05, gt=0.0)
    sampling_method: Literal["fps", "random"] = "fps"
    workers: int = Field(default=1, ge=1)
    log_interval: int = Field(default=10, ge=1)

    # バックボーン
    feature_dim: int = Field(default=32, ge=8)
    hidden_layers: int = Field(default=2, ge=1)
    offset_scale: float = Field(default=0.1, ge=0.0)

    # データセット（合成形状ファミリー）
    train_families: List[str] = Field(default_factory=lambda: ["sphere", "superellipsoid"])
    test_families: List[str] = Field(default_factory=lambda: ["torus", "bump_plane", "cylinder"])
    train_shapes: int = Field(default=32, ge=1)
    test_shapes: int = Field(default=20, ge=1)
    points_per_shape: int = Field(default=128, ge=8)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    noise_level: float = Field(default=0.0, ge=0.0, le=0.1)

    # 事前学習
    pretrain_epochs: int = Field(default=100, ge=0)
    pretrain_lr: float = Field(default=1e-3, gt=0.0)
    pretrain_batch_size: int = Field(default=8, ge=1)
    lr_decay: float = Field(default=0.99, gt=0.0, le=1.0)

    # 出力と評価
    output_dir: str = "runs/default"
    cd_scale: float = Field(default=100.0, gt=0.0)

    @field_validator("train_families", "test_families", "seeds", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("train_families", "test_families")
    @classmethod
    def _known_families(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one shape family is required")
        unknown = [family for family in value if family not in FAMILIES]
        if unknown:
            raise ValueError(f"unknown shape families {unknown}, expected a subset of {list(FAMILIES)}")
        return value

    @field_validator("ratio")
    @classmethod
    def _valid_ratio(cls, value: int) -> int:
        if value not in VALID_RATIOS:
            raise ValueError(f"ratio must be one of {list(VALID_RATIOS)}")
        return value

    @field_validator("seeds")
    @classmethod
    def _nonempty_seeds(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one seed is required")
        return value

    @model_validator(mode="after")
    def _enough_points_for_ratio(self) -> "RunConfig":
        # 内側タスクの入力 X↓ もバックボーンの最小点数を満たす必要がある
        check_points_for_ratio(self.points_per_shape, self.ratio)
        return self

    def meta_config(self, **overrides) -> MetaConfig:
        """アルゴリズム側の設定に変換する"""
        values = dict(
            alpha=self.alpha, beta=self.beta, inner_steps=self.inner_steps, batch_size=self.batch_size,
            gradient_mode=self.gradient_mode, ratio=self.ratio, max_meta_iters=self.max_meta_iters,
            seed=self.seed, batch_reduction=self.batch_reduction, clip_grad_norm=self.clip_grad_norm,
            sampling_method=self.sampling_method, workers=self.workers, log_interval=self.log_interval,
        )
        values.update(overrides)
        return MetaConfig(**values).validate()

    def backbone_config(self, seed: Optional[int] = None, ratio: Optional[int] = None) -> BackboneConfig:
        return BackboneConfig(
            ratio=self.ratio if ratio is None else ratio,
            feature_dim=self.feature_dim,
            hidden_layers=self.hidden_layers,
            offset_scale=self.offset_scale,
            seed=self.seed if seed is None else seed,
        ).validate()

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Noneでない上書き値を適用した新しい設定（検証付き）"""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_run_config(values)

    def digest(self) -> str:
        return hashlib.sha256(dump_run_config(self).encode("utf-8")).hexdigest()[:12]


def check_points_for_ratio(points_per_shape: int, ratio: int) -> None:
    """疎な点群の点数が MIN_INPUT_POINTS·ratio 以上か確認する"""
    if points_per_shape < MIN_INPUT_POINTS * ratio:
        raise ConfigurationError(
            f"points_per_shape={points_per_shape} is too small for ratio {ratio}: "
            f"the self-supervised input needs at least {MIN_INPUT_POINTS} points, "
            f"so points_per_shape must be >= {MIN_INPUT_POINTS * ratio}",
            key="points_per_shape",
        )


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    """辞書からRunConfigを作る（未知のキーはキー名付きでエラー）"""
    unknown = [key for key in values if key not in RunConfig.model_fields]
    if unknown:
        raise ConfigurationError(f"unknown configuration key '{unknown[0]}'", key=unknown[0])
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ())) or None
        raise ConfigurationError(f"invalid value for '{key}': {first.get('msg')}", key=key) from exc


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    """key = value 形式のテキストを解析する"""
    values: Dict[str, Any] = {}
    for line_number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{line_number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.model_fields:
            raise ConfigurationError(f"{source}:{line_number}: unknown configuration key '{key}'", key=key)
        if key in values:
            raise ConfigurationError(f"{source}:{line_number}: duplicate configuration key '{key}'", key=key)
        values[key] = None if value.lower() == "none" else value
    return build_run_config(values)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"configuration file not found: {path}")
    config = parse_run_config(path.read_text(encoding="utf-8"), source=str(path))
    logger.info(f"⚙️ [設定] 読み込み: {path} (digest={config.digest()})")
    return config


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_run_config(config: RunConfig) -> str:
    """正規化した key = value テキスト（宣言順）"""
    lines = [f"{name} = {_format_value(getattr(config, name))}" for name in RunConfig.model_fields]
    return "\n".join(lines) + "\n"


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_run_config(config), encoding="utf-8")
    return path


def resolve_workers(config: RunConfig) -> int:
    """MPU_THREADS で並列数の上限をかける"""
    cap = os.getenv("MPU_THREADS")
    if not cap:
        return config.workers
    try:
        return max(1, min(config.workers, int(cap)))
    except ValueError:
        raise ConfigurationError(f"MPU_THREADS must be an integer, got '{cap}'", key="MPU_THREADS")
