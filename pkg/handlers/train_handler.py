"""
pretrain / meta-train サブコマンド
"""

import argparse
import logging
from pathlib import Path
from typing import Optional

from config.run_config import RunConfig, save_run_config
from experiment_runner import build_training_pairs
from meta_learner import AdamState, TrainingLog, meta_train, pretrain
from pu_exceptions import ConfigurationError
from upsampler import Upsampler, load_checkpoint, save_checkpoint

logger = logging.getLogger('mpu_tta.cli')

PRETRAINED_CHECKPOINT = "pretrained.mpu"
META_CHECKPOINT = "meta.mpu"


def load_model_for(checkpoint: Optional[str], requested_ratio: Optional[int]) -> Upsampler:
    """
    チェックポイントを読み、フラグで指定された倍率と照合する

    Raises:
        ConfigurationError: チェックポイント未指定・不在、または倍率の不一致
    """
    if not checkpoint:
        raise ConfigurationError("missing checkpoint: pass --checkpoint", key="checkpoint")
    model = load_checkpoint(checkpoint)
    if requested_ratio is not None and requested_ratio != model.ratio:
        raise ConfigurationError(
            f"checkpoint {checkpoint} was trained for ratio {model.ratio}, but --ratio {requested_ratio} was given",
            key="ratio",
        )
    return model


def handle_pretrain(args: argparse.Namespace, cfg: RunConfig) -> int:
    """教師あり事前学習を行い <out>/pretrained.mpu を書き出す"""
    out = Path(cfg.output_dir)
    data = build_training_pairs(cfg, cfg.ratio, cfg.seed)
    model = Upsampler.init(cfg.backbone_config())
    adam = AdamState.for_params(model.params, base_lr=cfg.pretrain_lr, decay=cfg.lr_decay)
    log = TrainingLog(out / "pretrain_log.tsv")
    trained = pretrain(model, data, cfg.pretrain_epochs, adam, batch_size=cfg.pretrain_batch_size,
                       seed=cfg.seed, log=log)
    path = save_checkpoint(trained, args.checkpoint or out / PRETRAINED_CHECKPOINT)
    save_run_config(cfg, out / "run_config.txt")
    print(f"pretrained checkpoint: {path}")
    return 0


def handle_meta_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    """事前学習済みチェックポイントからメタ学習を行い <out>/meta.mpu を書き出す"""
    out = Path(cfg.output_dir)
    source = args.checkpoint or str(out / PRETRAINED_CHECKPOINT)
    model = load_model_for(source, args.ratio)
    if cfg.ratio != model.ratio:
        cfg = cfg.with_overrides(ratio=model.ratio)
    data = build_training_pairs(cfg, cfg.ratio, cfg.seed)
    log = TrainingLog(out / "meta_train_log.tsv")
    trained = meta_train(model, data, cfg.meta_config(), log=log)
    path = save_checkpoint(trained, out / META_CHECKPOINT)
    save_run_config(cfg, out / "run_config.txt")
    print(f"meta-trained checkpoint: {path}")
    return 0
