"""
upsample サブコマンド
"""

import argparse
import logging
import time
from pathlib import Path

from config.run_config import RunConfig
from handlers.train_handler import load_model_for
from meta_learner import meta_test, naive_tta
from nn_metrics import evaluate
from point_cloud import PointCloud, denormalize, normalize_to_unit
from pu_exceptions import ConfigurationError
from upsampler import Upsampler, predict
from utils.point_cloud_io import read_point_cloud, write_point_cloud

logger = logging.getLogger('mpu_tta.cli')


def run_mode(model: Upsampler, x: PointCloud, mode: str, cfg: RunConfig) -> PointCloud:
    """正規化済みの入力に対して指定モードでアップサンプリングする"""
    if mode == "frozen":
        return predict(model, x)
    if mode == "naive-tta":
        return naive_tta(model, x, cfg.inner_steps, cfg.alpha, cfg.sampling_method, cfg.clip_grad_norm).y
    if mode == "meta-tta":
        return meta_test(model, x, cfg.meta_config(ratio=model.ratio)).y
    raise ConfigurationError(f"unknown mode '{mode}'", key="mode")


def handle_upsample(args: argparse.Namespace, cfg: RunConfig) -> int:
    """
    疎な点群を読み、r倍に密にして書き出す

    入力は単位立方体に正規化してからモデルに通し、出力は元の座標系に戻す。
    --gt があればMetricReportを <output>.metrics.json に書く
    """
    if not args.input or not args.output:
        raise ConfigurationError("upsample requires --input and --output", key="input")
    model = load_model_for(args.checkpoint, args.ratio)
    x = read_point_cloud(args.input)
    normalized, scale, offset = normalize_to_unit(x)

    started = time.perf_counter()
    y = denormalize(run_mode(model, normalized, args.mode, cfg), scale, offset)
    wall_ms = (time.perf_counter() - started) * 1000.0
    output = write_point_cloud(y, args.output)
    logger.info(f"✅ [アップサンプリング] mode={args.mode}, {x.count} → {y.count}点, {wall_ms:.1f}ms")
    print(f"wrote {y.count} points to {output}")

    if args.gt:
        report = evaluate(y, read_point_cloud(args.gt), wall_time_ms=wall_ms)
        metrics_path = Path(f"{output}.metrics.json")
        metrics_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        print(f"cd_sum={report.cd_sum:.6g} cd_mean={report.cd_mean:.6g} psnr_db={report.psnr_text()}")
    return 0
