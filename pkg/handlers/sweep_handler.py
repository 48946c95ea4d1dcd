"""
eval-sweep サブコマンド
"""

import argparse
import logging
from pathlib import Path

from config.run_config import RunConfig, save_run_config
from experiment_runner import ExperimentRunner

logger = logging.getLogger('mpu_tta.cli')


def handle_eval_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    """
    アブレーションを実行してレポートを書き出す

    <out>/<ablation>.tsv        決定的なタブ区切りレポート
    <out>/<ablation>_timing.tsv 処理時間
    <out>/<ablation>_table.txt  整列テーブル
    """
    out = Path(cfg.output_dir)
    values = args.levels if args.levels is not None else args.values
    report = ExperimentRunner(cfg).run(args.ablation, values)

    report.write_report(out / f"{report.ablation}.tsv")
    report.write_timing(out / f"{report.ablation}_timing.tsv")
    table = report.to_table()
    (out / f"{report.ablation}_table.txt").write_text(table + "\n", encoding="utf-8")
    save_run_config(cfg, out / "run_config.txt")

    print(table)
    for name, value in report.extras.items():
        print(f"{name}={value:.6f}")
    logger.info(f"✅ [評価] {report.ablation}: {out}")
    return 0
