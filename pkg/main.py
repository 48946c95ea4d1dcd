"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

コマンドラインインターフェース

    python main.py gen-data   --config run.cfg
    python main.py pretrain   --config run.cfg
    python main.py meta-train --config run.cfg --checkpoint runs/x/pretrained.mpu
    python main.py upsample   --checkpoint runs/x/meta.mpu --mode meta-tta --input in.xyz --output out.ply
    python main.py eval-sweep --config run.cfg --ablation noise --levels 0,0.005,0.01,0.02
"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

# 環境変数の読み込み
load_dotenv()

from config.logging_config import setup_logging
from config.run_config import RunConfig, load_run_config
from experiment_runner import ABLATIONS, METHODS
from handlers.data_handler import handle_gen_data
from handlers.sweep_handler import handle_eval_sweep
from handlers.train_handler import handle_meta_train, handle_pretrain
from handlers.upsample_handler import handle_upsample
from pu_exceptions import PUError

logger = logging.getLogger('mpu_tta.cli')

# 入力起因のエラーは終了コード2、それ以外は1
USAGE_ERROR_CODES = ("config", "parse", "format")


def _number_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpu-tta",
        description="Meta-learned test-time adaptation for point cloud upsampling",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value 形式の実験設定ファイル")
    common.add_argument("--ratio", type=int, help="upsampling ratio r")
    common.add_argument("--inner-steps", type=int, dest="inner_steps", help="inner SGD steps N")
    common.add_argument("--alpha", type=float, help="inner learning rate")
    common.add_argument("--beta", type=float, help="outer learning rate")
    common.add_argument("--noise-level", type=float, dest="noise_level", help="noise level (fraction of bbox diagonal)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate synthetic training/test clouds")
    gen.set_defaults(handler=handle_gen_data)

    pre = sub.add_parser("pretrain", parents=[common], help="supervised pretraining")
    pre.set_defaults(handler=handle_pretrain)

    meta = sub.add_parser("meta-train", parents=[common], help="meta-learning from a pretrained checkpoint")
    meta.set_defaults(handler=handle_meta_train)

    up = sub.add_parser("upsample", parents=[common], help="upsample one point cloud")
    up.add_argument("--mode", choices=METHODS, default="meta-tta")
    up.add_argument("--input", help="sparse input cloud (.xyz or .ply)")
    up.add_argument("--output", help="dense output cloud (.xyz or .ply)")
    up.add_argument("--gt", help="ground-truth dense cloud; writes <output>.metrics.json")
    up.set_defaults(handler=handle_upsample)

    sweep = sub.add_parser("eval-sweep", parents=[common], help="run an ablation grid")
    sweep.add_argument("--ablation", choices=ABLATIONS, required=True)
    sweep.add_argument("--levels", type=_number_list, help="noise levels, e.g. 0,0.005,0.01,0.02")
    sweep.add_argument("--values", type=_number_list, help="ratios or inner-step counts")
    sweep.set_defaults(handler=handle_eval_sweep)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """設定ファイルを読み、フラグで上書きする"""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        ratio=args.ratio,
        inner_steps=args.inner_steps,
        alpha=args.alpha,
        beta=args.beta,
        noise_level=args.noise_level,
        seed=args.seed,
        output_dir=args.out,
    )


def format_error(exc: Exception, code: Optional[str] = None) -> str:
    """1行の機械可読なエラー表現"""
    code = code or getattr(exc, "code", "internal")
    message = str(exc).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error code={code} type={type(exc).__name__} message="{message}"'


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()
    logger.info(f"🚀 [CLI] {args.command} 開始")
    try:
        cfg = resolve_config(args)
        return args.handler(args, cfg)
    except PUError as exc:
        logger.error(f"❌ [CLI] {args.command} 失敗: {type(exc).__name__}: {exc}")
        print(format_error(exc), file=sys.stderr)
        return 2 if exc.code in USAGE_ERROR_CODES else 1
    except OSError as exc:
        logger.error(f"❌ [CLI] {args.command} 失敗: {exc}")
        print(format_error(exc, code="io"), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
