"""
ログ設定とローテーション機能
"""

import os
import shutil
import logging
from typing import Optional

from dotenv import load_dotenv

DEFAULT_LOG_FILE = 'mpu_tta.log'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_log_rotation(log_file: str) -> str:
    """ログローテーション設定（無条件実行）"""
    backup_file = f'{log_file}.1'

    # 既存のログファイルがある場合は無条件でバックアップを作成
    if os.path.exists(log_file):
        try:
            if os.path.exists(backup_file):
                os.remove(backup_file)
            shutil.move(log_file, backup_file)
        except OSError as e:
            print(f"⚠️ ログローテーション失敗: {str(e)}")

    return log_file


# ログ設定の状態管理
_logging_configured = False


def setup_logging(log_file: Optional[str] = None, console_level: Optional[str] = None) -> logging.Logger:
    """
    ログ設定を初期化

    Args:
        log_file: ログファイルのパス（省略時は MPU_LOG_FILE または mpu_tta.log）
        console_level: コンソールのログレベル（省略時は MPU_LOG_LEVEL または INFO）
    """
    global _logging_configured

    # 既に設定済みの場合はスキップ
    if _logging_configured:
        logger = logging.getLogger('mpu_tta')
        logger.debug("🔧 [ログ設定] 既に設定済みのためスキップ")
        return logger

    load_dotenv()
    log_file = setup_log_rotation(log_file or os.getenv('MPU_LOG_FILE', DEFAULT_LOG_FILE))
    console_level = (console_level or os.getenv('MPU_LOG_LEVEL', 'INFO')).upper()

    # ファイルハンドラー（INFOレベルで適度なログ量）
    file_handler = logging.FileHandler(log_file, encoding='utf-8', mode='a')
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    # コンソールハンドラー
    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, console_level, logging.INFO))
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    # mpu_ttaロガー設定（重複回避のためルートロガーには追加しない）
    mpu_logger = logging.getLogger('mpu_tta')
    mpu_logger.setLevel(logging.DEBUG)
    mpu_logger.addHandler(file_handler)
    mpu_logger.addHandler(console_handler)

    # 内側ループの詳細はDEBUG（ファイルには出力されない）
    logging.getLogger('mpu_tta.engine').setLevel(logging.INFO)
    logging.getLogger('mpu_tta.geometry').setLevel(logging.INFO)
    logging.getLogger('mpu_tta.metrics').setLevel(logging.INFO)
    logging.getLogger('mpu_tta.meta').setLevel(logging.DEBUG)
    logging.getLogger('mpu_tta.runner').setLevel(logging.DEBUG)

    # 並列実行まわりはINFO
    logging.getLogger('mpu_tta.task_manager').setLevel(logging.INFO)

    logger = logging.getLogger('mpu_tta')
    logger.info(f"🔧 [ログ設定] mpu_ttaロガー設定完了: file={log_file}, console={console_level}")

    # 設定完了フラグを設定
    _logging_configured = True

    return logger
