#!/usr/bin/env python3
"""
点群アップサンプリング用のカスタム例外
CLIはcodeを1行エラー出力に使う
"""

from typing import Optional, Sequence


class PUError(Exception):
    """MPU-TTA全体の基底例外"""

    code = "error"

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class ParameterError(PUError):
    """引数の値が不正な場合の例外"""

    code = "parameter"


class DegenerateInputError(PUError):
    """退化した入力（対角長ゼロ、点数不足など）の例外"""

    code = "degenerate"


class ShapeError(PUError):
    """テンソル形状の不一致"""

    code = "shape"

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: shape mismatch {shown}")


class ContractError(PUError):
    """前提条件（スカラー損失、スキーマ一致など）違反の例外"""

    code = "contract"


class DataError(PUError):
    """学習データの不整合"""

    code = "data"

    def __init__(self, message: str, pair_index: Optional[int] = None):
        self.pair_index = pair_index
        if pair_index is not None:
            message = f"pair {pair_index}: {message}"
        super().__init__(message)


class DivergenceError(PUError):
    """勾配にNaN/Infが出た場合の例外（スキップせず中断する）"""

    code = "divergence"

    def __init__(self, iteration: int, pair_index: Optional[int], parameter_name: str):
        self.iteration = iteration
        self.pair_index = pair_index
        self.parameter_name = parameter_name
        super().__init__(
            f"non-finite gradient at iteration {iteration}, "
            f"pair {pair_index}, parameter '{parameter_name}'"
        )


class ConfigurationError(PUError):
    """設定ファイル・CLIフラグ・チェックポイントの不整合"""

    code = "config"

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


class PointCloudParseError(PUError):
    """ファイル内容の解析失敗（行番号付き）"""

    code = "parse"

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = path or "<stream>"
        if line_number is not None:
            location = f"{location}:{line_number}"
        super().__init__(f"{location}: {message}")


class PointCloudFormatError(PUError):
    """未対応のフォーマット・プロパティ型"""

    code = "format"


class CheckpointFormatError(PointCloudFormatError):
    """チェックポイントの破損・切り詰め・非互換"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
