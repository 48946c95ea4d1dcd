"""
Pydantic models for metric and sweep reports
"""

import math
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field, field_serializer, field_validator

# 評価レポートの固定ヘッダー（機械可読インターフェース）
REPORT_COLUMNS = [
    "ablation", "condition", "method",
    "cd_sum_e2", "cd_sum_std_e2", "cd_mean_e2", "cd_mean_std_e2",
    "psnr_db", "psnr_std_db", "shape_count", "seed_count",
]
TIMING_COLUMNS = ["ablation", "condition", "method", "adapt_ms", "infer_ms", "total_ms"]
FLOAT_FORMAT = "%.6f"


class MetricReport(BaseModel):
    """1組の点群に対する評価指標（CD・PSNR・処理時間）"""

    cd_sum: float = Field(ge=0.0)
    cd_mean: float = Field(ge=0.0)
    psnr_db: float
    wall_time_ms: float = Field(default=0.0, ge=0.0)
    y_count: int = 0
    g_count: int = 0

    @field_validator("psnr_db")
    @classmethod
    def _psnr_not_nan(cls, value: float) -> float:
        if math.isnan(value):
            raise ValueError("psnr_db must not be NaN")
        return value

    def psnr_text(self) -> str:
        return "inf" if math.isinf(self.psnr_db) and self.psnr_db > 0 else f"{self.psnr_db:.4f}"

    @field_serializer("psnr_db", when_used="json")
    def _psnr_json(self, value: float) -> Union[float, str]:
        # JSONに無限大のトークンはないので文字列で書く
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value


class SweepRow(BaseModel):
    """アブレーション表の1行"""

    ablation: str
    condition: str
    method: str
    cd_sum_e2: float
    cd_sum_std_e2: float
    cd_mean_e2: float
    cd_mean_std_e2: float
    psnr_db: float
    psnr_std_db: float
    adapt_ms: float = 0.0
    infer_ms: float = 0.0
    shape_count: int
    seed_count: int

    @property
    def total_ms(self) -> float:
        return self.adapt_ms + self.infer_ms


class SweepReport(BaseModel):
    """評価スイープの結果（アブレーション表1つ分）"""

    ablation: str
    rows: List[SweepRow] = Field(default_factory=list)
    config_digest: Optional[str] = None
    # 表の列に載らない要約値（例: 勾配モード間のコサイン類似度）
    extras: Dict[str, float] = Field(default_factory=dict)

    def rows_for(self, method: str) -> List[SweepRow]:
        return [row for row in self.rows if row.method == method]

    def to_dataframe(self, include_timing: bool = False) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = row.model_dump()
            record["total_ms"] = row.total_ms
            records.append(record)
        columns = list(REPORT_COLUMNS)
        if include_timing:
            columns += ["adapt_ms", "infer_ms", "total_ms"]
        return pd.DataFrame.from_records(records, columns=columns)

    def write_report(self, path: Union[str, Path]) -> Path:
        """決定的なタブ区切りレポート（時間列なし）を書き出す"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(path, sep="\t", index=False, float_format=FLOAT_FORMAT,
                                   na_rep="nan", lineterminator="\n")
        return path

    def write_timing(self, path: Union[str, Path]) -> Path:
        """処理時間の付随ファイル（ハードウェア依存）を書き出す"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = self.to_dataframe(include_timing=True)[TIMING_COLUMNS]
        frame.to_csv(path, sep="\t", index=False, float_format="%.3f", na_rep="nan",
                     lineterminator="\n")
        return path

    def to_table(self, include_timing: bool = True) -> str:
        """人間向けの整列テーブル"""
        frame = self.to_dataframe(include_timing=include_timing)
        return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")

    @classmethod
    def read_report(cls, path: Union[str, Path]) -> "SweepReport":
        """write_reportで書いたファイルを読み戻す（時間列は0）"""
        frame = pd.read_csv(path, sep="\t", dtype={"condition": str}, keep_default_na=False,
                            na_values=["nan"])
        # numpyのスカラーはPythonの型に戻してから検証する
        records = [
            {key: value.item() if hasattr(value, "item") else value for key, value in record.items()}
            for record in frame.to_dict(orient="records")
        ]
        rows = [SweepRow(**record) for record in records]
        ablation = rows[0].ablation if rows else Path(path).stem
        return cls(ablation=ablation, rows=rows)
