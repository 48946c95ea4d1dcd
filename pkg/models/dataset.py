"""
Pydantic models for generated datasets
"""

from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, Field


class ManifestEntry(BaseModel):
    split: str
    seed: int
    index: int
    family: Optional[str] = None
    sparse: str
    dense: str
    sparse_count: int = Field(ge=1)
    dense_count: int = Field(ge=1)


class DatasetManifest(BaseModel):
    """gen-dataで書き出した点群ファイルの一覧"""

    ratio: int
    noise_level: float
    config_digest: str
    entries: List[ManifestEntry] = Field(default_factory=list)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
