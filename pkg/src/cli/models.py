"""CLI が読み書きするファイルのスキーマ"""
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

from src.core.bio_components import HHParams, LIFParams, SynapseParams


class FileModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(FileModel):
    """一様格子（端点込み）"""
    lower: float = Field(..., allow_inf_nan=False, description="下端")
    upper: float = Field(..., allow_inf_nan=False, description="上端")
    n: int = Field(64, ge=2, description="サンプル数")

    @model_validator(mode="after")
    def _non_empty(self) -> "GridSpec":
        if self.lower >= self.upper:
            raise ValueError("grid lower must be below upper")
        return self


# ----------------------------------------------------------------------
# コンポーネント定義ファイル（cmd_map）
# ----------------------------------------------------------------------
class LIFComponentFile(FileModel):
    """LIF ニューロンの f–I 写像"""
    schema_version: int = 1
    kind: Literal["lif"]
    params: LIFParams = Field(default_factory=LIFParams)
    grid: GridSpec
    window: Optional[float] = Field(None, gt=0, description="発火率を測る窓 (ms)")
    transient: Optional[float] = Field(None, ge=0, description="捨てる過渡時間 (ms)")
    dt: Optional[float] = Field(None, gt=0, description="積分刻み (ms)")


class HHComponentFile(FileModel):
    """HH ニューロンの f–I 写像"""
    schema_version: int = 1
    kind: Literal["hh"]
    params: HHParams = Field(default_factory=HHParams)
    grid: GridSpec
    window: Optional[float] = Field(None, gt=0)
    transient: Optional[float] = Field(None, ge=0)
    dt: Optional[float] = Field(None, gt=0)


class SynapseComponentFile(FileModel):
    """シナプスの伝達写像"""
    schema_version: int = 1
    kind: Literal["synapse"]
    params: SynapseParams = Field(default_factory=SynapseParams)
    grid: GridSpec


ComponentFile = Annotated[
    Union[LIFComponentFile, HHComponentFile, SynapseComponentFile],
    Field(discriminator="kind"),
]
component_file_adapter: TypeAdapter = TypeAdapter(ComponentFile)


# ----------------------------------------------------------------------
# 回路ファイル
# ----------------------------------------------------------------------
class MapRef(FileModel):
    kind: Literal["map"]
    path: str = Field(..., description="写像ファイル（JSON または CSV）")


class TwinRef(FileModel):
    kind: Literal["twin"]
    path: str = Field(..., description="SLFN ファイル")


class LinearRef(FileModel):
    kind: Literal["linear"]
    gain: float = Field(1.0, allow_inf_nan=False)
    bias: float = Field(0.0, allow_inf_nan=False)
    lower: float = -1.0
    upper: float = 1.0


class LIFRef(FileModel):
    kind: Literal["lif"]
    params: LIFParams = Field(default_factory=LIFParams)
    dt: float = Field(1.0, gt=0)
    amplitude: float = Field(1.0, allow_inf_nan=False)
    lower: float = 0.0
    upper: float = 2.0


ComponentRef = Annotated[
    Union[MapRef, TwinRef, LinearRef, LIFRef], Field(discriminator="kind")
]


class VertexSpec(FileModel):
    id: str = Field(..., min_length=1)
    component: ComponentRef


class EdgeSpec(FileModel):
    id: str = Field(..., min_length=1)
    source: str
    target: str
    component: ComponentRef
    delay: int = Field(0, ge=0, description="遅延（刻み数）")
    probability: float = Field(1.0, ge=0, le=1, description="伝達確率")


class GraphFile(FileModel):
    """回路の隣接表現。コンポーネントはファイルパスまたはインラインで参照"""
    schema_version: int = 1
    name: str = "circuit"
    vertices: List[VertexSpec]
    edges: List[EdgeSpec] = []
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str]


# ----------------------------------------------------------------------
# レポート
# ----------------------------------------------------------------------
class ReportEnvelope(BaseModel):
    """payload は再実行で同一、タイムスタンプは metadata に分離"""
    payload: Dict[str, Any]
    metadata: Dict[str, Any]
