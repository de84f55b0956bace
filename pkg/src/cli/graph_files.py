"""回路ファイルの読み書き"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

from src.cli.models import GraphFile, LIFRef, LinearRef, MapRef, TwinRef
from src.core.approximator import SLFN
from src.core.circuit import (
    CircuitGraph,
    Component,
    Edge,
    LIFNeuronComponent,
    LinearComponent,
    MapComponent,
    TwinComponent,
    Vertex,
)
from src.core.component_map import ComponentMap
from src.core.config import settings
from src.core.errors import InvalidInputError


logger = logging.getLogger(__name__)


def _resolve(ref: Any, base: Path) -> Component:
    if isinstance(ref, MapRef):
        return MapComponent(ComponentMap.load(base / ref.path), path=ref.path)
    if isinstance(ref, TwinRef):
        return TwinComponent(SLFN.load(base / ref.path), path=ref.path)
    if isinstance(ref, LinearRef):
        return LinearComponent(ref.gain, ref.bias, ref.lower, ref.upper)
    if isinstance(ref, LIFRef):
        return LIFNeuronComponent(ref.params, ref.dt, ref.amplitude, ref.lower, ref.upper)
    raise InvalidInputError(f"unsupported component reference: {ref!r}")


def load_graph(path: Union[str, Path]) -> CircuitGraph:
    """回路 JSON を読み込む。相対パスはファイルの置かれたディレクトリ基準"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        spec = GraphFile.model_validate(json.load(f))
    base = path.parent
    vertices = [Vertex(v.id, _resolve(v.component, base)) for v in spec.vertices]
    edges = [
        Edge(e.id, e.source, e.target, _resolve(e.component, base), e.delay, e.probability)
        for e in spec.edges
    ]
    graph = CircuitGraph(vertices, edges, spec.inputs, spec.outputs, spec.name)
    logger.info(f"Loaded graph '{graph.name}': {len(vertices)} vertices, {len(edges)} edges")
    return graph


def _component_ref(cid: str, component: Component, base: Path) -> Dict[str, Any]:
    if isinstance(component, TwinComponent):
        rel = component.path or f"twins/{cid}.json"
        component.net.save(base / rel)
        return {"kind": "twin", "path": rel}
    if isinstance(component, MapComponent):
        rel = component.path or f"maps/{cid}.json"
        if component.path is None or not (base / rel).exists():
            component.cmap.save(base / rel)
        return {"kind": "map", "path": rel}
    if isinstance(component, LinearComponent):
        return {
            "kind": "linear",
            "gain": component.gain,
            "bias": component.bias,
            "lower": component.lower,
            "upper": component.upper,
        }
    if isinstance(component, LIFNeuronComponent):
        return {
            "kind": "lif",
            "params": component.params.model_dump(),
            "dt": component.dt,
            "amplitude": component.amplitude,
            "lower": component.lower,
            "upper": component.upper,
        }
    raise InvalidInputError(f"component '{cid}' cannot be serialized")


def save_graph(graph: CircuitGraph, path: Union[str, Path]) -> None:
    """回路 JSON を書き出す。ツインや写像の実体は同じディレクトリ以下に保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    data = {
        "schema_version": settings.schema_version,
        "name": graph.name,
        "vertices": [
            {"id": v.id, "component": _component_ref(v.id, v.component, base)}
            for v in graph.vertices
        ],
        "edges": [
            {
                "id": e.id,
                "source": e.source,
                "target": e.target,
                "delay": int(e.delay),
                "probability": e.probability,
                "component": _component_ref(e.id, e.component, base),
            }
            for e in graph.edges
        ],
        "inputs": dict(graph.inputs),
        "outputs": dict(graph.outputs),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True, indent=2)
    logger.info(f"Saved graph '{graph.name}' to {path}")
