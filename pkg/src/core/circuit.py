"""ニューロン（頂点）とシナプス（辺）からなる回路の離散時間評価とツイン置換"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from src.core.approximator import SLFN, TrainReport, forward, train_to_tolerance
from src.core.bio_components import LIFParams, lif_rate
from src.core.component_map import ComponentMap
from src.core.config import settings
from src.core.errors import DivergenceError, InvalidInputError
from src.core.seeding import derive_seed, make_rng


logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# コンポーネント
# ----------------------------------------------------------------------
class Component:
    """スカラー入力 → スカラー出力の素子（バッチ化）

    状態はコンポーネント自身には持たせず、評価ごとに init_state で作って受け渡す。
    """

    kind: str = "component"
    dynamic: bool = False

    def init_state(self, batch: int) -> Any:
        return None

    def step(self, x: np.ndarray, state: Any) -> Tuple[np.ndarray, Any]:
        return self.static(x), state

    def static(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def domain(self) -> Tuple[float, float]:
        raise NotImplementedError

    def static_map(self, n: int = 257) -> ComponentMap:
        lower, upper = self.domain()
        return ComponentMap.from_function(
            lambda p: self.static(np.asarray(p)[:, 0]), lower, upper, n, name=self.kind
        )


@dataclass(frozen=True, eq=False)
class MapComponent(Component):
    """格子写像で評価する素子。定義域外の入力は境界で飽和"""

    cmap: ComponentMap
    path: Optional[str] = None
    kind: str = "map"

    def __post_init__(self) -> None:
        if self.cmap.dim != 1:
            raise InvalidInputError(f"circuit components are scalar maps; '{self.cmap.name}' has dim {self.cmap.dim}")

    def static(self, x: np.ndarray) -> np.ndarray:
        return self.cmap.evaluate(np.asarray(x, dtype=float).reshape(-1))

    def domain(self) -> Tuple[float, float]:
        return float(self.cmap.lower[0]), float(self.cmap.upper[0])

    def static_map(self, n: int = 257) -> ComponentMap:
        return self.cmap


@dataclass(frozen=True, eq=False)
class TwinComponent(Component):
    """学習済み SLFN で評価する素子"""

    net: SLFN
    path: Optional[str] = None
    kind: str = "twin"

    def __post_init__(self) -> None:
        if self.net.input_dim != 1 or self.net.output_dim != 1:
            raise InvalidInputError(
                f"twin must map 1 -> 1, got {self.net.input_dim} -> {self.net.output_dim}"
            )
        if self.net.lower is None:
            raise InvalidInputError("twin net needs an input domain")

    def static(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float).reshape(-1), self.net.lower[0], self.net.upper[0])
        return forward(self.net, x.reshape(-1, 1))[:, 0]

    def domain(self) -> Tuple[float, float]:
        return float(self.net.lower[0]), float(self.net.upper[0])


@dataclass(frozen=True, eq=False)
class LinearComponent(Component):
    """y = gain · x + bias（飽和なし）。lower / upper は学習用の定義域"""

    gain: float = 1.0
    bias: float = 0.0
    lower: float = -1.0
    upper: float = 1.0
    kind: str = "linear"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.gain) and math.isfinite(self.bias)):
            raise InvalidInputError("linear gain and bias must be finite")
        if not self.lower < self.upper:
            raise InvalidInputError(f"empty domain: [{self.lower}, {self.upper}]")

    def static(self, x: np.ndarray) -> np.ndarray:
        return self.gain * np.asarray(x, dtype=float) + self.bias

    def domain(self) -> Tuple[float, float]:
        return self.lower, self.upper


@dataclass(frozen=True, eq=False)
class LIFNeuronComponent(Component):
    """LIF の動的モデル。発火した刻みに amplitude、それ以外 0 を出力

    静的写像は1刻みあたりの平均出力 amplitude · dt · rate(i)。
    """

    params: LIFParams = field(default_factory=LIFParams)
    dt: float = 1.0
    amplitude: float = 1.0
    lower: float = 0.0
    upper: float = 2.0
    kind: str = "lif"
    dynamic: bool = True

    def init_state(self, batch: int) -> np.ndarray:
        return np.full(batch, self.params.v_reset)

    def step(self, x: np.ndarray, state: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        i = np.asarray(x, dtype=float)
        v = i + (state - i) * math.exp(-self.dt / self.params.tau)
        fired = v >= self.params.theta
        v = np.where(fired, self.params.v_reset, v)
        return np.where(fired, self.amplitude, 0.0), v

    def static(self, x: np.ndarray) -> np.ndarray:
        return self.amplitude * self.dt * np.asarray(lif_rate(self.params, x), dtype=float)

    def domain(self) -> Tuple[float, float]:
        return self.lower, self.upper


# ----------------------------------------------------------------------
# グラフ
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Vertex:
    id: str
    component: Component


@dataclass(frozen=True, eq=False)
class Edge:
    """source の出力を delay 刻み遅れで受け取り、伝達確率 probability を掛けて target へ送る"""

    id: str
    source: str
    target: str
    component: Component
    delay: int = 0
    probability: float = 1.0


@dataclass(frozen=True, eq=False)
class CircuitGraph:
    """有向回路グラフ

    inputs / outputs はポート名 → 頂点 id。頂点の入力は入力ポートと流入辺の出力の和。
    遅延 0 の辺だけからなる部分グラフは DAG でなければならない。
    """

    vertices: Tuple[Vertex, ...]
    edges: Tuple[Edge, ...]
    inputs: Mapping[str, str]
    outputs: Mapping[str, str]
    name: str = "circuit"
    order: Tuple[str, ...] = field(default=(), init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "inputs", dict(self.inputs))
        object.__setattr__(self, "outputs", dict(self.outputs))

        seen: Dict[str, str] = {}
        for item, label in itertools.chain(
            ((v, "vertex") for v in self.vertices), ((e, "edge") for e in self.edges)
        ):
            if item.id in seen:
                raise InvalidInputError(f"duplicate component id '{item.id}'")
            seen[item.id] = label
        vertex_ids = {v.id for v in self.vertices}
        for e in self.edges:
            for end in (e.source, e.target):
                if end not in vertex_ids:
                    raise InvalidInputError(f"edge '{e.id}' refers to unknown vertex '{end}'")
            if not isinstance(e.delay, (int, np.integer)) or e.delay < 0:
                raise InvalidInputError(f"edge '{e.id}' delay must be a non-negative integer")
            if not 0.0 <= e.probability <= 1.0:
                raise InvalidInputError(f"edge '{e.id}' probability must lie in [0, 1]")
        for port, vid in itertools.chain(self.inputs.items(), self.outputs.items()):
            if vid not in vertex_ids:
                raise InvalidInputError(f"port '{port}' refers to unknown vertex '{vid}'")
        if not self.outputs:
            raise InvalidInputError("graph needs at least one output port")
        object.__setattr__(self, "order", self._topological_order())

    def _topological_order(self) -> Tuple[str, ...]:
        # 遅延 0 の辺だけで Kahn 法
        indegree = {v.id: 0 for v in self.vertices}
        children: Dict[str, List[str]] = {v.id: [] for v in self.vertices}
        for e in self.edges:
            if e.delay == 0:
                indegree[e.target] += 1
                children[e.source].append(e.target)
        ready = [v.id for v in self.vertices if indegree[v.id] == 0]
        order: List[str] = []
        while ready:
            vid = ready.pop(0)
            order.append(vid)
            for child in children[vid]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
        if len(order) != len(self.vertices):
            stuck = sorted(vid for vid, deg in indegree.items() if deg > 0)
            raise InvalidInputError(f"zero-delay cycle through vertices {stuck}")
        return tuple(order)

    # ------------------------------------------------------------------
    def vertex(self, vid: str) -> Vertex:
        for v in self.vertices:
            if v.id == vid:
                return v
        raise InvalidInputError(f"unknown vertex '{vid}'")

    def components(self) -> Dict[str, Component]:
        found: Dict[str, Component] = {v.id: v.component for v in self.vertices}
        found.update({e.id: e.component for e in self.edges})
        return found

    def component(self, cid: str) -> Component:
        components = self.components()
        if cid not in components:
            raise InvalidInputError(f"unknown component id '{cid}'")
        return components[cid]

    def incoming(self, vid: str) -> List[Edge]:
        return [e for e in self.edges if e.target == vid]

    def replace_component(self, cid: str, component: Component) -> "CircuitGraph":
        self.component(cid)
        vertices = tuple(replace(v, component=component) if v.id == cid else v for v in self.vertices)
        edges = tuple(replace(e, component=component) if e.id == cid else e for e in self.edges)
        return CircuitGraph(vertices, edges, self.inputs, self.outputs, self.name)

    def without_edge(self, eid: str) -> "CircuitGraph":
        if eid not in {e.id for e in self.edges}:
            raise InvalidInputError(f"unknown edge '{eid}'")
        edges = tuple(e for e in self.edges if e.id != eid)
        return CircuitGraph(self.vertices, edges, self.inputs, self.outputs, self.name)


# ----------------------------------------------------------------------
# 評価
# ----------------------------------------------------------------------
@dataclass
class CircuitTrace:
    """全頂点の出力系列 (T, B) と、発散した試行のマスク"""

    vertices: Dict[str, np.ndarray]
    diverged: np.ndarray
    squeeze: bool = False

    def series(self, vid: str) -> np.ndarray:
        values = self.vertices[vid]
        return values[:, 0] if self.squeeze else values

    def ports(self, graph: CircuitGraph) -> Dict[str, np.ndarray]:
        return {port: self.series(vid) for port, vid in graph.outputs.items()}


def _prepare_inputs(
    graph: CircuitGraph, inputs: Mapping[str, Any], steps: int
) -> Tuple[Dict[str, np.ndarray], int, bool]:
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise InvalidInputError(f"missing input series for ports {sorted(missing)}")
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise InvalidInputError(f"unknown input ports {sorted(unknown)}")
    arrays: Dict[str, np.ndarray] = {}
    batch: Optional[int] = None
    squeeze = True
    for port, series in inputs.items():
        arr = np.asarray(series, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        else:
            squeeze = False
        if arr.ndim != 2:
            raise InvalidInputError(f"input '{port}' must be (T,) or (T, batch)")
        if arr.shape[0] < steps:
            raise InvalidInputError(f"input '{port}' has {arr.shape[0]} steps, {steps} required")
        if batch is not None and arr.shape[1] != batch:
            raise InvalidInputError("all input series must share the batch size")
        batch = arr.shape[1]
        arrays[port] = arr
    return arrays, batch or 1, squeeze


def trace(
    graph: CircuitGraph,
    inputs: Mapping[str, Any],
    steps: int,
    seed: Optional[int] = None,
    transmission: str = "expected",
    on_divergence: str = "raise",
) -> CircuitTrace:
    """同期的な離散時間評価

    各刻み t で、頂点を遅延 0 の辺に関するトポロジカル順に評価する。
    辺の出力は p · S(y_source(t − delay))、t − delay < 0 では y = 0 とする。
    transmission="bernoulli" なら p の代わりに (seed, 辺 id) で決まる乱数で通す。
    """
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    if transmission not in ("expected", "bernoulli"):
        raise InvalidInputError(f"unknown transmission mode '{transmission}'")
    seed = settings.seed if seed is None else seed
    arrays, batch, squeeze = _prepare_inputs(graph, inputs, steps)

    y = {v.id: np.zeros((steps, batch)) for v in graph.vertices}
    vertex_state = {v.id: v.component.init_state(batch) for v in graph.vertices}
    edge_state = {e.id: e.component.init_state(batch) for e in graph.edges}
    rngs = (
        {e.id: make_rng(seed, "transmission", e.id) for e in graph.edges}
        if transmission == "bernoulli" else {}
    )
    incoming = {v.id: graph.incoming(v.id) for v in graph.vertices}
    port_targets: Dict[str, List[str]] = {v.id: [] for v in graph.vertices}
    for port, vid in graph.inputs.items():
        port_targets[vid].append(port)
    components = {v.id: v.component for v in graph.vertices}
    diverged = np.zeros(batch, dtype=bool)
    zeros = np.zeros(batch)

    with np.errstate(all="ignore"):
        for t in range(steps):
            for vid in graph.order:
                u = zeros.copy()
                for port in port_targets[vid]:
                    u = u + arrays[port][t]
                for e in incoming[vid]:
                    src_t = t - e.delay
                    x = y[e.source][src_t] if src_t >= 0 else zeros
                    s, edge_state[e.id] = e.component.step(x, edge_state[e.id])
                    if transmission == "bernoulli":
                        s = s * (rngs[e.id].random(batch) < e.probability)
                    else:
                        s = e.probability * s
                    u = u + s
                out, vertex_state[vid] = components[vid].step(u, vertex_state[vid])
                bad = ~np.isfinite(out)
                if np.any(bad):
                    if on_divergence == "raise":
                        raise DivergenceError(
                            f"non-finite output at vertex '{vid}', step {t}", step=t, field=vid
                        )
                    diverged |= bad
                    out = np.where(bad, np.nan, out)
                y[vid][t] = out
    return CircuitTrace(vertices=y, diverged=diverged, squeeze=squeeze)


def evaluate(
    graph: CircuitGraph,
    inputs: Mapping[str, Any],
    steps: int,
    seed: Optional[int] = None,
    transmission: str = "expected",
) -> Dict[str, np.ndarray]:
    """出力ポートごとの時系列を返す。非有限値は DivergenceError（step 付き）"""
    return trace(graph, inputs, steps, seed, transmission).ports(graph)


def static_response(
    graph: CircuitGraph, n: int = 257, steps: Optional[int] = None, name: Optional[str] = None
) -> ComponentMap:
    """一定入力を保持したときの入出力写像（単一入力・単一出力の回路）

    steps を省略した場合は遅延の総和 + 1 刻み後の出力を読む。
    """
    if len(graph.inputs) != 1 or len(graph.outputs) != 1:
        raise InvalidInputError("static response needs exactly one input and one output port")
    (port, vid), = graph.inputs.items()
    lower, upper = graph.vertex(vid).component.domain()
    horizon = steps if steps is not None else sum(e.delay for e in graph.edges) + 1
    grid = np.linspace(lower, upper, n)

    def respond(points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=float)[:, 0]
        series = trace(graph, {port: np.tile(x, (horizon, 1))}, horizon).ports(graph)
        return next(iter(series.values()))[-1]

    return ComponentMap(
        axes=(grid,),
        value=respond(grid[:, None]),
        lower=np.array([lower]),
        upper=np.array([upper]),
        name=name or f"{graph.name}_static",
        source=respond,
    )


def substitute(
    graph: CircuitGraph, component_id: str, twin: Union[SLFN, Component]
) -> CircuitGraph:
    """指定コンポーネントをツインで置き換えたグラフ（トポロジーは不変）"""
    original = graph.component(component_id)
    replacement = TwinComponent(twin) if isinstance(twin, SLFN) else twin
    if isinstance(replacement, TwinComponent):
        lower, upper = original.domain()
        if not np.allclose(replacement.domain(), (lower, upper), rtol=1e-9, atol=0.0):
            logger.warning(
                f"Twin domain {replacement.domain()} differs from component '{component_id}' domain {(lower, upper)}"
            )
    return graph.replace_component(component_id, replacement)


# ----------------------------------------------------------------------
# 誤差の伝播
# ----------------------------------------------------------------------
def lipschitz_estimate(component: Component, n: int = 257) -> float:
    """格子上の差分の最大傾き × 膨張率"""
    cmap = component.static_map(n)
    slopes = np.abs(np.diff(cmap.value) / np.diff(cmap.axes[0]))
    return float(np.max(slopes)) * settings.lipschitz_inflation


@dataclass
class ErrorBudget:
    """出力ポートでの誤差上界 Σ_i c_i δ_i

    c_i は成分 i から出力までの全経路（閉路は幾何級数で閉じる）の Lipschitz 積の和。
    ループゲインが 1 以上なら bounded=False で、原因の閉路を cycle に記録する。
    """

    bound: Optional[float]
    bounded: bool
    coefficients: Dict[str, float]
    deltas: Dict[str, float]
    lipschitz: Dict[str, float]
    cycle: Optional[List[str]] = None
    loop_gain: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bound": self.bound,
            "bounded": self.bounded,
            "coefficients": self.coefficients,
            "deltas": self.deltas,
            "lipschitz": self.lipschitz,
            "cycle": self.cycle,
            "loop_gain": self.loop_gain,
        }


def _gain_matrix(
    graph: CircuitGraph, lipschitz: Mapping[str, float]
) -> Tuple[List[str], np.ndarray]:
    ids = [v.id for v in graph.vertices] + [e.id for e in graph.edges]
    index = {cid: k for k, cid in enumerate(ids)}
    A = np.zeros((len(ids), len(ids)))
    for e in graph.edges:
        A[index[e.target], index[e.id]] = lipschitz[e.target]
        A[index[e.id], index[e.source]] = e.probability * lipschitz[e.id]
    return ids, A


def _loop_blocks(A: np.ndarray) -> List[np.ndarray]:
    """閉路を含む強連結成分（2要素以上か自己ループを持つもの）の添字"""
    if not len(A):
        return []
    count, labels = csgraph.connected_components(
        csr_matrix(A.T != 0), directed=True, connection="strong"
    )
    blocks = []
    for label in range(count):
        members = np.nonzero(labels == label)[0]
        if len(members) > 1 or A[members[0], members[0]] != 0:
            blocks.append(members)
    return blocks


def _simple_cycles(A: np.ndarray, members: np.ndarray, limit: int = 100000) -> Iterable[List[int]]:
    """members 内で A[i, j] != 0 を j → i の辺とみなした単純閉路（最小番号の頂点から始まるもの）

    探索は limit 回の辺の走査で打ち切る。
    """
    inside = {int(k) for k in members}
    succ = {j: [int(i) for i in np.nonzero(A[:, j])[0] if int(i) in inside] for j in inside}
    steps = 0
    for start in sorted(inside):
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for nxt in succ[node]:
                steps += 1
                if steps > limit:
                    return
                if nxt == start:
                    yield list(path)
                elif nxt > start and nxt not in path:
                    stack.append((nxt, path + [nxt]))


def downstream_gains(
    graph: CircuitGraph, lipschitz: Optional[Mapping[str, float]] = None
) -> Tuple[Dict[str, float], Optional[List[str]], Optional[float]]:
    """各コンポーネントの下流ゲイン係数 c_i

    戻り値は (係数, 原因の閉路, ループゲイン)。ループゲインが 1 以上なら係数は空。
    閉路は強連結成分の内側だけで探すので、DAG では探索しない。
    """
    lipschitz = dict(lipschitz) if lipschitz is not None else {}
    for cid, comp in graph.components().items():
        if cid not in lipschitz:
            lipschitz[cid] = lipschitz_estimate(comp)
    ids, A = _gain_matrix(graph, lipschitz)

    for block in _loop_blocks(A):
        for cycle in _simple_cycles(A, block):
            gain = 1.0
            for a, b in zip(cycle, cycle[1:] + cycle[:1]):
                gain *= A[b, a]
            if gain >= 1.0:
                return {}, [ids[k] for k in cycle], float(gain)
        radius = float(np.max(np.abs(np.linalg.eigvals(A[np.ix_(block, block)]))))
        if radius >= 1.0:
            return {}, sorted(ids[k] for k in block), radius

    out = np.zeros(len(ids))
    for vid in set(graph.outputs.values()):
        out[ids.index(vid)] = 1.0
    coefficients = np.linalg.solve((np.eye(len(ids)) - A).T, out)
    return {cid: float(c) for cid, c in zip(ids, coefficients)}, None, None


@dataclass
class TwinEntry:
    component_id: str
    net: SLFN
    delta: float
    seed: int
    report: TrainReport
    volume: float = 1.0

    @property
    def met(self) -> bool:
        return bool(self.report.met)

    @property
    def achieved_rms(self) -> float:
        """検証誤差を定義域の長さで正規化した RMS"""
        return float(self.report.held_out_l2 or 0.0) / math.sqrt(self.volume)


@dataclass
class TwinAssignment:
    """コンポーネントごとのツインと置換後のグラフ"""

    entries: List[TwinEntry]
    twinned: CircuitGraph
    budget: ErrorBudget
    composite: Optional["CompositeEstimate"] = None
    seed: int = 0

    @property
    def unmet(self) -> List[str]:
        return [e.component_id for e in self.entries if not e.met]

    def deltas(self) -> Dict[str, float]:
        """予算に使う誤差: 目標 δ_i と達成 RMS の大きい方"""
        return {e.component_id: max(e.delta, e.achieved_rms) for e in self.entries}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "components": [
                {
                    "component_id": e.component_id,
                    "delta": e.delta,
                    "seed": e.seed,
                    "met": e.met,
                    "hidden_count": e.net.hidden_count,
                    "report": e.report.to_dict(),
                }
                for e in self.entries
            ],
            "unmet": self.unmet,
            "budget": self.budget.to_dict(),
            "composite": None if self.composite is None else self.composite.to_dict(),
        }


def error_budget(
    assignment: Union[TwinAssignment, Mapping[str, float]],
    graph: CircuitGraph,
    lipschitz: Optional[Mapping[str, float]] = None,
) -> ErrorBudget:
    """Σ_i δ_i · (成分 i の下流ゲイン係数)。δ を持たない成分は δ = 0"""
    deltas = dict(assignment.deltas() if isinstance(assignment, TwinAssignment) else assignment)
    for cid, value in deltas.items():
        graph.component(cid)
        if value < 0:
            raise InvalidInputError(f"delta for '{cid}' must be >= 0")
    resolved = dict(lipschitz) if lipschitz is not None else {}
    for cid, comp in graph.components().items():
        if cid not in resolved:
            resolved[cid] = lipschitz_estimate(comp)
    coefficients, cycle, gain = downstream_gains(graph, resolved)
    if cycle is not None:
        logger.warning(f"Error budget unbounded: loop gain {gain:.3g} on cycle {cycle}")
        return ErrorBudget(None, False, {}, deltas, resolved, cycle, gain)
    bound = float(sum(coefficients[cid] * d for cid, d in deltas.items()))
    logger.info(f"Error budget for '{graph.name}': {bound:.4g}")
    return ErrorBudget(bound, True, coefficients, deltas, resolved)


# ----------------------------------------------------------------------
# モンテカルロ
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class InputSpec:
    """入力ポートごとの分布（uniform: (low, high)、normal: (mean, std)）をホールドして並べる"""

    ranges: Mapping[str, Tuple[float, float]]
    kind: str = "uniform"
    hold: int = 4
    horizon: int = 32

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "normal"):
            raise InvalidInputError(f"unknown input distribution '{self.kind}'")
        if self.hold < 1 or self.horizon < 1:
            raise InvalidInputError("hold and horizon must be >= 1")

    @classmethod
    def for_graph(
        cls,
        graph: CircuitGraph,
        kind: str = "uniform",
        hold: Optional[int] = None,
        horizon: Optional[int] = None,
    ) -> "InputSpec":
        """各入力ポートの接続先コンポーネントの定義域で一様"""
        ranges = {port: graph.vertex(vid).component.domain() for port, vid in graph.inputs.items()}
        return cls(
            ranges=ranges,
            kind=kind,
            hold=settings.mc_hold if hold is None else hold,
            horizon=settings.mc_steps if horizon is None else horizon,
        )

    def sample(self, trials: int, seed: int) -> Dict[str, np.ndarray]:
        n_holds = -(-self.horizon // self.hold)
        series = {}
        for port in sorted(self.ranges):
            p, q = self.ranges[port]
            rng = make_rng(seed, "inputs", port)
            if self.kind == "uniform":
                draws = rng.uniform(p, q, size=(n_holds, trials))
            else:
                draws = rng.normal(p, q, size=(n_holds, trials))
            series[port] = np.repeat(draws, self.hold, axis=0)[: self.horizon]
        return series

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "hold": self.hold,
            "horizon": self.horizon,
            "ranges": {k: list(v) for k, v in sorted(self.ranges.items())},
        }


@dataclass
class CompositeEstimate:
    rms: float
    trials: int
    used: int
    excluded: int
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rms": self.rms,
            "trials": self.trials,
            "used": self.used,
            "excluded": self.excluded,
            "seed": self.seed,
        }


def composite_error(
    original: CircuitGraph,
    twinned: CircuitGraph,
    input_spec: Optional[InputSpec] = None,
    trials: Optional[int] = None,
    seed: Optional[int] = None,
    transmission: str = "expected",
) -> CompositeEstimate:
    """出力偏差の二乗平均平方根のモンテカルロ推定。発散した試行は除外して数える"""
    if set(original.inputs) != set(twinned.inputs) or set(original.outputs) != set(twinned.outputs):
        raise InvalidInputError("original and twinned graphs must expose the same ports")
    trials = settings.mc_trials if trials is None else trials
    seed = settings.seed if seed is None else seed
    if trials < 1:
        raise InvalidInputError(f"trials must be >= 1, got {trials}")
    spec = InputSpec.for_graph(original) if input_spec is None else input_spec
    inputs = spec.sample(trials, seed)

    a = trace(original, inputs, spec.horizon, seed, transmission, on_divergence="mask")
    b = trace(twinned, inputs, spec.horizon, seed, transmission, on_divergence="mask")
    keep = ~(a.diverged | b.diverged)
    excluded = int(np.sum(~keep))
    if excluded:
        logger.warning(f"Excluded {excluded} of {trials} Monte Carlo trials after divergence")
    if not np.any(keep):
        return CompositeEstimate(float("nan"), trials, 0, excluded, seed)

    sq = [
        (a.vertices[vid][:, keep] - b.vertices[twinned.outputs[port]][:, keep]) ** 2
        for port, vid in sorted(original.outputs.items())
    ]
    rms = float(np.sqrt(np.mean(np.stack(sq))))
    return CompositeEstimate(rms, trials, int(np.sum(keep)), excluded, seed)


# ----------------------------------------------------------------------
# ツイン化
# ----------------------------------------------------------------------
def _split_delta(
    graph: CircuitGraph, delta: float, ids: Sequence[str]
) -> Dict[str, float]:
    coefficients, cycle, gain = downstream_gains(graph)
    if cycle is not None:
        raise InvalidInputError(
            f"cannot split a global delta: loop gain {gain:.3g} on cycle {cycle}"
        )
    k = len(ids)
    return {cid: delta / (k * coefficients[cid]) if coefficients[cid] > 0 else delta / k for cid in ids}


def twinize(
    graph: CircuitGraph,
    delta: Union[float, Mapping[str, float]],
    method: str = "elm",
    seed: Optional[int] = None,
    budget: Optional[int] = None,
    split: bool = False,
    input_spec: Optional[InputSpec] = None,
    trials: Optional[int] = None,
    max_workers: Optional[int] = None,
    hidden_scale: Optional[float] = None,
    ridge: Optional[float] = None,
) -> TwinAssignment:
    """全コンポーネントのツインを学習し、置換したグラフを返す

    delta が数値で split=True なら全体の δ を δ_i = δ / (k · c_i) に分ける。
    コンポーネントごとのシードは derive_seed(seed, id)。
    """
    seed = settings.seed if seed is None else seed
    max_workers = settings.max_workers if max_workers is None else max_workers
    components = graph.components()
    ids = list(components)

    if isinstance(delta, Mapping):
        missing = set(ids) - set(delta)
        if missing:
            raise InvalidInputError(f"no delta for components {sorted(missing)}")
        deltas = {cid: float(delta[cid]) for cid in ids}
    elif split:
        deltas = _split_delta(graph, float(delta), ids)
    else:
        deltas = {cid: float(delta) for cid in ids}

    def train(cid: str) -> TwinEntry:
        child = derive_seed(seed, cid)
        cmap = components[cid].static_map()
        net, report = train_to_tolerance(
            cmap, deltas[cid], method, budget, child, hidden_scale=hidden_scale, ridge=ridge
        )
        volume = float(np.prod(cmap.upper - cmap.lower))
        return TwinEntry(cid, net, deltas[cid], child, report, volume)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            entries = list(pool.map(train, ids))
    else:
        entries = [train(cid) for cid in ids]

    twinned = graph
    for entry in entries:
        twinned = substitute(twinned, entry.component_id, entry.net)
    assignment = TwinAssignment(
        entries=entries,
        twinned=twinned,
        budget=ErrorBudget(None, False, {}, {}, {}),
        seed=seed,
    )
    assignment.budget = error_budget(assignment, graph)
    if input_spec is not None or trials is not None:
        assignment.composite = composite_error(graph, twinned, input_spec, trials, seed)
    if assignment.unmet:
        logger.warning(f"Components missed their tolerance: {assignment.unmet}")
    logger.info(f"Twinized {len(entries)} components of '{graph.name}'")
    return assignment
