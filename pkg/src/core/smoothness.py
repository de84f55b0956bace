"""区分連続性と all-or-none 平滑性の格子上での検証

1次元・2次元格子のみを扱う。2次元は軸ごとの走査線で判定する。
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.core.component_map import ComponentMap
from src.core.config import settings
from src.core.errors import InvalidInputError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckConfig:
    """チェック設定

    jump_tol: 不連続とみなす最小ジャンプ
    refine_depth: ジャンプ位置を絞り込む二分探索の段数
    level_grid: all-or-none 判定に使うレベル c の集合
    neighborhood: 近傍幅 Δ
    margin: f = c とみなす許容差 δ
    plateau_cells: これを超える連続セルでの到達は「プラトー（判定不能）」
    """

    jump_tol: float
    refine_depth: int
    level_grid: Tuple[float, ...]
    neighborhood: float
    margin: float
    plateau_cells: int = 16
    min_grid: int = 16

    def __post_init__(self) -> None:
        if not self.jump_tol > 0:
            raise InvalidInputError(f"jump_tol must be > 0, got {self.jump_tol}")
        if self.refine_depth < 1:
            raise InvalidInputError(f"refine_depth must be >= 1, got {self.refine_depth}")
        if not self.neighborhood > 0:
            raise InvalidInputError(f"neighborhood must be > 0, got {self.neighborhood}")
        if self.margin < 0:
            raise InvalidInputError(f"margin must be >= 0, got {self.margin}")
        if self.plateau_cells < 1:
            raise InvalidInputError("plateau_cells must be >= 1")

    @classmethod
    def for_map(
        cls,
        cmap: ComponentMap,
        jump_tol: Optional[float] = None,
        levels: Optional[Sequence[float]] = None,
        refine_depth: Optional[int] = None,
    ) -> "CheckConfig":
        """写像の値域に合わせたスケール不変な既定値"""
        lo, hi = cmap.value_range()
        scale = hi - lo if hi > lo else 1.0
        if levels is None:
            levels = [lo + f * (hi - lo) for f in settings.level_fractions] if hi > lo else []
        return cls(
            jump_tol=settings.jump_tol_fraction * scale if jump_tol is None else jump_tol,
            refine_depth=settings.refine_depth if refine_depth is None else refine_depth,
            level_grid=tuple(float(c) for c in levels),
            neighborhood=settings.neighborhood_fraction * float(np.min(cmap.cell_widths())),
            margin=settings.attain_fraction * scale,
            plateau_cells=settings.plateau_cells,
            min_grid=settings.min_grid,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["level_grid"] = list(self.level_grid)
        return data


@dataclass(frozen=True)
class Discontinuity:
    location: Tuple[float, ...]
    axis: int
    left: float
    right: float
    jump: float


@dataclass(frozen=True)
class IrregularPoint:
    location: Tuple[float, ...]
    level: float


@dataclass(frozen=True)
class LevelResult:
    """レベルごとの結果。status は ok / plateau / rejected"""

    level: float
    status: str
    count: Optional[int]
    points: Tuple[Tuple[float, ...], ...] = ()


@dataclass
class SmoothnessReport:
    """区分連続性・all-or-none 平滑性の検証結果"""

    config: CheckConfig
    grid_shape: Tuple[int, ...]
    discontinuities: List[Discontinuity] = field(default_factory=list)
    piecewise_continuous: bool = True
    # 格子上ではジャンプに見えたが、絞り込みで連続と判定したセル
    near_jumps: List[Discontinuity] = field(default_factory=list)
    levels: List[LevelResult] = field(default_factory=list)
    all_or_none: Optional[bool] = None
    name: str = "map"

    @property
    def irregular_points(self) -> List[IrregularPoint]:
        return [
            IrregularPoint(location=p, level=r.level)
            for r in self.levels
            if r.status == "ok"
            for p in r.points
        ]

    @property
    def verdict(self) -> bool:
        return self.piecewise_continuous and self.all_or_none is not False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "grid_shape": list(self.grid_shape),
            "config": self.config.to_dict(),
            "discontinuities": [asdict(d) for d in self.discontinuities],
            "near_jumps": [asdict(d) for d in self.near_jumps],
            "irregular_points": [asdict(p) for p in self.irregular_points],
            "levels": [
                {"level": r.level, "status": r.status, "count": r.count} for r in self.levels
            ],
            "piecewise_continuous": self.piecewise_continuous,
            "all_or_none": self.all_or_none,
            "verdict": self.verdict,
        }


def summary_rows(report: SmoothnessReport) -> List[Dict[str, Any]]:
    """CLI 向けの CSV サマリー行"""
    rows: List[Dict[str, Any]] = [
        {"kind": "discontinuity", "level": None, "status": "ok", "count": len(report.discontinuities)},
        {"kind": "near_jump", "level": None, "status": "ok", "count": len(report.near_jumps)},
    ]
    for r in report.levels:
        rows.append({"kind": "level", "level": r.level, "status": r.status, "count": r.count})
    return rows


# ----------------------------------------------------------------------
# 走査線
# ----------------------------------------------------------------------
@dataclass
class _Jump:
    start: int  # 最初のセル
    stop: int  # 最後のセル（含む）
    location: float
    left: float
    right: float


@dataclass
class _Line:
    axis: int
    fixed: Tuple[float, ...]
    x: np.ndarray
    y: np.ndarray
    evaluate: Optional[Callable[[np.ndarray], np.ndarray]]
    jumps: List[_Jump] = field(default_factory=list)
    near: List[_Jump] = field(default_factory=list)

    def point(self, t: float) -> Tuple[float, ...]:
        coords = list(self.fixed)
        coords.insert(self.axis, float(t))
        return tuple(coords)


def _screen(y: np.ndarray, tol: float) -> List[Tuple[int, int]]:
    """隣接差が近傍差の中央値を tol 以上上回るセルを候補とし、連続する候補をまとめる"""
    d = np.abs(np.diff(y))
    n = len(d)
    padded = np.concatenate([np.full(2, np.nan), d, np.full(2, np.nan)])
    neighbors = np.stack([padded[k: k + n] for k in (0, 1, 3, 4)])
    with np.errstate(all="ignore"):
        predicted = np.nanmedian(neighbors, axis=0)
    # 端のセルは片側の近傍しかないため線形外挿・両隣の平均で予測する
    if n >= 4:
        predicted[0] = 2.0 * d[1] - d[2]
        predicted[-1] = 2.0 * d[-2] - d[-3]
        predicted[1] = 0.5 * (d[0] + d[2])
        predicted[-2] = 0.5 * (d[-3] + d[-1])
    flagged = np.nonzero((d > tol) & (d - predicted > tol))[0]
    groups: List[Tuple[int, int]] = []
    for i in flagged:
        if groups and i == groups[-1][1] + 1:
            groups[-1] = (groups[-1][0], int(i))
        else:
            groups.append((int(i), int(i)))
    return groups


def _bisect(
    evaluate: Callable[[np.ndarray], np.ndarray], a: float, b: float, depth: int
) -> Tuple[float, float, float, float]:
    fa, fb = (float(v) for v in evaluate(np.array([a, b])))
    for _ in range(depth):
        m = 0.5 * (a + b)
        fm = float(evaluate(np.array([m]))[0])
        if abs(fm - fa) >= abs(fb - fm):
            b, fb = m, fm
        else:
            a, fa = m, fm
    return a, b, fa, fb


def _lines(cmap: ComponentMap, cfg: CheckConfig) -> List[_Line]:
    if cmap.dim not in (1, 2):
        raise InvalidInputError(f"only 1-D and 2-D maps can be certified, got dim={cmap.dim}")
    for k, n in enumerate(cmap.shape):
        if n < cfg.min_grid:
            raise InvalidInputError(f"axis {k} has {n} samples; at least {cfg.min_grid} required")
    if not np.all(np.isfinite(cmap.value)):
        raise InvalidInputError(f"map '{cmap.name}' has non-finite values")

    lines: List[_Line] = []
    for axis in range(cmap.dim):
        others = [k for k in range(cmap.dim) if k != axis]
        for index in np.ndindex(*[cmap.shape[k] for k in others]):
            fixed = tuple(float(cmap.axes[k][i]) for k, i in zip(others, index))
            slicer: List[Any] = list(index)
            slicer.insert(axis, slice(None))
            evaluate = None
            if cmap.source is not None:
                evaluate = _line_evaluator(cmap, axis, fixed)
            line = _Line(axis, fixed, cmap.axes[axis], cmap.value[tuple(slicer)], evaluate)
            line.jumps, line.near = _line_jumps(line, cfg)
            lines.append(line)
    return lines


def _line_evaluator(
    cmap: ComponentMap, axis: int, fixed: Tuple[float, ...]
) -> Callable[[np.ndarray], np.ndarray]:
    def evaluate(t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        cols = [np.full(len(t), v) for v in fixed]
        cols.insert(axis, t)
        return cmap.evaluate(np.stack(cols, axis=1))

    return evaluate


def _line_jumps(line: _Line, cfg: CheckConfig) -> Tuple[List[_Jump], List[_Jump]]:
    """(ジャンプ, 近ジャンプ)。近ジャンプは格子値では jump_tol を超えるが絞り込みで消えたセル"""
    jumps: List[_Jump] = []
    near: List[_Jump] = []
    for start, stop in _screen(line.y, cfg.jump_tol):
        a, b = float(line.x[start]), float(line.x[stop + 1])
        grid_left, grid_right = float(line.y[start]), float(line.y[stop + 1])
        left, right = grid_left, grid_right
        if line.evaluate is not None:
            a, b, left, right = _bisect(line.evaluate, a, b, cfg.refine_depth)
        if abs(right - left) > cfg.jump_tol and np.isfinite(left) and np.isfinite(right):
            jumps.append(_Jump(start, stop, 0.5 * (a + b), left, right))
        elif abs(grid_right - grid_left) > cfg.jump_tol:
            mid = 0.5 * (float(line.x[start]) + float(line.x[stop + 1]))
            near.append(_Jump(start, stop, mid, grid_left, grid_right))
    return jumps, near


# ----------------------------------------------------------------------
# 不連続点
# ----------------------------------------------------------------------
def _discontinuities(lines: Sequence[_Line], near: bool = False) -> List[Discontinuity]:
    found = []
    for line in lines:
        for j in line.near if near else line.jumps:
            found.append(
                Discontinuity(
                    location=line.point(j.location),
                    axis=line.axis,
                    left=j.left,
                    right=j.right,
                    jump=abs(j.right - j.left),
                )
            )
    return found


def detect_discontinuities(
    cmap: ComponentMap, cfg: Optional[CheckConfig] = None
) -> SmoothnessReport:
    """隣接サンプルのジャンプを検出し、二分探索で位置を絞り込む"""
    cfg = CheckConfig.for_map(cmap) if cfg is None else cfg
    lines = _lines(cmap, cfg)
    found = _discontinuities(lines)
    finite = all(np.isfinite(d.left) and np.isfinite(d.right) for d in found)
    logger.info(f"Map '{cmap.name}': {len(found)} discontinuities detected")
    return SmoothnessReport(
        config=cfg,
        grid_shape=cmap.shape,
        discontinuities=found,
        piecewise_continuous=finite,
        near_jumps=_discontinuities(lines, near=True),
        name=cmap.name,
    )


# ----------------------------------------------------------------------
# 不規則点（レベル交差）
# ----------------------------------------------------------------------
def _inside_jump(line: _Line, start: int, stop: int, c: float) -> bool:
    """セル範囲がジャンプと重なり、レベルがジャンプの左右極限の間にあるか"""
    for j in line.jumps:
        if start <= j.stop and stop >= j.start and min(j.left, j.right) < c < max(j.left, j.right):
            return True
    return False


def _scan_line(line: _Line, c: float, cfg: CheckConfig) -> Tuple[List[float], bool]:
    s = line.y - c
    near = np.abs(s) <= cfg.margin
    nz = np.nonzero(~near)[0]
    found: List[float] = []
    crossing_cells: List[int] = []
    plateau = False
    lo_edge, hi_edge = float(line.x[0]), float(line.x[-1])

    for p, q in zip(nz[:-1], nz[1:]):
        if np.sign(s[p]) == np.sign(s[q]):
            continue
        if _inside_jump(line, int(p), int(q) - 1, c):
            continue
        if q == p + 1:
            t = float(line.x[p] + (line.x[q] - line.x[p]) * s[p] / (s[p] - s[q]))
        elif q == p + 2:
            t = float(line.x[p + 1])
        else:
            # 平坦区間で c を横切る
            if q - p > cfg.plateau_cells:
                plateau = True
            continue
        crossing_cells.append(int(p))
        # 近傍 (t - Δ, t + Δ) に c より真に大きい値と小さい値が両方あること
        delta = cfg.neighborhood
        if t - delta <= lo_edge or t + delta >= hi_edge:
            continue
        left, right = np.interp([t - delta, t + delta], line.x, s)
        if left * right < 0:
            found.append(t)

    # 連続するセルすべてで交差が続く場合は密な振動と区別できない
    run = 1
    for a, b in zip(crossing_cells[:-1], crossing_cells[1:]):
        run = run + 1 if b == a + 1 else 1
        if run > cfg.plateau_cells:
            plateau = True
            break
    return found, plateau


def _check_level(cmap: ComponentMap, c: float) -> None:
    lo, hi = cmap.value_range()
    if not lo < c < hi:
        raise InvalidInputError(f"level c={c} outside open range ({lo}, {hi})")


def _scan_level(lines: Sequence[_Line], c: float, cfg: CheckConfig) -> LevelResult:
    points: List[Tuple[float, ...]] = []
    plateau = False
    for line in lines:
        found, flat = _scan_line(line, c, cfg)
        plateau = plateau or flat
        points.extend(line.point(t) for t in found)
    if plateau:
        logger.warning(f"Level c={c}: plateau or dense crossing, count indeterminate")
        return LevelResult(level=c, status="plateau", count=None, points=tuple(points))
    return LevelResult(level=c, status="ok", count=len(points), points=tuple(points))


def find_irregular_points(
    cmap: ComponentMap, c: float, cfg: Optional[CheckConfig] = None
) -> List[Tuple[float, ...]]:
    """f = c を満たし、両側に c より大きい値と小さい値を持つ点"""
    cfg = CheckConfig.for_map(cmap) if cfg is None else cfg
    _check_level(cmap, c)
    return list(_scan_level(_lines(cmap, cfg), c, cfg).points)


def _levels_result(
    cmap: ComponentMap, lines: Sequence[_Line], levels: Sequence[float], cfg: CheckConfig
) -> Tuple[bool, List[LevelResult]]:
    results = []
    for c in levels:
        try:
            _check_level(cmap, c)
        except InvalidInputError:
            results.append(LevelResult(level=float(c), status="rejected", count=None))
            continue
        results.append(_scan_level(lines, float(c), cfg))
    verdict = all(r.status != "plateau" for r in results)
    return verdict, results


def check_all_or_none_smoothness(
    cmap: ComponentMap, levels: Optional[Sequence[float]] = None, cfg: Optional[CheckConfig] = None
) -> Tuple[bool, List[LevelResult]]:
    """各レベルの不規則点が有限個かを判定。値域外のレベルは rejected として数えない"""
    cfg = CheckConfig.for_map(cmap) if cfg is None else cfg
    levels = cfg.level_grid if levels is None else levels
    return _levels_result(cmap, _lines(cmap, cfg), levels, cfg)


def certify(cmap: ComponentMap, cfg: Optional[CheckConfig] = None) -> SmoothnessReport:
    """不連続点と all-or-none 平滑性をまとめて検証した完全なレポート"""
    cfg = CheckConfig.for_map(cmap) if cfg is None else cfg
    lines = _lines(cmap, cfg)
    found = _discontinuities(lines)
    verdict, results = _levels_result(cmap, lines, cfg.level_grid, cfg)
    report = SmoothnessReport(
        config=cfg,
        grid_shape=cmap.shape,
        discontinuities=found,
        piecewise_continuous=all(np.isfinite(d.left) and np.isfinite(d.right) for d in found),
        near_jumps=_discontinuities(lines, near=True),
        levels=results,
        all_or_none=verdict,
        name=cmap.name,
    )
    logger.info(
        f"Certified '{cmap.name}': {len(found)} discontinuities, verdict={report.verdict}"
    )
    return report


# ----------------------------------------------------------------------
# 合成の保存性
# ----------------------------------------------------------------------
@dataclass
class CompositionReport:
    composite: ComponentMap
    composite_report: SmoothnessReport
    outer_report: SmoothnessReport
    inner_reports: List[SmoothnessReport]
    mapped_outer_count: int
    count_bound: int
    count_ok: bool
    smoothness_ok: bool

    @property
    def preserved(self) -> bool:
        return self.count_ok and self.smoothness_ok

    def to_dict(self) -> Dict[str, Any]:
        return {
            "composite": self.composite_report.to_dict(),
            "outer": self.outer_report.to_dict(),
            "inners": [r.to_dict() for r in self.inner_reports],
            "mapped_outer_count": self.mapped_outer_count,
            "count_bound": self.count_bound,
            "count_ok": self.count_ok,
            "smoothness_ok": self.smoothness_ok,
            "preserved": self.preserved,
        }


def compose(outer: ComponentMap, inners: Sequence[ComponentMap]) -> ComponentMap:
    """f(f_1, ..., f_k) を内側写像の格子上で構成する"""
    if len(inners) == 0:
        raise InvalidInputError("composition needs at least one inner map")
    if outer.dim != len(inners):
        raise InvalidInputError(
            f"outer '{outer.name}' has dim {outer.dim} but {len(inners)} inner maps were given"
        )
    base = inners[0]
    for j, inner in enumerate(inners):
        if inner.shape != base.shape or not all(
            np.array_equal(a, b) for a, b in zip(inner.axes, base.axes)
        ):
            raise InvalidInputError(f"inner[{j}] '{inner.name}' is not on the grid of inner[0]")
        lo, hi = inner.value_range()
        span = outer.upper[j] - outer.lower[j]
        slack = 1e-9 * span
        if lo < outer.lower[j] - slack or hi > outer.upper[j] + slack:
            raise InvalidInputError(
                f"inner[{j}] '{inner.name}' range [{lo}, {hi}] leaves outer '{outer.name}' "
                f"axis {j} domain [{outer.lower[j]}, {outer.upper[j]}]"
            )

    stacked = np.stack([inner.value.reshape(-1) for inner in inners], axis=1)
    values = outer.evaluate(stacked).reshape(base.shape)
    source = None
    if all(inner.source is not None for inner in inners):

        def source(x: np.ndarray) -> np.ndarray:
            inner_values = np.stack([inner.evaluate(x) for inner in inners], axis=1)
            return outer.evaluate(inner_values)

    name = f"{outer.name}({','.join(inner.name for inner in inners)})"
    return ComponentMap(
        axes=base.axes, value=values, lower=base.lower, upper=base.upper, name=name, source=source
    )


def _mapped_count_1d(outer_report: SmoothnessReport, inner: ComponentMap, tol: float) -> int:
    """外側の不連続位置を内側写像のセルが通過する回数"""
    total = 0
    for line_values in _inner_lines(inner):
        lo = np.minimum(line_values[:-1], line_values[1:])
        hi = np.maximum(line_values[:-1], line_values[1:])
        for d in outer_report.discontinuities:
            total += int(np.sum((lo - tol <= d.location[0]) & (d.location[0] <= hi + tol)))
    return total


def _inner_lines(inner: ComponentMap) -> Iterator[np.ndarray]:
    for axis in range(inner.dim):
        moved = np.moveaxis(inner.value, axis, -1)
        for row in moved.reshape(-1, inner.shape[axis]):
            yield row


def _mapped_count_nd(outer: ComponentMap, outer_report: SmoothnessReport, inners: Sequence[ComponentMap]) -> int:
    """k 次元の外側写像: 不連続点に接するセルを像の線分が通過する回数"""
    flagged = set()
    for d in outer_report.discontinuities:
        cell = []
        for k in range(outer.dim):
            i = int(np.clip(np.searchsorted(outer.axes[k], d.location[k]) - 1, 0, outer.shape[k] - 2))
            cell.append(i)
        for k in range(outer.dim):
            if k == d.axis:
                continue
            for shift in (-1, 0):
                neighbor = list(cell)
                neighbor[k] = int(np.clip(cell[k] + shift, 0, outer.shape[k] - 2))
                flagged.add(tuple(neighbor))
        flagged.add(tuple(cell))
    if not flagged:
        return 0

    widths = outer.cell_widths()
    lines = [list(_inner_lines(inner)) for inner in inners]
    total = 0
    for rows in zip(*lines):
        image = np.stack(rows, axis=1)
        for a, b in zip(image[:-1], image[1:]):
            m = int(2 * np.ceil(np.max(np.abs(b - a) / widths))) + 2
            path = a[None, :] + np.linspace(0.0, 1.0, m)[:, None] * (b - a)[None, :]
            cells = {
                tuple(
                    int(np.clip(np.searchsorted(outer.axes[k], pt[k]) - 1, 0, outer.shape[k] - 2))
                    for k in range(outer.dim)
                )
                for pt in path
            }
            if cells & flagged:
                total += 1
    return total


def verify_composition_preservation(
    outer: ComponentMap,
    inners: Sequence[ComponentMap],
    cfg: Optional[CheckConfig] = None,
) -> CompositionReport:
    """合成写像が区分連続性と all-or-none 平滑性を保つかを経験的に確かめる"""
    composite = compose(outer, inners)

    def run(cmap: ComponentMap) -> SmoothnessReport:
        return certify(cmap, cfg if cfg is not None else CheckConfig.for_map(cmap))

    inner_reports = [run(inner) for inner in inners]
    outer_report = run(outer)
    composite_report = run(composite)

    if len(inners) == 1:
        tol = 1e-12 * float(outer.upper[0] - outer.lower[0])
        mapped = _mapped_count_1d(outer_report, inners[0], tol)
    else:
        mapped = _mapped_count_nd(outer, outer_report, inners)
    bound = sum(len(r.discontinuities) for r in inner_reports) + mapped
    count_ok = len(composite_report.discontinuities) <= bound
    inputs_true = outer_report.verdict and all(r.verdict for r in inner_reports)
    smoothness_ok = (not inputs_true) or composite_report.verdict
    if not (count_ok and smoothness_ok):
        logger.warning(
            f"Composition '{composite.name}' not preserved: "
            f"count {len(composite_report.discontinuities)} vs bound {bound}, "
            f"composite verdict {composite_report.verdict}"
        )
    return CompositionReport(
        composite=composite,
        composite_report=composite_report,
        outer_report=outer_report,
        inner_reports=inner_reports,
        mapped_outer_count=mapped,
        count_bound=bound,
        count_ok=count_ok,
        smoothness_ok=smoothness_ok,
    )
