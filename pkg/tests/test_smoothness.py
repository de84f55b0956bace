"""区分連続性・all-or-none 平滑性チェック

解析的な表（格子は conftest のフィクスチャ）:

| 写像                         | 不連続点 | レベル c → 不規則点                  |
|------------------------------|----------|--------------------------------------|
| sin on [−π, π]               | 0        | −0.5 → 2, 0 → 1（端点 ±π を数えれば 2。両側の近傍がないため除外）, 0.5 → 2 |
| Heaviside on [−1, 1]         | 1 (x=0)  | 0.5 → 0（ジャンプがレベルを飛び越す）     |
| 三角波 3周期 on [0, 3]       | 0        | 0 → 6（各周期で 1/4, 3/4）             |
| x² on [−1, 1]                | 0        | 0 → 値域外, 0.25 → 2 (±0.5)           |
| LIF f–I (θ=1) on [0, 2]      | 1 (i=θ)  |                                      |
"""
import numpy as np
import pytest
from scipy.special import expit

from src.core.bio_components import LIFParams, SynapseParams, lif_rate, synapse_curve, synapse_map
from src.core.component_map import ComponentMap
from src.core.errors import InvalidInputError
from src.core.seeding import make_rng
from src.core.smoothness import (
    CheckConfig,
    certify,
    check_all_or_none_smoothness,
    compose,
    detect_discontinuities,
    find_irregular_points,
    summary_rows,
    verify_composition_preservation,
)
from tests.analytic import heaviside, triangle


# ----------------------------------------------------------------------
# 不連続点
# ----------------------------------------------------------------------
def test_sin_has_no_discontinuities():
    cmap = ComponentMap.from_function(lambda p: np.sin(p[:, 0]), -1.0, 1.0, 64)
    report = detect_discontinuities(cmap, CheckConfig.for_map(cmap, jump_tol=0.1))
    assert report.discontinuities == []
    assert report.piecewise_continuous


def test_heaviside_has_one_jump(step_map):
    report = detect_discontinuities(step_map)
    assert len(report.discontinuities) == 1
    (jump,) = report.discontinuities
    assert abs(jump.location[0]) < 2.0 / 63
    assert jump.jump == pytest.approx(1.0)
    assert (jump.left, jump.right) == (0.0, 1.0)


def test_heaviside_without_source_uses_grid_bracket(step_map):
    sampled = ComponentMap(
        axes=step_map.axes, value=step_map.value, lower=step_map.lower, upper=step_map.upper
    )
    report = detect_discontinuities(sampled)
    assert len(report.discontinuities) == 1
    assert abs(report.discontinuities[0].location[0]) < 2.0 / 63


def test_lif_rate_has_one_jump_at_threshold(lif_map):
    report = detect_discontinuities(lif_map)
    assert len(report.discontinuities) == 1
    assert report.discontinuities[0].location[0] == pytest.approx(1.0, abs=2.0 / 255)
    assert report.discontinuities[0].left == 0.0


@pytest.mark.parametrize("fixture", ["sin_map", "triangle_map", "square_map", "sigmoid_synapse"])
def test_continuous_corpus_has_no_jumps(fixture, request):
    cmap = request.getfixturevalue(fixture)
    assert detect_discontinuities(cmap).discontinuities == []


def test_jump_count_stable_under_grid_doubling():
    for fn, lower, upper, n, expected in [
        (heaviside, -1.0, 1.0, 64, 1),
        (triangle, 0.0, 3.0, 121, 0),
        (lambda p: lif_rate(LIFParams(), p[:, 0]), 0.0, 2.0, 128, 1),
    ]:
        for size in (n, 2 * n - 1):
            cmap = ComponentMap.from_function(fn, lower, upper, size)
            assert len(detect_discontinuities(cmap).discontinuities) == expected


def test_two_dimensional_step():
    cmap = ComponentMap.from_function(
        lambda p: np.where(p[:, 0] >= 0.0, 1.0, 0.0), [-1.0, -1.0], [1.0, 1.0], [32, 20]
    )
    report = detect_discontinuities(cmap)
    # 軸0方向の走査線ごとに1つ
    assert len(report.discontinuities) == 20
    assert all(d.axis == 0 for d in report.discontinuities)


@pytest.mark.parametrize("slope", [1e3, 1e5])
def test_steep_synapse_is_flagged_with_or_without_source(slope, tmp_path):
    cmap = synapse_map(SynapseParams(slope=slope), -1.0, 1.0, 64)
    in_memory = detect_discontinuities(cmap)
    # 閉形式では連続なので絞り込みで消えるが、格子上の近ジャンプとして残す
    assert in_memory.discontinuities == []
    assert len(in_memory.near_jumps) == 1
    assert in_memory.near_jumps[0].location[0] == pytest.approx(0.0, abs=1.0 / 63)
    assert in_memory.near_jumps[0].jump > 0.99

    cmap.save(tmp_path / "steep.json")
    reloaded = detect_discontinuities(ComponentMap.load(tmp_path / "steep.json"))
    assert len(reloaded.discontinuities) == 1
    assert reloaded.near_jumps == []
    assert reloaded.discontinuities[0].location[0] == pytest.approx(in_memory.near_jumps[0].location[0])


def test_gentle_synapse_has_no_near_jump(sigmoid_synapse):
    assert detect_discontinuities(sigmoid_synapse).near_jumps == []


# ----------------------------------------------------------------------
# 不規則点
# ----------------------------------------------------------------------
def test_sin_levels(sin_map):
    verdict, results = check_all_or_none_smoothness(sin_map, levels=[-0.5, 0.0, 0.5])
    assert verdict
    assert [r.status for r in results] == ["ok", "ok", "ok"]
    assert [r.count for r in results] == [2, 1, 2]
    (origin,) = results[1].points
    assert origin[0] == pytest.approx(0.0, abs=1e-3)


def test_heaviside_level_inside_jump(step_map):
    assert find_irregular_points(step_map, 0.5) == []


def test_triangle_crossings(triangle_map):
    points = find_irregular_points(triangle_map, 0.0)
    assert len(points) == 6
    assert np.allclose(sorted(p[0] for p in points), [0.25, 0.75, 1.25, 1.75, 2.25, 2.75])


@pytest.mark.parametrize(
    "fixture, levels",
    [
        ("sin_map", [-0.5, 0.0, 0.5]),
        ("step_map", [0.5]),
        ("triangle_map", [0.0, 0.5]),
        ("square_map", [0.25]),
        ("lif_map", [0.03]),
        ("sigmoid_synapse", [0.5]),
    ],
)
def test_irregular_points_are_symmetric_under_negation(fixture, levels, request):
    cmap = request.getfixturevalue(fixture)
    negated = cmap.negated()
    for c in levels:
        assert find_irregular_points(negated, -c) == find_irregular_points(cmap, c)


def test_square_levels(square_map):
    with pytest.raises(InvalidInputError):
        find_irregular_points(square_map, 0.0)
    verdict, results = check_all_or_none_smoothness(square_map, levels=[0.0, 0.25])
    assert verdict
    assert results[0].status == "rejected"
    assert results[0].count is None
    assert results[1].count == 2
    assert all(abs(abs(p[0]) - 0.5) < 1e-2 for p in results[1].points)


def test_level_outside_range_rejected(sin_map):
    with pytest.raises(InvalidInputError):
        find_irregular_points(sin_map, 2.0)


def test_plateau_at_level_is_indeterminate():
    def dead_zone(p):
        x = p[:, 0]
        return np.where(x < -0.5, x + 0.5, np.where(x > 0.5, x - 0.5, 0.0))

    cmap = ComponentMap.from_function(dead_zone, -1.0, 1.0, 64)
    verdict, results = check_all_or_none_smoothness(cmap, levels=[0.0, 0.25])
    assert not verdict
    assert results[0].status == "plateau"
    assert results[0].count is None
    assert results[1].status == "ok"
    assert not certify(cmap, CheckConfig.for_map(cmap, levels=[0.0])).verdict


def test_touch_without_crossing_is_not_irregular():
    cmap = ComponentMap.from_function(
        lambda p: (p[:, 0] ** 2 - 0.25) ** 2, -1.0, 1.0, 64
    )
    # x = 0 の極大でちょうど c に触れるが横切らない
    points = find_irregular_points(cmap, 0.0625)
    assert len(points) == 2
    assert all(abs(abs(p[0]) - np.sqrt(0.5)) < 1e-2 for p in points)


# ----------------------------------------------------------------------
# レポート・前提条件
# ----------------------------------------------------------------------
def test_certify_report(step_map):
    report = certify(step_map)
    assert report.verdict
    assert report.all_or_none is True
    assert report.irregular_points == []
    data = report.to_dict()
    assert data["grid_shape"] == [64]
    assert len(data["discontinuities"]) == 1
    assert data["verdict"] is True
    assert len(data["levels"]) == 7
    rows = summary_rows(report)
    assert rows[0] == {"kind": "discontinuity", "level": None, "status": "ok", "count": 1}
    assert rows[1] == {"kind": "near_jump", "level": None, "status": "ok", "count": 0}
    assert len(rows) == 9
    assert data["near_jumps"] == []


def test_check_config_defaults_scale_with_range():
    cmap = ComponentMap.from_function(lambda p: 10.0 * p[:, 0], 0.0, 1.0, 65)
    cfg = CheckConfig.for_map(cmap)
    assert cfg.jump_tol == pytest.approx(1e-2)
    assert cfg.neighborhood == pytest.approx(0.25 / 64)
    assert cfg.level_grid[0] == pytest.approx(1.25)


@pytest.mark.parametrize(
    "kwargs",
    [dict(jump_tol=0.0), dict(refine_depth=0), dict(neighborhood=0.0), dict(margin=-1.0)],
)
def test_check_config_validation(kwargs):
    base = dict(jump_tol=1e-3, refine_depth=8, level_grid=(), neighborhood=0.1, margin=0.0)
    base.update(kwargs)
    with pytest.raises(InvalidInputError):
        CheckConfig(**base)


def test_rejects_unsupported_maps():
    small = ComponentMap.from_function(lambda p: p[:, 0], 0.0, 1.0, 8)
    with pytest.raises(InvalidInputError):
        certify(small)
    cube = ComponentMap.from_function(lambda p: p[:, 0], [0, 0, 0], [1, 1, 1], 16)
    with pytest.raises(InvalidInputError):
        certify(cube)
    values = np.linspace(0.0, 1.0, 32)
    values[5] = np.nan
    broken = ComponentMap(
        axes=(np.linspace(0.0, 1.0, 32),), value=values, lower=np.array([0.0]), upper=np.array([1.0])
    )
    with pytest.raises(InvalidInputError):
        detect_discontinuities(broken)


# ----------------------------------------------------------------------
# 合成
# ----------------------------------------------------------------------
def test_sigmoid_of_step(step_map):
    outer = ComponentMap.from_function(lambda p: expit(p[:, 0]), -1.0, 2.0, 64, name="sigmoid")
    report = verify_composition_preservation(outer, [step_map])
    assert len(report.composite_report.discontinuities) == 1
    assert report.count_bound == 1
    assert report.preserved


def test_lif_of_synapse(lif_map):
    inner = synapse_map(SynapseParams(amplitude=2.0, slope=4.0), -1.0, 1.0, 64)
    report = verify_composition_preservation(lif_map, [inner])
    (jump,) = report.composite_report.discontinuities
    # 2·σ(4x) = 1 ⇔ x = 0
    assert jump.location[0] == pytest.approx(0.0, abs=2.0 / 63)
    assert report.mapped_outer_count == 1
    assert report.preserved


def test_two_input_outer():
    outer = ComponentMap.from_function(
        lambda p: np.where(p[:, 0] >= 0.5, 1.0, 0.0), [0.0, 0.0], [1.0, 1.0], [32, 32]
    )
    first = ComponentMap.from_function(lambda p: p[:, 0], 0.0, 1.0, 64)
    second = ComponentMap.from_function(lambda p: 1.0 - p[:, 0], 0.0, 1.0, 64)
    report = verify_composition_preservation(outer, [first, second])
    assert len(report.composite_report.discontinuities) == 1
    assert report.mapped_outer_count >= 1
    assert report.preserved


def test_compose_errors(step_map, sin_map):
    outer = ComponentMap.from_function(lambda p: p[:, 0], 0.0, 0.5, 32, name="narrow")
    with pytest.raises(InvalidInputError, match="heaviside.*narrow"):
        compose(outer, [step_map])
    with pytest.raises(InvalidInputError):
        compose(outer, [])
    wide = ComponentMap.from_function(lambda p: p[:, 0], -2.0, 2.0, 32)
    with pytest.raises(InvalidInputError):
        compose(wide, [step_map, step_map])
    plane = ComponentMap.from_function(lambda p: p[:, 0], [-2.0, -2.0], [2.0, 2.0], 16)
    with pytest.raises(InvalidInputError, match="grid"):
        compose(plane, [step_map, sin_map.with_values(sin_map.value / 2.0)])


def _piece(kind: str, a: float, n: int) -> ComponentMap:
    """[0, 1] → [0, 1] の部品写像"""
    lif = LIFParams(tau=1.0, theta=a)
    fns = {
        "sigmoid": lambda x: expit(8.0 * (x - a)),
        "step": lambda x: np.where(x >= a, 1.0, 0.0),
        "triangle": lambda x: np.where(x < a, x / a, (1.0 - x) / (1.0 - a)),
        "lif": lambda x: lif_rate(lif, x) / lif_rate(lif, 1.0),
        "synapse": lambda x: synapse_curve(SynapseParams(slope=6.0, midpoint=a), x),
    }
    fn = fns[kind]
    return ComponentMap.from_function(lambda p: fn(p[:, 0]), 0.0, 1.0, n, name=kind)


def test_randomized_composites_preserve_smoothness():
    rng = make_rng(2024, "composites")
    kinds = ["sigmoid", "step", "triangle", "lif", "synapse"]
    for trial in range(100):
        outer_kind, inner_kind = rng.choice(kinds, size=2)
        a_outer, a_inner = rng.uniform(0.3, 0.7, size=2)
        outer = _piece(str(outer_kind), float(a_outer), 128)
        inner = _piece(str(inner_kind), float(a_inner), 64)
        report = verify_composition_preservation(outer, [inner])
        assert report.preserved, (trial, outer_kind, inner_kind, report.to_dict())
