"""コマンドラインのエントリポイント

終了コード: 0 成功 / 1 入出力エラー / 2 検証エラー / 3 許容誤差未達 / 4 数値発散
"""
import argparse
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.cli.graph_files import load_graph, save_graph
from src.cli.models import (
    HHComponentFile,
    LIFComponentFile,
    ReportEnvelope,
    component_file_adapter,
)
from src.core.approximator import (
    SLFN,
    Dataset,
    bp_gradient_check,
    compare_training_cost,
    train_to_tolerance,
)
from src.core.bio_components import firing_rate_map, synapse_map
from src.core.circuit import InputSpec, composite_error, twinize
from src.core.component_map import ComponentMap
from src.core.config import Settings, apply_settings, load_settings, settings
from src.core.errors import DivergenceError, InvalidInputError
from src.core.smoothness import CheckConfig, certify, summary_rows


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_UNMET = 3
EXIT_DIVERGED = 4


def write_report(path: Path, command: str, payload: Dict[str, Any], cfg: Settings) -> None:
    """payload + metadata の封筒形式で書き出す"""
    payload = dict(payload)
    payload["seed"] = cfg.seed
    payload["config"] = cfg.echo()
    envelope = ReportEnvelope(
        payload=payload,
        metadata={"command": command, "created_at": datetime.now(timezone.utc).isoformat()},
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(envelope.model_dump(), f, sort_keys=True, indent=2)
    logger.info(f"Wrote {command} report to {path}")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# サブコマンド
# ----------------------------------------------------------------------
def cmd_map(args: argparse.Namespace, cfg: Settings) -> int:
    """コンポーネント定義から写像（CSV + JSON）を作る"""
    with open(args.component, "r", encoding="utf-8") as f:
        spec = component_file_adapter.validate_python(json.load(f))
    grid = spec.grid
    n = args.grid if args.grid is not None else grid.n
    if n < 2:
        raise InvalidInputError(f"grid: at least 2 points required, got {n}")

    if isinstance(spec, (LIFComponentFile, HHComponentFile)):
        currents = np.linspace(grid.lower, grid.upper, n)
        cmap = firing_rate_map(
            spec.kind, spec.params, currents, spec.window, (grid.lower, grid.upper),
            spec.dt, spec.transient,
        )
    else:
        cmap = synapse_map(spec.params, grid.lower, grid.upper, n)

    name = args.name or Path(args.component).stem
    out = _out_dir(args)
    cmap.save(out / f"{name}.json", out / f"{name}.csv")
    return EXIT_OK


def _parse_levels(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise InvalidInputError(f"levels: expected comma-separated numbers, got '{text}'") from e


def cmd_check(args: argparse.Namespace, cfg: Settings) -> int:
    """区分連続性と all-or-none 平滑性のレポートを書く"""
    cmap = ComponentMap.load(args.map)
    check = CheckConfig.for_map(cmap, levels=_parse_levels(args.levels))
    report = certify(cmap, check)
    out = _out_dir(args)
    write_report(out / "check_report.json", "check", report.to_dict(), cfg)
    pd.DataFrame(summary_rows(report)).to_csv(out / "check_summary.csv", index=False)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: Settings) -> int:
    """写像に対するツインを許容誤差まで学習"""
    cmap = ComponentMap.load(args.map)
    net, report = train_to_tolerance(
        cmap,
        args.delta,
        method=args.method,
        budget=args.budget,
        seed=cfg.seed,
        ridge=args.ridge,
        hidden_scale=args.hidden_scale,
    )
    out = _out_dir(args)
    net.save(out / "net.json")
    write_report(out / "train_report.json", "train", report.to_dict(), cfg)
    if report.met is False:
        logger.error(f"Tolerance {args.delta} not met (best held-out L2 {report.held_out_l2:.3e})")
        return EXIT_UNMET
    return EXIT_OK


def cmd_twinize(args: argparse.Namespace, cfg: Settings) -> int:
    """回路の全コンポーネントをツイン化"""
    graph = load_graph(args.graph)
    spec = InputSpec.for_graph(graph) if args.trials is not None else None
    assignment = twinize(
        graph,
        args.delta,
        method=args.method,
        seed=cfg.seed,
        budget=args.budget,
        split=args.split,
        input_spec=spec,
        trials=args.trials,
        hidden_scale=args.hidden_scale,
        ridge=args.ridge,
    )
    out = _out_dir(args)
    save_graph(assignment.twinned, out / "twinned_graph.json")
    payload = assignment.to_dict()
    if spec is not None:
        payload["input_spec"] = spec.to_dict()
    write_report(out / "twin_assignment.json", "twinize", payload, cfg)
    if assignment.unmet:
        logger.error(f"Components missed their tolerance: {assignment.unmet}")
        return EXIT_UNMET
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, cfg: Settings) -> int:
    """元の回路とツイン化した回路の出力偏差を推定"""
    original = load_graph(args.original)
    twinned = load_graph(args.twinned)
    spec = InputSpec.for_graph(original)
    estimate = composite_error(original, twinned, spec, args.trials, cfg.seed)
    payload = {"composite": estimate.to_dict(), "input_spec": spec.to_dict()}
    write_report(_out_dir(args) / "verify_report.json", "verify", payload, cfg)
    if estimate.used == 0:
        logger.error("Every Monte Carlo trial diverged")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, cfg: Settings) -> int:
    """BP の増分と有限差分勾配を比べる"""
    net = SLFN.load(args.net)
    data = Dataset.from_map(ComponentMap.load(args.map))
    deviation = bp_gradient_check(net, data, args.h)
    payload = {"deviation": deviation, "h": args.h, "tolerance": args.tolerance}
    write_report(_out_dir(args) / "gradcheck_report.json", "gradcheck", payload, cfg)
    if deviation >= args.tolerance:
        logger.error(f"Gradient deviation {deviation:.3e} exceeds {args.tolerance:.1e}")
        return EXIT_UNMET
    return EXIT_OK


def cmd_energy(args: argparse.Namespace, cfg: Settings) -> int:
    """BP と ELM の演算数を比較"""
    cmap = ComponentMap.load(args.map)
    result = compare_training_cost(cmap, seed=cfg.seed, bp_epochs=args.budget)
    write_report(_out_dir(args) / "energy_report.json", "energy", result, cfg)
    return EXIT_OK


# ----------------------------------------------------------------------
# 引数
# ----------------------------------------------------------------------
def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="64bit シード")
    parser.add_argument("--out", default=None, help="出力ディレクトリ")
    parser.add_argument("--config", default=None, help="設定 JSON")


def _training(parser: argparse.ArgumentParser, delta_required: bool = True) -> None:
    parser.add_argument("--delta", type=float, required=delta_required, help="許容誤差 δ")
    parser.add_argument("--method", choices=["elm", "bp"], default="elm")
    parser.add_argument("--budget", type=int, default=None, help="最大 L または最大エポック数")
    parser.add_argument("--hidden-scale", type=float, default=None)
    parser.add_argument("--ridge", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twin", description="神経素子の AI ツイン合成・検証")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="コンポーネント定義から写像を作る")
    p.add_argument("component")
    p.add_argument("--grid", type=int, default=None, help="格子点数")
    p.add_argument("--name", default=None)
    _common(p)
    p.set_defaults(handler=cmd_map)

    p = sub.add_parser("check", help="平滑性チェック")
    p.add_argument("map")
    p.add_argument("--levels", default=None, help="カンマ区切りのレベル c")
    _common(p)
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("train", help="ツインの学習")
    p.add_argument("map")
    _training(p)
    _common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("twinize", help="回路のツイン化")
    p.add_argument("graph")
    _training(p)
    p.add_argument("--split", action="store_true", help="δ を回路全体の誤差として分配")
    p.add_argument("--trials", type=int, default=None)
    _common(p)
    p.set_defaults(handler=cmd_twinize)

    p = sub.add_parser("verify", help="合成誤差の推定")
    p.add_argument("original")
    p.add_argument("twinned")
    p.add_argument("--trials", type=int, default=None)
    _common(p)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("gradcheck", help="BP 勾配の検証")
    p.add_argument("net")
    p.add_argument("map")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-6)
    _common(p)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("energy", help="BP と ELM の演算数比較")
    p.add_argument("map")
    p.add_argument("--budget", type=int, default=None, help="BP のエポック数")
    _common(p)
    p.set_defaults(handler=cmd_energy)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler: Callable[[argparse.Namespace, Settings], int] = args.handler
    try:
        cfg = apply_settings(load_settings(args.config, seed=args.seed))
    except ValidationError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INVALID
    except OSError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"Cannot read configuration: {e}")
        return EXIT_IO
    logging.basicConfig(level=cfg.log_level)

    try:
        return handler(args, cfg)
    except (ValidationError, InvalidInputError, json.JSONDecodeError) as e:
        logger.error(f"Validation failed: {e}")
        return EXIT_INVALID
    except DivergenceError as e:
        logger.error(f"Numerical divergence: {e}")
        return EXIT_DIVERGED
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
