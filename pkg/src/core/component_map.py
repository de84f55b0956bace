"""コンポーネント写像（A_L(x) / S_P(x)）のデータ構造と入出力"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from src.core.config import settings
from src.core.errors import InvalidInputError


logger = logging.getLogger(__name__)

Source = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ComponentMap:
    """格子上にサンプルされた静的写像 x → y

    value / probability / delay の3チャネルを持つ。source は閉形式の評価関数
    （あれば区分連続性チェックの二分探索に使う）。
    """

    axes: Tuple[np.ndarray, ...]
    value: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    probability: Optional[np.ndarray] = None
    delay: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    name: str = "map"
    source: Optional[Source] = field(default=None, repr=False)
    notes: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

        if len(axes) == 0:
            raise InvalidInputError("ComponentMap needs at least one axis")
        if lower.shape != (len(axes),) or upper.shape != (len(axes),):
            raise InvalidInputError("domain bounds must have one entry per axis")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise InvalidInputError("domain bounds must be finite")
        if np.any(lower >= upper):
            raise InvalidInputError(f"empty domain: lower={lower.tolist()} upper={upper.tolist()}")

        shape = tuple(len(a) for a in axes)
        for k, a in enumerate(axes):
            if a.ndim != 1 or len(a) < 2:
                raise InvalidInputError(f"axis {k} needs at least 2 samples")
            if np.any(np.diff(a) <= 0):
                raise InvalidInputError(f"axis {k} must be strictly increasing")
            span = upper[k] - lower[k]
            if a[0] < lower[k] - 1e-12 * span or a[-1] > upper[k] + 1e-12 * span:
                raise InvalidInputError(f"axis {k} samples lie outside the domain")

        value = np.asarray(self.value, dtype=float).reshape(shape)
        object.__setattr__(self, "value", value)
        probability = (
            np.ones(shape) if self.probability is None
            else np.asarray(self.probability, dtype=float).reshape(shape)
        )
        delay = (
            np.zeros(shape) if self.delay is None
            else np.asarray(self.delay, dtype=float).reshape(shape)
        )
        if np.any(~np.isfinite(probability)) or np.any((probability < 0) | (probability > 1)):
            raise InvalidInputError("probability channel must lie in [0, 1]")
        if np.any(~np.isfinite(delay)) or np.any(delay < 0):
            raise InvalidInputError("delay channel must be finite and >= 0")
        object.__setattr__(self, "probability", probability)
        object.__setattr__(self, "delay", delay)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float).reshape(shape)
            if np.any(~np.isfinite(weights)) or np.any(weights < 0):
                raise InvalidInputError("quadrature weights must be finite and >= 0")
            object.__setattr__(self, "weights", weights)

    # ------------------------------------------------------------------
    # 構築
    # ------------------------------------------------------------------
    @classmethod
    def from_function(
        cls,
        fn: Source,
        lower: Union[float, Sequence[float]],
        upper: Union[float, Sequence[float]],
        n: Union[int, Sequence[int]],
        name: str = "map",
        keep_source: bool = True,
        probability: float = 1.0,
        delay: float = 0.0,
    ) -> "ComponentMap":
        """閉形式関数を一様格子（端点込み）でサンプル"""
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        counts = np.broadcast_to(np.atleast_1d(n), lo.shape)
        if np.any(counts < 2):
            raise InvalidInputError("sample count must be >= 2 per dimension")
        axes = tuple(np.linspace(lo[k], hi[k], int(counts[k])) for k in range(len(lo)))
        points = grid_points(axes)
        values = np.asarray(fn(points), dtype=float).reshape(tuple(len(a) for a in axes))
        shape = values.shape
        return cls(
            axes=axes,
            value=values,
            lower=lo,
            upper=hi,
            probability=np.full(shape, probability),
            delay=np.full(shape, delay),
            name=name,
            source=fn if keep_source else None,
        )

    def with_values(
        self, value: np.ndarray, source: Optional[Source] = None, name: Optional[str] = None
    ) -> "ComponentMap":
        return replace(self, value=value, source=source, name=name or self.name)

    def negated(self) -> "ComponentMap":
        """値チャネルの符号を反転した写像"""
        src = self.source
        neg_source = None if src is None else (lambda x: -np.asarray(src(x), dtype=float))
        return replace(self, value=-self.value, source=neg_source, name=f"-{self.name}")

    # ------------------------------------------------------------------
    # 形状
    # ------------------------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        return grid_points(self.axes)

    def value_range(self) -> Tuple[float, float]:
        return float(np.min(self.value)), float(np.max(self.value))

    def cell_widths(self) -> np.ndarray:
        return np.array([float(np.min(np.diff(a))) for a in self.axes])

    def same_domain(self, lower: np.ndarray, upper: np.ndarray, rtol: float = 1e-9) -> bool:
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != self.lower.shape:
            return False
        return bool(np.allclose(lo, self.lower, rtol=rtol, atol=0.0) and np.allclose(hi, self.upper, rtol=rtol, atol=0.0))

    # ------------------------------------------------------------------
    # 評価
    # ------------------------------------------------------------------
    def _as_points(self, x: np.ndarray) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        if self.dim == 1 and pts.ndim <= 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise InvalidInputError(
                f"expected points of dimension {self.dim}, got shape {np.shape(x)}"
            )
        return pts

    def interpolate(self, x: np.ndarray, channel: str = "value") -> np.ndarray:
        """区分線形補間。定義域外は境界値で飽和させる"""
        pts = self._as_points(x)
        grid_values = getattr(self, channel)
        clipped = np.clip(pts, [a[0] for a in self.axes], [a[-1] for a in self.axes])
        if self.dim == 1:
            return np.interp(clipped[:, 0], self.axes[0], grid_values)
        interpolator = RegularGridInterpolator(self.axes, grid_values, method="linear")
        return interpolator(clipped)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """source があればそれを、なければ補間値を返す"""
        if self.source is None:
            return self.interpolate(x)
        pts = self._as_points(x)
        clipped = np.clip(pts, self.lower, self.upper)
        return np.asarray(self.source(clipped), dtype=float).reshape(-1)

    def held_out_axes(self) -> Tuple[np.ndarray, ...]:
        """半セルずらした検証用格子"""
        return tuple(0.5 * (a[1:] + a[:-1]) for a in self.axes)

    def quadrature_weights(self) -> np.ndarray:
        """中点則の一様重み（定義域体積 / サンプル数）"""
        if self.weights is not None:
            return self.weights.reshape(-1)
        volume = float(np.prod(self.upper - self.lower))
        return np.full(self.size, volume / self.size)

    # ------------------------------------------------------------------
    # 入出力
    # ------------------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        pts = self.points()
        data: Dict[str, Any] = {f"x{k}": pts[:, k] for k in range(self.dim)}
        data["value"] = self.value.reshape(-1)
        data["probability"] = self.probability.reshape(-1)
        data["delay"] = self.delay.reshape(-1)
        return pd.DataFrame(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": settings.schema_version,
            "name": self.name,
            "domain": {"lower": self.lower.tolist(), "upper": self.upper.tolist()},
            "axes": [a.tolist() for a in self.axes],
            "value": self.value.reshape(-1).tolist(),
            "probability": self.probability.reshape(-1).tolist(),
            "delay": self.delay.reshape(-1).tolist(),
            "weights": None if self.weights is None else self.weights.reshape(-1).tolist(),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ComponentMap":
        try:
            axes = tuple(np.asarray(a, dtype=float) for a in data["axes"])
            return cls(
                axes=axes,
                value=np.asarray(data["value"], dtype=float),
                lower=np.asarray(data["domain"]["lower"], dtype=float),
                upper=np.asarray(data["domain"]["upper"], dtype=float),
                probability=data.get("probability"),
                delay=data.get("delay"),
                weights=data.get("weights"),
                name=data.get("name", "map"),
                notes=tuple(data.get("notes", ())),
            )
        except KeyError as e:
            raise InvalidInputError(f"map file is missing field: {e.args[0]}") from e

    def save(self, json_path: Union[str, Path], csv_path: Union[str, Path, None] = None) -> None:
        """JSON（定義域メタデータ付き）と CSV を書き出す"""
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
        if csv_path is None:
            csv_path = json_path.with_suffix(".csv")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        logger.info(f"Saved map '{self.name}' ({self.size} points) to {json_path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ComponentMap":
        path = Path(path)
        if path.suffix.lower() == ".csv":
            return cls.from_csv(path)
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def from_csv(cls, path: Union[str, Path], name: Optional[str] = None) -> "ComponentMap":
        """CSV（x0.., value[, probability, delay]）から読み込み。定義域はサンプル範囲"""
        frame = pd.read_csv(path)
        coord_cols = sorted(
            (c for c in frame.columns if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        if not coord_cols or "value" not in frame.columns:
            raise InvalidInputError(f"{path}: CSV needs x0.. and value columns")
        frame = frame.sort_values(coord_cols, kind="mergesort").reset_index(drop=True)
        axes = tuple(np.unique(frame[c].to_numpy(dtype=float)) for c in coord_cols)
        shape = tuple(len(a) for a in axes)
        if int(np.prod(shape)) != len(frame):
            raise InvalidInputError(f"{path}: rows do not form a full tensor grid")

        def channel(col: str) -> Optional[np.ndarray]:
            if col not in frame.columns:
                return None
            return frame[col].to_numpy(dtype=float).reshape(shape)

        return cls(
            axes=axes,
            value=frame["value"].to_numpy(dtype=float).reshape(shape),
            lower=np.array([a[0] for a in axes]),
            upper=np.array([a[-1] for a in axes]),
            probability=channel("probability"),
            delay=channel("delay"),
            name=name or Path(path).stem,
        )


def grid_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    """テンソル積格子の点を (N, d) 配列で返す（C順）"""
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)
