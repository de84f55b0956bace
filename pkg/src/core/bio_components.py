"""生物学的コンポーネント（HHニューロン、LIFニューロン、シナプス）のシミュレーションと静的写像の抽出"""
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from src.core.component_map import ComponentMap
from src.core.config import settings
from src.core.errors import DivergenceError, InvalidInputError


logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


class HHParams(BaseModel):
    """Hodgkin–Huxley モデルの定数（現代の電位規約）"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    c_m: float = Field(default=1.0, gt=0, allow_inf_nan=False, description="µF/cm²")
    g_na: float = Field(default=120.0, ge=0, allow_inf_nan=False, description="mS/cm²")
    g_k: float = Field(default=36.0, ge=0, allow_inf_nan=False, description="mS/cm²")
    g_leak: float = Field(default=0.3, ge=0, allow_inf_nan=False, description="mS/cm²")
    e_na: float = Field(default=50.0, allow_inf_nan=False, description="mV")
    e_k: float = Field(default=-77.0, allow_inf_nan=False, description="mV")
    e_leak: float = Field(default=-54.387, allow_inf_nan=False, description="mV")


class LIFParams(BaseModel):
    """LIF ニューロンのパラメータ（時間は ms、発火率は 1/ms）"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tau: float = Field(default=20.0, gt=0, allow_inf_nan=False)
    theta: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    v_reset: float = Field(default=0.0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _reset_below_threshold(self) -> "LIFParams":
        if self.v_reset >= self.theta:
            raise ValueError("v_reset must be below theta")
        return self


class SynapseParams(BaseModel):
    """シナプスの飽和型伝達曲線・伝達確率・遅延"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    amplitude: float = Field(default=1.0, ge=0, allow_inf_nan=False)
    slope: float = Field(default=1.0, ge=0, allow_inf_nan=False)
    midpoint: float = Field(default=0.0, allow_inf_nan=False)
    p: float = Field(default=1.0, ge=0, le=1, allow_inf_nan=False)
    delay: int = Field(default=0, ge=0, description="time steps")


STANDARD_HH = HHParams()


@dataclass(frozen=True)
class HHState:
    """膜電位 v (mV) とゲート変数 m, h, n"""

    v: float
    m: float
    h: float
    n: float

    def validate(self) -> None:
        for name in ("v", "m", "h", "n"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidInputError(f"non-finite HH state field: {name}={value}")
        for name in ("m", "h", "n"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"gating variable {name}={value} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.m, self.h, self.n], dtype=float)

    @classmethod
    def from_array(cls, y: np.ndarray) -> "HHState":
        return cls(float(y[0]), float(y[1]), float(y[2]), float(y[3]))

    @classmethod
    def resting(cls, params: HHParams = STANDARD_HH, v0: float = -65.0) -> "HHState":
        """v0 における定常ゲート値を持つ標準初期状態"""
        v = np.asarray(v0, dtype=float)
        m = alpha_m(v) / (alpha_m(v) + beta_m(v))
        h = alpha_h(v) / (alpha_h(v) + beta_h(v))
        n = alpha_n(v) / (alpha_n(v) + beta_n(v))
        return cls(float(v0), float(m), float(h), float(n))


# ----------------------------------------------------------------------
# ゲート変数の速度関数
# ----------------------------------------------------------------------
def _vtrap(u: np.ndarray) -> np.ndarray:
    """u / (1 - exp(-u))。u → 0 で 1 に連続拡張"""
    u_safe = np.where(np.abs(u) < 1e-7, 1e-7, u)
    return u_safe / -np.expm1(-u_safe)


def alpha_m(v: np.ndarray) -> np.ndarray:
    return _vtrap((v + 40.0) / 10.0)


def beta_m(v: np.ndarray) -> np.ndarray:
    return 4.0 * np.exp(-(v + 65.0) / 18.0)


def alpha_h(v: np.ndarray) -> np.ndarray:
    return 0.07 * np.exp(-(v + 65.0) / 20.0)


def beta_h(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(v + 35.0) / 10.0))


def alpha_n(v: np.ndarray) -> np.ndarray:
    return 0.1 * _vtrap((v + 55.0) / 10.0)


def beta_n(v: np.ndarray) -> np.ndarray:
    return 0.125 * np.exp(-(v + 65.0) / 80.0)


def hh_derivatives(y: np.ndarray, i_ext: ArrayLike, params: HHParams) -> np.ndarray:
    """膜方程式 C_m dV/dt = I - I_i と3つのゲートODE"""
    v, m, h, n = y
    i_ion = (
        params.g_na * m**3 * h * (v - params.e_na)
        + params.g_k * n**4 * (v - params.e_k)
        + params.g_leak * (v - params.e_leak)
    )
    dv = (np.asarray(i_ext, dtype=float) - i_ion) / params.c_m
    dm = alpha_m(v) * (1.0 - m) - beta_m(v) * m
    dh = alpha_h(v) * (1.0 - h) - beta_h(v) * h
    dn = alpha_n(v) * (1.0 - n) - beta_n(v) * n
    return np.stack([dv, dm, dh, dn])


def _rk4(y: np.ndarray, i_ext: ArrayLike, params: HHParams, dt: float) -> np.ndarray:
    k1 = hh_derivatives(y, i_ext, params)
    k2 = hh_derivatives(y + 0.5 * dt * k1, i_ext, params)
    k3 = hh_derivatives(y + 0.5 * dt * k2, i_ext, params)
    k4 = hh_derivatives(y + dt * k3, i_ext, params)
    out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[1:] = np.clip(out[1:], 0.0, 1.0)
    return out


def hh_step(state: HHState, params: HHParams, i_ext: float, dt: float) -> HHState:
    """固定刻み RK4 で1ステップ進める"""
    if not math.isfinite(dt) or dt < 0:
        raise InvalidInputError(f"dt must be finite and >= 0, got {dt}")
    if not math.isfinite(i_ext):
        raise InvalidInputError(f"non-finite input current: i_ext={i_ext}")
    state.validate()
    if dt == 0:
        return state
    with np.errstate(over="ignore", invalid="ignore"):
        y = _rk4(state.as_array(), i_ext, params, dt)
    for k, name in enumerate(("v", "m", "h", "n")):
        if not np.isfinite(y[k]):
            raise DivergenceError(f"HH step produced non-finite {name}", field=name)
    return HHState.from_array(y)


@dataclass(frozen=True)
class HHTrace:
    """電流ごとの電圧トレース"""

    dt: float
    currents: np.ndarray
    v: np.ndarray  # (n_steps + 1, n_currents)
    diverged: np.ndarray  # (n_currents,)

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.v.shape[0]) * self.dt


def simulate_hh(
    params: HHParams,
    currents: ArrayLike,
    duration: float,
    dt: Optional[float] = None,
    state: Optional[HHState] = None,
) -> HHTrace:
    """一定電流のバッチを同時に積分する"""
    dt = settings.hh_dt if dt is None else dt
    if dt <= 0 or duration < 0:
        raise InvalidInputError("dt must be > 0 and duration >= 0")
    i_ext = np.atleast_1d(np.asarray(currents, dtype=float))
    if not np.all(np.isfinite(i_ext)):
        raise InvalidInputError("input currents must be finite")
    state = HHState.resting(params) if state is None else state
    state.validate()

    n_steps = int(round(duration / dt))
    y = np.repeat(state.as_array()[:, None], len(i_ext), axis=1)
    trace = np.empty((n_steps + 1, len(i_ext)))
    trace[0] = y[0]
    diverged = np.zeros(len(i_ext), dtype=bool)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(1, n_steps + 1):
            y = _rk4(y, i_ext, params, dt)
            bad = ~np.all(np.isfinite(y), axis=0)
            if np.any(bad & ~diverged):
                logger.warning(
                    f"HH integration diverged at step {step} for currents {i_ext[bad & ~diverged].tolist()}"
                )
                diverged |= bad
                y[:, diverged] = np.nan
            trace[step] = y[0]
    return HHTrace(dt=dt, currents=i_ext, v=trace, diverged=diverged)


# ----------------------------------------------------------------------
# スパイク検出
# ----------------------------------------------------------------------
def _upward_crossings(v: np.ndarray, threshold: float) -> np.ndarray:
    return np.nonzero((v[:-1] < threshold) & (v[1:] >= threshold))[0] + 1


def detect_spikes(
    v: np.ndarray,
    dt: float,
    threshold: Optional[float] = None,
    refractory: Optional[float] = None,
) -> np.ndarray:
    """閾値の上向き交差（不応期ロックアウト付き）のサンプル番号"""
    threshold = settings.spike_threshold if threshold is None else threshold
    refractory = settings.refractory_ms if refractory is None else refractory
    lockout = int(round(refractory / dt))
    accepted: List[int] = []
    for idx in _upward_crossings(np.asarray(v, dtype=float), threshold):
        if not accepted or idx - accepted[-1] >= lockout:
            accepted.append(int(idx))
    return np.array(accepted, dtype=int)


def spike_times(
    v: np.ndarray,
    dt: float,
    threshold: Optional[float] = None,
    refractory: Optional[float] = None,
) -> np.ndarray:
    """線形補間した交差時刻 (ms)"""
    threshold = settings.spike_threshold if threshold is None else threshold
    v = np.asarray(v, dtype=float)
    idx = detect_spikes(v, dt, threshold, refractory)
    if len(idx) == 0:
        return np.zeros(0)
    before, after = v[idx - 1], v[idx]
    frac = (threshold - before) / (after - before)
    return (idx - 1 + frac) * dt


def all_or_none_readout(v_trace: np.ndarray, threshold: float, amplitude: float) -> np.ndarray:
    """上向き交差ごとに amplitude、それ以外は 0 のパルス列"""
    v = np.asarray(v_trace, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("voltage trace must be finite")
    pulses = np.zeros_like(v)
    pulses[_upward_crossings(v, threshold)] = amplitude
    return pulses


def spike_peak_amplitudes(
    v: np.ndarray,
    dt: float,
    baseline: float,
    threshold: Optional[float] = None,
    refractory: Optional[float] = None,
) -> np.ndarray:
    """各スパイクのピーク電位 - baseline"""
    threshold = settings.spike_threshold if threshold is None else threshold
    v = np.asarray(v, dtype=float)
    peaks = []
    for idx in detect_spikes(v, dt, threshold, refractory):
        below = np.nonzero(v[idx:] < threshold)[0]
        if len(below) == 0:
            # 窓の終端で切れたスパイクは数えない
            continue
        peaks.append(float(np.max(v[idx: idx + below[0]])) - baseline)
    return np.array(peaks)


def relative_peak_spread(
    params: HHParams,
    currents: Sequence[float],
    duration: float,
    transient: Optional[float] = None,
    dt: Optional[float] = None,
) -> float:
    """閾値上の一定電流群にわたるスパイク振幅の相対標準偏差（全か無かの法則）"""
    transient = settings.transient_ms if transient is None else transient
    trace = simulate_hh(params, currents, transient + duration, dt)
    baseline = HHState.resting(params).v
    start = int(round(transient / trace.dt))
    peaks = np.concatenate(
        [
            spike_peak_amplitudes(trace.v[start:, k], trace.dt, baseline)
            for k in range(len(trace.currents))
            if not trace.diverged[k]
        ]
    )
    if len(peaks) == 0:
        raise InvalidInputError("no spikes found; currents are not suprathreshold")
    spread = float(np.std(peaks) / np.mean(peaks))
    logger.info(f"All-or-none spread over {len(peaks)} spikes: {spread:.4f}")
    return spread


# ----------------------------------------------------------------------
# LIF
# ----------------------------------------------------------------------
def lif_rate(params: LIFParams, i: ArrayLike) -> Union[float, np.ndarray]:
    """LIF の f–I 曲線。i <= theta で 0、それ以外 1 / (tau ln((i - v_reset)/(i - theta)))"""
    current = np.asarray(i, dtype=float)
    above = current > params.theta
    safe = np.where(above, current, params.theta + 1.0)
    with np.errstate(divide="ignore"):
        rate = 1.0 / (params.tau * np.log((safe - params.v_reset) / (safe - params.theta)))
    rate = np.where(above, rate, 0.0)
    if rate.ndim == 0:
        return float(rate)
    return rate


def simulate_lif(
    params: LIFParams,
    currents: ArrayLike,
    duration: float,
    dt: Optional[float] = None,
) -> List[np.ndarray]:
    """指数厳密更新で LIF を積分し、電流ごとのスパイク時刻 (ms) を返す"""
    dt = settings.hh_dt if dt is None else dt
    i_ext = np.atleast_1d(np.asarray(currents, dtype=float))
    if not np.all(np.isfinite(i_ext)):
        raise InvalidInputError("input currents must be finite")
    decay = math.exp(-dt / params.tau)
    v = np.full(len(i_ext), params.v_reset)
    times: List[List[float]] = [[] for _ in i_ext]
    n_steps = int(round(duration / dt))
    for step in range(n_steps):
        v_next = i_ext + (v - i_ext) * decay
        fired = np.nonzero(v_next >= params.theta)[0]
        for k in fired:
            # 刻み内の交差時刻を解析的に求めてリセットし、残り時間を積分する
            s = params.tau * math.log((v[k] - i_ext[k]) / (params.theta - i_ext[k]))
            s = min(max(s, 0.0), dt)
            times[k].append(step * dt + s)
            v_next[k] = i_ext[k] + (params.v_reset - i_ext[k]) * math.exp(-(dt - s) / params.tau)
        v = v_next
    return [np.array(t) for t in times]


def rate_from_spike_times(times: np.ndarray, window: float) -> float:
    """窓内のスパイク時刻から発火率を推定

    2個以上なら平均 ISI の逆数 (count − 1) / (t_last − t_first)。lif_rate の f–I 曲線
    （定常 ISI の逆数）と同じ定義で、1個以下のときだけ count / window。
    """
    if len(times) >= 2:
        return float((len(times) - 1) / (times[-1] - times[0]))
    return float(len(times)) / window


# ----------------------------------------------------------------------
# シナプス
# ----------------------------------------------------------------------
def synapse_curve(params: SynapseParams, x: ArrayLike) -> np.ndarray:
    return params.amplitude * expit(params.slope * (np.asarray(x, dtype=float) - params.midpoint))


def synapse_map(
    params: SynapseParams, lower: float = -1.0, upper: float = 1.0, n: int = 64
) -> ComponentMap:
    """シナプスの静的写像 S_P(x)"""
    if not (math.isfinite(lower) and math.isfinite(upper)) or lower >= upper:
        raise InvalidInputError(f"empty synapse domain: [{lower}, {upper}]")
    return ComponentMap.from_function(
        lambda x: synapse_curve(params, np.asarray(x)[:, 0]),
        lower,
        upper,
        n,
        name="synapse",
        probability=params.p,
        delay=float(params.delay),
    )


def synapse_transmit(
    params: SynapseParams,
    x: ArrayLike,
    mode: Literal["expected", "bernoulli"] = "expected",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """確率チャネルを期待値またはベルヌーイ標本で適用した伝達値"""
    value = synapse_curve(params, x)
    if mode == "expected":
        return params.p * value
    if rng is None:
        raise InvalidInputError("bernoulli transmission needs a seeded generator")
    return value * (rng.random(np.shape(value)) < params.p)


# ----------------------------------------------------------------------
# 発火率写像
# ----------------------------------------------------------------------
def firing_rate_map(
    kind: Literal["hh", "lif"],
    params: Union[HHParams, LIFParams],
    input_grid: ArrayLike,
    window: Optional[float] = None,
    domain: Optional[Tuple[float, float]] = None,
    dt: Optional[float] = None,
    transient: Optional[float] = None,
) -> ComponentMap:
    """一定電流ごとに定常発火率を測り f–I 写像を作る（単位は 1/ms）"""
    window = settings.rate_window_ms if window is None else window
    transient = settings.transient_ms if transient is None else transient
    grid = np.asarray(input_grid, dtype=float).reshape(-1)
    if len(grid) < 2:
        raise InvalidInputError(f"input grid needs at least 2 currents, got {len(grid)}")
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) <= 0):
        raise InvalidInputError("input grid must be finite and strictly increasing")
    if window <= 0:
        raise InvalidInputError(f"window must be > 0, got {window}")
    lower, upper = (float(grid[0]), float(grid[-1])) if domain is None else domain
    if grid[0] < lower or grid[-1] > upper:
        raise InvalidInputError(f"input grid leaves the declared domain [{lower}, {upper}]")

    rates = np.zeros(len(grid))
    keep = np.ones(len(grid), dtype=bool)
    notes: List[str] = []
    if kind == "hh":
        if not isinstance(params, HHParams):
            raise InvalidInputError("kind 'hh' needs HHParams")
        trace = simulate_hh(params, grid, transient + window, dt)
        start = int(round(transient / trace.dt))
        for k in range(len(grid)):
            if trace.diverged[k]:
                keep[k] = False
                notes.append(f"excluded current={grid[k]!r}: non-finite state")
                continue
            times = spike_times(trace.v[start:, k], trace.dt)
            rates[k] = rate_from_spike_times(times, window)
        source = None
    elif kind == "lif":
        if not isinstance(params, LIFParams):
            raise InvalidInputError("kind 'lif' needs LIFParams")
        all_times = simulate_lif(params, grid, transient + window, dt)
        for k, times in enumerate(all_times):
            rates[k] = rate_from_spike_times(times[times >= transient], window)
        lif = params
        source = lambda x: lif_rate(lif, np.asarray(x)[:, 0])  # noqa: E731
    else:
        raise InvalidInputError(f"unknown neuron kind: {kind}")

    for note in notes:
        logger.warning(note)
    if keep.sum() < 2:
        raise InvalidInputError("fewer than 2 grid points survived simulation")
    logger.info(f"Built {kind} firing-rate map over {int(keep.sum())} currents")
    return ComponentMap(
        axes=(grid[keep],),
        value=rates[keep],
        lower=np.array([lower]),
        upper=np.array([upper]),
        name=f"{kind}_rate",
        source=source,
        notes=tuple(notes),
    )
