"""単層フィードフォワードネットワーク（SLFN）と学習器

f_L(x) = Σ_i β_i g(a_i · x + b_i)

- ELM: 隠れ層をランダムに固定し、出力重みをリッジ最小二乗で一括で解く
- BP: 1サンプルずつの逐次更新（出力ノードは線形なので Δ_i = Err_i）
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import expit

from src.core.component_map import ComponentMap, grid_points
from src.core.config import settings
from src.core.errors import InvalidInputError
from src.core.seeding import make_rng
from src.core.smoothness import detect_discontinuities


logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# 活性化関数
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Activation:
    """g と、g の出力 h から g′ を計算する関数"""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bounded: bool


ACTIVATIONS: Dict[str, Activation] = {
    "sigmoid": Activation("sigmoid", expit, lambda pre, h: h * (1.0 - h), True),
    "tanh": Activation("tanh", np.tanh, lambda pre, h: 1.0 - h * h, True),
    # 有界でないため unbounded_ok=True のときのみ（厳密性チェック用）
    "identity": Activation("identity", lambda x: x, lambda pre, h: np.ones_like(pre), False),
}


def get_activation(name: str, unbounded_ok: bool = False) -> Activation:
    if name not in ACTIVATIONS:
        raise InvalidInputError(f"unknown activation '{name}'; use one of {sorted(ACTIVATIONS)}")
    act = ACTIVATIONS[name]
    if not act.bounded and not unbounded_ok:
        raise InvalidInputError(f"activation '{name}' is not bounded")
    return act


# ----------------------------------------------------------------------
# ネットワーク
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SLFN:
    """単層ネットワーク

    a: 隠れ層の重み (L, d)
    b: 隠れ層のバイアス (L,)
    beta: 出力重み (L, m)
    lower / upper: 入力ボックス。与えられた場合、入力は [-1, 1]^d に線形変換される
    """

    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    activation: str = "sigmoid"
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    unbounded_ok: bool = False

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim == 1:
            beta = beta.reshape(-1, 1)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "beta", beta)
        get_activation(self.activation, self.unbounded_ok)

        L = a.shape[0]
        if L < 1:
            raise InvalidInputError("hidden count L must be >= 1")
        if b.shape != (L,) or beta.shape[0] != L:
            raise InvalidInputError(
                f"inconsistent shapes: a={a.shape}, b={b.shape}, beta={beta.shape}"
            )
        for label, arr in (("a", a), ("b", b), ("beta", beta)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"SLFN parameter '{label}' has non-finite entries")
        if (self.lower is None) != (self.upper is None):
            raise InvalidInputError("lower and upper must be given together")
        if self.lower is not None:
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lo.shape != (a.shape[1],) or hi.shape != (a.shape[1],) or np.any(lo >= hi):
                raise InvalidInputError("input box must be non-empty with one bound per input")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @property
    def hidden_count(self) -> int:
        return int(self.a.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.a.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.beta.shape[1])

    @property
    def act(self) -> Activation:
        return get_activation(self.activation, self.unbounded_ok)

    def scale(self, x: np.ndarray) -> np.ndarray:
        if self.lower is None:
            return x
        return 2.0 * (x - self.lower) / (self.upper - self.lower) - 1.0

    def hidden(self, x: np.ndarray) -> np.ndarray:
        """隠れ層出力 H (N, L)"""
        return self.act.fn(self.scale(x) @ self.a.T + self.b)

    def with_beta(self, beta: np.ndarray) -> "SLFN":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": settings.schema_version,
            "activation": self.activation,
            "unbounded_ok": self.unbounded_ok,
            "input_dim": self.input_dim,
            "hidden_count": self.hidden_count,
            "output_dim": self.output_dim,
            "a": self.a.reshape(-1).tolist(),
            "b": self.b.tolist(),
            "beta": self.beta.reshape(-1).tolist(),
            "lower": None if self.lower is None else self.lower.tolist(),
            "upper": None if self.upper is None else self.upper.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SLFN":
        try:
            L, d, m = data["hidden_count"], data["input_dim"], data["output_dim"]
            return cls(
                a=np.asarray(data["a"], dtype=float).reshape(L, d),
                b=np.asarray(data["b"], dtype=float).reshape(L),
                beta=np.asarray(data["beta"], dtype=float).reshape(L, m),
                activation=data["activation"],
                lower=data.get("lower"),
                upper=data.get("upper"),
                unbounded_ok=bool(data.get("unbounded_ok", False)),
            )
        except KeyError as e:
            raise InvalidInputError(f"net file is missing field: {e.args[0]}") from e
        except ValueError as e:
            if isinstance(e, InvalidInputError):
                raise
            raise InvalidInputError(f"net file has inconsistent shapes: {e}") from e

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SLFN":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def init_slfn(
    input_dim: int,
    hidden_count: int,
    output_dim: int = 1,
    seed: int = 0,
    activation: str = "sigmoid",
    hidden_scale: float = 1.0,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
    stream: str = "elm",
) -> SLFN:
    """隠れ層パラメータを U[-s, s] から引いたネット（β = 0）

    行 [a_j, b_j] を1回の一様乱数で引くため、同じシードなら小さい L の
    パラメータは大きい L の先頭行と一致する。
    """
    if hidden_count < 1:
        raise InvalidInputError(f"hidden count must be >= 1, got {hidden_count}")
    if hidden_scale <= 0:
        raise InvalidInputError(f"hidden_scale must be > 0, got {hidden_scale}")
    rng = make_rng(seed, stream)
    params = rng.uniform(-hidden_scale, hidden_scale, size=(hidden_count, input_dim + 1))
    return SLFN(
        a=params[:, :input_dim],
        b=params[:, input_dim],
        beta=np.zeros((hidden_count, output_dim)),
        activation=activation,
        lower=lower,
        upper=upper,
    )


def forward(net: SLFN, x: np.ndarray) -> np.ndarray:
    """Σ_i β_i g(a_i · x + b_i)。x は1点 (d,) または複数点 (N, d)"""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim <= 1
    pts = pts.reshape(1, -1) if single else pts
    if pts.ndim != 2 or pts.shape[1] != net.input_dim:
        raise InvalidInputError(
            f"input dimension mismatch: net expects {net.input_dim}, got shape {np.shape(x)}"
        )
    out = net.hidden(pts) @ net.beta
    return out[0] if single else out


# ----------------------------------------------------------------------
# データセット・レポート
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    """学習データ。weights は L² 求積の重み"""

    inputs: np.ndarray
    targets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=float)
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if x.ndim == 1:
            x = x.reshape(-1, lo.shape[0])
        t = np.asarray(self.targets, dtype=float)
        if t.ndim == 1:
            t = t.reshape(-1, 1)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(x) == 0:
            raise InvalidInputError("dataset is empty")
        if x.shape[1] != lo.shape[0] or hi.shape != lo.shape or np.any(lo >= hi):
            raise InvalidInputError("dataset domain must be a non-empty box matching the inputs")
        if len(t) != len(x):
            raise InvalidInputError(f"{len(x)} inputs but {len(t)} targets")
        span = hi - lo
        if np.any(x < lo - 1e-12 * span) or np.any(x > hi + 1e-12 * span):
            raise InvalidInputError("dataset inputs lie outside the domain")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise InvalidInputError("dataset has non-finite entries")
        if self.weights is not None:
            object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).reshape(-1))

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def quadrature_weights(self) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        volume = float(np.prod(self.upper - self.lower))
        return np.full(self.size, volume / self.size)

    @classmethod
    def from_map(cls, cmap: ComponentMap, held_out: bool = False) -> "Dataset":
        """写像の格子（held_out=True なら半セルずらした格子）から作る"""
        if not held_out:
            return cls(
                inputs=cmap.points(),
                targets=cmap.value.reshape(-1),
                lower=cmap.lower,
                upper=cmap.upper,
                weights=cmap.quadrature_weights(),
            )
        pts = grid_points(cmap.held_out_axes())
        return cls(inputs=pts, targets=cmap.evaluate(pts), lower=cmap.lower, upper=cmap.upper)


@dataclass
class TrainReport:
    """学習結果

    flop_count は学習で行った算術演算数（BP は bp_flops_per_example の式、
    ELM は elm_flops の見積もり）。
    """

    method: str
    seed: int
    hidden_count: int
    final_l2: float
    flop_count: int
    epochs: int = 0
    solve_status: str = "ok"
    rank: Optional[int] = None
    diverged: bool = False
    diverged_at: Optional[Tuple[int, int]] = None
    delta: Optional[float] = None
    held_out_l2: Optional[float] = None
    met: Optional[bool] = None
    history: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["diverged_at"] = None if self.diverged_at is None else list(self.diverged_at)
        return data


def _weighted_l2(residual: np.ndarray, weights: np.ndarray) -> float:
    residual = residual.reshape(len(weights), -1)
    return float(np.sqrt(np.sum(weights[:, None] * residual**2)))


def dataset_error(net: SLFN, data: Dataset) -> float:
    return _weighted_l2(forward(net, data.inputs) - data.targets, data.quadrature_weights())


def l2_error(net: SLFN, target: ComponentMap) -> float:
    """[∫_X |f_L − f|² dx]^{1/2} の求積近似"""
    if net.lower is not None and not target.same_domain(net.lower, net.upper):
        raise InvalidInputError(
            f"net domain [{net.lower.tolist()}, {net.upper.tolist()}] differs from map "
            f"'{target.name}' domain [{target.lower.tolist()}, {target.upper.tolist()}]"
        )
    if net.input_dim != target.dim or net.output_dim != 1:
        raise InvalidInputError(
            f"net shape ({net.input_dim} -> {net.output_dim}) does not fit map '{target.name}'"
        )
    return dataset_error(net, Dataset.from_map(target))


def held_out_error(net: SLFN, target: ComponentMap) -> float:
    return dataset_error(net, Dataset.from_map(target, held_out=True))


# ----------------------------------------------------------------------
# 演算数
# ----------------------------------------------------------------------
def bp_flops_per_example(d: int, L: int, m: int) -> int:
    """BP の1サンプルあたりの算術演算数

    順伝播: 入力変換 3d, 隠れ層入力 2dL, 活性化 L, 出力 m(2L−1)
    逆伝播: 誤差 m, 隠れ層 Δ L(2m+2)
    更新: β 3Lm, a 3Ld, b 2L
    """
    forward_ops = 3 * d + 2 * d * L + L + m * (2 * L - 1)
    backward_ops = m + L * (2 * m + 2)
    update_ops = 3 * L * m + 3 * L * d + 2 * L
    return forward_ops + backward_ops + update_ops


def elm_flops(N: int, d: int, L: int, m: int) -> int:
    """ELM の演算数の見積もり（特徴行列 + 薄い SVD + 解の構成）"""
    features = 3 * N * d + N * L * (2 * d + 1)
    svd = 4 * N * L * L + 8 * L**3
    solve = 2 * N * L * m + L * m + 2 * L * L * m + 4 * L
    return features + svd + solve


# ----------------------------------------------------------------------
# ELM
# ----------------------------------------------------------------------
# 既存の列で張られる成分を除いた残りがこの比率以下の列は従属とみなす
_DEPENDENT_TOL = 1e-8


def _svd(H: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return linalg.svd(H, full_matrices=False, lapack_driver="gesdd")


@dataclass
class _OrderedSolve:
    beta: np.ndarray
    kept: np.ndarray
    residuals: np.ndarray  # 先頭 j+1 列まで使ったときの残差ノルム


def _ordered_lstsq(H: np.ndarray, T: np.ndarray) -> _OrderedSolve:
    """列を先頭から順に直交化する最小二乗（λ = 0）

    従属とみなした列の β は 0 にする。先頭 L 列の処理は後続の列に依存しないため、
    入れ子の特徴集合では残差が L について単調非増加になる。
    """
    N, L = H.shape
    cap = min(N, L)
    Qt = np.zeros((cap, N))
    R = np.zeros((cap, cap))
    kept = np.zeros(L, dtype=bool)
    residual = np.array(T, dtype=float, copy=True)
    residuals = np.empty(L)
    k = 0
    for j in range(L):
        column = H[:, j]
        scale = float(np.linalg.norm(column))
        if k < cap and scale > 0.0:
            v = column.copy()
            r = np.zeros(k)
            # 2回の直交化で直交性を保つ
            for _ in range(2):
                c = Qt[:k] @ v
                v -= Qt[:k].T @ c
                r += c
            norm = float(np.linalg.norm(v))
            if norm > _DEPENDENT_TOL * scale:
                q = v / norm
                Qt[k] = q
                R[:k, k] = r
                R[k, k] = norm
                residual -= np.outer(q, q @ residual)
                kept[j] = True
                k += 1
        residuals[j] = float(np.linalg.norm(residual))

    beta = np.zeros((L, T.shape[1]))
    if k:
        beta[kept] = linalg.solve_triangular(R[:k, :k], Qt[:k] @ T)
    return _OrderedSolve(beta=beta, kept=kept, residuals=residuals)


def elm_train(
    data: Dataset,
    hidden_count: int,
    activation: str = "sigmoid",
    ridge: Optional[float] = None,
    seed: Optional[int] = None,
    hidden_scale: Optional[float] = None,
) -> Tuple[SLFN, TrainReport]:
    """min ‖Hβ − T‖² + λ‖β‖² を解く

    λ > 0 は薄い SVD で β = V diag(s/(s²+λ)) Uᵀ T。λ = 0 は列を順に直交化する
    最小二乗で解き、従属な列（β_j = 0）があれば solve_status に rank_deficient を記録する。
    final_l2 は学習格子上の重み付き残差。
    """
    ridge = settings.elm_ridge if ridge is None else ridge
    seed = settings.seed if seed is None else seed
    hidden_scale = settings.elm_hidden_scale if hidden_scale is None else hidden_scale
    if ridge < 0:
        raise InvalidInputError(f"ridge must be >= 0, got {ridge}")

    net = init_slfn(
        data.inputs.shape[1], hidden_count, data.targets.shape[1], seed, activation,
        hidden_scale, data.lower, data.upper,
    )
    H = net.hidden(data.inputs)
    root_w = np.sqrt(data.quadrature_weights())[:, None]

    if ridge > 0:
        U, s, Vt = _svd(H)
        tol = (s[0] if len(s) else 0.0) * max(H.shape) * np.finfo(float).eps
        rank = int(np.sum(s > tol))
        filt = s / (s * s + ridge)
        UtT = U.T @ data.targets
        beta = Vt.T @ (filt[:, None] * UtT)
        fitted = U @ ((s * filt)[:, None] * UtT)
        final_l2 = _weighted_l2(data.targets - fitted, data.quadrature_weights())
    else:
        solved = _ordered_lstsq(root_w * H, root_w * data.targets)
        beta = solved.beta
        rank = int(np.sum(solved.kept))
        final_l2 = float(solved.residuals[-1])
    net = net.with_beta(beta)

    status = "ok"
    if ridge == 0 and rank < hidden_count:
        status = "rank_deficient"
        logger.warning(
            f"ELM solve is rank deficient (rank {rank} < L={hidden_count}); dependent columns get beta = 0"
        )

    report = TrainReport(
        method="elm",
        seed=seed,
        hidden_count=hidden_count,
        final_l2=final_l2,
        flop_count=elm_flops(data.size, data.inputs.shape[1], hidden_count, data.targets.shape[1]),
        solve_status=status,
        rank=rank,
        config={"ridge": ridge, "hidden_scale": hidden_scale, "activation": activation},
    )
    logger.info(f"ELM L={hidden_count}: training L2 {final_l2:.3e} (rank {rank})")
    return net, report


def nested_training_errors(
    data: Dataset,
    hidden_counts: Sequence[int],
    activation: str = "sigmoid",
    seed: Optional[int] = None,
    hidden_scale: Optional[float] = None,
) -> List[float]:
    """λ = 0 の学習誤差を入れ子の特徴集合ごとに返す

    特徴は最大の L で1度だけ引き、各 L ではその先頭列を使う。値は同じ L の
    elm_train(..., ridge=0) の final_l2 と一致する。
    """
    if not hidden_counts:
        return []
    if min(hidden_counts) < 1:
        raise InvalidInputError(f"hidden counts must be >= 1, got {list(hidden_counts)}")
    seed = settings.seed if seed is None else seed
    hidden_scale = settings.elm_hidden_scale if hidden_scale is None else hidden_scale
    net = init_slfn(
        data.inputs.shape[1], max(hidden_counts), data.targets.shape[1], seed, activation,
        hidden_scale, data.lower, data.upper,
    )
    root_w = np.sqrt(data.quadrature_weights())[:, None]
    solved = _ordered_lstsq(root_w * net.hidden(data.inputs), root_w * data.targets)
    return [float(solved.residuals[L - 1]) for L in hidden_counts]


# ----------------------------------------------------------------------
# BP
# ----------------------------------------------------------------------
def bp_train(
    net: SLFN,
    data: Dataset,
    alpha: Optional[float] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
) -> Tuple[SLFN, TrainReport]:
    """1サンプルずつデータ順に更新

    Δ_i = Err_i（線形出力）、Δ_j = g′(in_j) Σ_i β_ji Δ_i（更新前の β を使う）
    β_ji ← β_ji + α h_j Δ_i、a_jk ← a_jk + α z_k Δ_j、b_j ← b_j + α Δ_j
    """
    alpha = settings.bp_alpha if alpha is None else alpha
    epochs = settings.bp_max_epochs if epochs is None else epochs
    seed = settings.seed if seed is None else seed
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be > 0, got {alpha}")
    if epochs < 0:
        raise InvalidInputError(f"epochs must be >= 0, got {epochs}")
    if data.inputs.shape[1] != net.input_dim or data.targets.shape[1] != net.output_dim:
        raise InvalidInputError("dataset shape does not match the net")

    act = net.act
    a, b, beta = net.a.copy(), net.b.copy(), net.beta.copy()
    Z = net.scale(data.inputs)
    T = data.targets
    per_example = bp_flops_per_example(net.input_dim, net.hidden_count, net.output_dim)
    flops = 0
    done = 0
    diverged_at: Optional[Tuple[int, int]] = None

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            for n in range(data.size):
                z = Z[n]
                pre = a @ z + b
                h = act.fn(pre)
                err = T[n] - h @ beta
                delta_hidden = act.derivative(pre, h) * (beta @ err)
                beta += alpha * np.outer(h, err)
                a += alpha * np.outer(delta_hidden, z)
                b += alpha * delta_hidden
                flops += per_example
                if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                    diverged_at = (epoch, n)
                    break
            if diverged_at is not None:
                break
            done += 1

    if diverged_at is not None:
        logger.warning(f"BP diverged at epoch {diverged_at[0]}, example {diverged_at[1]}")
        # 発散前のネットは保持できないため、入力ネットを返す
        trained = net
        final_l2 = float("inf")
    else:
        trained = replace(net, a=a, b=b, beta=beta)
        final_l2 = dataset_error(trained, data)

    report = TrainReport(
        method="bp",
        seed=seed,
        hidden_count=net.hidden_count,
        final_l2=final_l2,
        flop_count=flops,
        epochs=done,
        solve_status="diverged" if diverged_at is not None else "ok",
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
        config={"alpha": alpha, "epochs": epochs, "flops_per_example": per_example},
    )
    return trained, report


def _loss(net: SLFN, data: Dataset) -> float:
    residual = data.targets - forward(net, data.inputs)
    return 0.5 * float(np.sum(residual**2))


def bp_increments(net: SLFN, data: Dataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """固定した重みでの BP 増分 / α を全サンプルで合計（= −∂E/∂w）"""
    act = net.act
    Z = net.scale(data.inputs)
    pre = Z @ net.a.T + net.b
    H = act.fn(pre)
    err = data.targets - H @ net.beta
    delta_hidden = act.derivative(pre, H) * (err @ net.beta.T)
    return delta_hidden.T @ Z, delta_hidden.sum(axis=0), H.T @ err


def bp_gradient_check(net: SLFN, data: Dataset, h: float = 1e-6) -> float:
    """BP の増分と E = ½ΣErr² の中心差分の最大相対偏差

    偏差は |g − fd| / max(|g|, |fd|, 1)。
    """
    if not h > 0:
        raise InvalidInputError(f"step h must be > 0, got {h}")
    inc_a, inc_b, inc_beta = bp_increments(net, data)
    worst = 0.0
    for label, increments in (("a", inc_a), ("b", inc_b), ("beta", inc_beta)):
        base = getattr(net, label)
        for index in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[index] += h
            minus[index] -= h
            fd = (_loss(replace(net, **{label: plus}), data) - _loss(replace(net, **{label: minus}), data)) / (2 * h)
            g = -float(increments[index])
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1.0))
    return worst


# ----------------------------------------------------------------------
# 許容誤差までの学習
# ----------------------------------------------------------------------
def train_to_tolerance(
    target: ComponentMap,
    delta: float,
    method: str = "elm",
    budget: Optional[int] = None,
    seed: Optional[int] = None,
    activation: str = "sigmoid",
    ridge: Optional[float] = None,
    hidden_scale: Optional[float] = None,
    alpha: Optional[float] = None,
    hidden_count: Optional[int] = None,
    certify: bool = True,
) -> Tuple[SLFN, TrainReport]:
    """半セルずらした検証格子での L² 誤差が delta 未満になるまで学習

    ELM は L = 8 から倍々に、BP は check_every エポックごとに評価する。
    予算内に届かなければ検証誤差が最小のネットを met=False で返す。
    """
    if not delta > 0:
        raise InvalidInputError(f"delta must be > 0, got {delta}")
    if method not in ("elm", "bp"):
        raise InvalidInputError(f"unknown method '{method}'")
    seed = settings.seed if seed is None else seed
    hidden_scale = settings.elm_hidden_scale if hidden_scale is None else hidden_scale
    if certify and not detect_discontinuities(target).piecewise_continuous:
        raise InvalidInputError(f"map '{target.name}' is not certified piecewise continuous")

    data = Dataset.from_map(target)
    held = Dataset.from_map(target, held_out=True)
    best: Optional[Tuple[float, SLFN, TrainReport]] = None
    history: List[Dict[str, Any]] = []
    total_flops = 0

    if method == "elm":
        budget = settings.elm_max_hidden if budget is None else budget
        L = settings.elm_initial_hidden
        while L <= budget:
            net, rep = elm_train(data, L, activation, ridge, seed, hidden_scale)
            err = dataset_error(net, held)
            total_flops += rep.flop_count
            history.append({"hidden_count": L, "train_l2": rep.final_l2, "held_out_l2": err})
            if best is None or err < best[0]:
                best = (err, net, rep)
            if err < delta:
                break
            L *= 2
        if best is None:
            raise InvalidInputError(f"budget {budget} is below the initial hidden count {settings.elm_initial_hidden}")
    else:
        budget = settings.bp_max_epochs if budget is None else budget
        L = settings.bp_hidden if hidden_count is None else hidden_count
        net = init_slfn(target.dim, L, 1, seed, activation, hidden_scale, target.lower, target.upper, stream="bp")
        epochs_run = 0
        rep = None
        while epochs_run < budget:
            step = min(settings.bp_check_every, budget - epochs_run)
            net, rep = bp_train(net, data, alpha, step, seed)
            total_flops += rep.flop_count
            epochs_run += rep.epochs
            if rep.diverged:
                break
            err = dataset_error(net, held)
            history.append({"epochs": epochs_run, "train_l2": rep.final_l2, "held_out_l2": err})
            if best is None or err < best[0]:
                best = (err, net, replace(rep, epochs=epochs_run))
            if err < delta:
                break
        if best is None:
            err = dataset_error(net, held)
            report = rep if rep is not None else TrainReport("bp", seed, L, dataset_error(net, data), 0)
            best = (err, net, report)

    err, net, rep = best
    met = err < delta
    report = replace(
        rep,
        seed=seed,
        flop_count=total_flops,
        delta=delta,
        held_out_l2=err,
        met=met,
        history=history,
    )
    if met:
        logger.info(f"Twin for '{target.name}' met delta={delta} with held-out L2 {err:.3e}")
    else:
        logger.warning(f"Twin for '{target.name}' missed delta={delta}; best held-out L2 {err:.3e}")
    return net, report


def compare_training_cost(
    target: ComponentMap,
    seed: Optional[int] = None,
    bp_epochs: Optional[int] = None,
    bp_hidden: Optional[int] = None,
    alpha: Optional[float] = None,
    activation: str = "sigmoid",
) -> Dict[str, Any]:
    """同程度の学習誤差に達するまでの BP と ELM の演算数を比べる

    BP を bp_epochs だけ回し、その学習誤差以下になる最小の L（倍々）の ELM と比べる。
    """
    seed = settings.seed if seed is None else seed
    bp_epochs = settings.bp_max_epochs if bp_epochs is None else bp_epochs
    bp_hidden = settings.bp_hidden if bp_hidden is None else bp_hidden
    data = Dataset.from_map(target)

    net = init_slfn(target.dim, bp_hidden, 1, seed, activation, settings.elm_hidden_scale, target.lower, target.upper, stream="bp")
    _, bp_report = bp_train(net, data, alpha, bp_epochs, seed)

    elm_report: Optional[TrainReport] = None
    L = settings.elm_initial_hidden
    while L <= settings.elm_max_hidden:
        _, elm_report = elm_train(data, L, activation, seed=seed)
        if elm_report.final_l2 <= bp_report.final_l2:
            break
        L *= 2
    if elm_report is None:
        raise InvalidInputError(
            f"elm_max_hidden {settings.elm_max_hidden} is below the initial hidden count {settings.elm_initial_hidden}"
        )

    result = {
        "target": target.name,
        "seed": seed,
        "bp": {
            "final_l2": bp_report.final_l2,
            "flop_count": bp_report.flop_count,
            "epochs": bp_report.epochs,
            "hidden_count": bp_hidden,
        },
        "elm": {
            "final_l2": elm_report.final_l2,
            "flop_count": elm_report.flop_count,
            "hidden_count": elm_report.hidden_count,
            "reached_bp_error": elm_report.final_l2 <= bp_report.final_l2,
        },
    }
    result["flop_ratio_bp_over_elm"] = bp_report.flop_count / max(elm_report.flop_count, 1)
    logger.info(
        f"Training cost on '{target.name}': BP {bp_report.flop_count} flops vs ELM {elm_report.flop_count} flops"
    )
    return result
