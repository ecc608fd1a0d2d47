import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .codec import DenseMaps, EncodedTargets
from .errors import EncodingError, ShapeMismatchError
from .geometry import HALF_PI, wrap_angle_delta

# log の発散を避けるためのヒートマップ予測のクランプ幅
HEATMAP_CLAMP = 1e-6
# 折り返し後の |Δθ| がここまで π/2 に近ければ特異点として勾配を 0 にする
SINGULAR_MARGIN = 1e-12

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


# --- 1. 設定値 ---
@dataclass(frozen=True)
class LossWeights:
    lambda_size: float = 0.1
    lambda_off: float = 1.0
    lambda_angle: float = 0.1

    def __post_init__(self):
        if min(self.lambda_size, self.lambda_off, self.lambda_angle) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"focal exponents must be positive: {self}")


class AngleLossKind(Enum):
    PLAIN_L1 = "l1"
    PERIODIC_L1 = "periodic-l1"
    SMOOTH_PERIODIC_L1 = "smooth-periodic-l1"


class RangeMode(Enum):
    """生出力 t から予測角 θ̂ への写像。"""
    HALF_PI = "halfpi"
    PI = "pi"
    UNBOUNDED = "unbounded"

    @property
    def bound(self) -> float:
        return {RangeMode.HALF_PI: HALF_PI, RangeMode.PI: math.pi}.get(self, math.inf)

    def decode(self, t):
        if self is RangeMode.UNBOUNDED:
            return t
        return self.bound * np.tanh(t)

    def derivative(self, t):
        if self is RangeMode.UNBOUNDED:
            return np.ones_like(t) if isinstance(t, np.ndarray) else 1.0
        return self.bound * (1.0 - np.tanh(t) ** 2)

    def encode(self, theta):
        """decode の逆写像。値域外の角度は ValueError。"""
        if self is RangeMode.UNBOUNDED:
            return theta
        ratio = np.asarray(theta, dtype=float) / self.bound
        if np.any(np.abs(ratio) >= 1.0):
            raise ValueError(f"angle {theta} outside the open range of {self.value} mode")
        t = np.arctanh(ratio)
        return t if np.ndim(t) else float(t)


@dataclass
class LossBreakdown:
    l_k: float
    l_off: float
    l_size: float
    l_angle: float
    total: float
    weights: LossWeights
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def contributions(self) -> Dict[str, float]:
        """重み付け後の各項。"""
        return {
            "heatmap": self.l_k,
            "offset": self.weights.lambda_off * self.l_off,
            "size": self.weights.lambda_size * self.l_size,
            "angle": self.weights.lambda_angle * self.l_angle,
        }


# --- 2. 各損失項 ---
def _as_pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def _center_index(array: np.ndarray, centers) -> Tuple[np.ndarray, np.ndarray]:
    cells = np.asarray(centers, dtype=int).reshape(-1, 2)
    xs, ys = cells[:, 0], cells[:, 1]
    height, width = array.shape[:2]
    outside = np.flatnonzero((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height))
    if outside.size:
        raise EncodingError("center cell outside map", outside.tolist())
    return xs, ys


def focal_loss(pred_heatmap, target_heatmap, params: Optional[FocalParams] = None,
               n_objects: int = 1) -> Tuple[float, np.ndarray]:
    """ガウシアンで減衰させたペナルティ付きの focal loss と予測に対する勾配。

    正例は target == 1 のセル。物体数 0 のときは 1 で正規化する。
    """
    params = params or FocalParams()
    pred, target = _as_pair(pred_heatmap, target_heatmap)
    alpha, beta = params.alpha, params.beta
    p = np.clip(pred, HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP)
    passthrough = (pred >= HEATMAP_CLAMP) & (pred <= 1.0 - HEATMAP_CLAMP)
    positive = target == 1.0
    neg_weight = (1.0 - target) ** beta
    log_p, log_q = np.log(p), np.log1p(-p)
    norm = max(n_objects, 1)

    pos_terms = -((1.0 - p) ** alpha) * log_p
    neg_terms = -neg_weight * p ** alpha * log_q
    loss = np.where(positive, pos_terms, neg_terms).sum() / norm

    d_pos = alpha * (1.0 - p) ** (alpha - 1) * log_p - (1.0 - p) ** alpha / p
    d_neg = -neg_weight * (alpha * p ** (alpha - 1) * log_q - p ** alpha / (1.0 - p))
    grad = np.where(positive, d_pos, d_neg) * passthrough / norm
    return float(loss), grad


def _center_l1(pred, target, centers) -> Tuple[float, np.ndarray]:
    pred, target = _as_pair(pred, target)
    xs, ys = _center_index(pred, centers)
    grad = np.zeros_like(pred)
    if len(xs) == 0:
        return 0.0, grad
    diff = pred[ys, xs] - target[ys, xs]
    np.add.at(grad, (ys, xs), np.sign(diff) / len(xs))
    return float(np.abs(diff).sum() / len(xs)), grad


def offset_loss(pred_offsets, target_offsets, centers) -> Tuple[float, np.ndarray]:
    """中心セルだけで評価するオフセットの L1。"""
    return _center_l1(pred_offsets, target_offsets, centers)


def size_loss(pred_sizes, target_sizes, centers) -> Tuple[float, np.ndarray]:
    return _center_l1(pred_sizes, target_sizes, centers)


def angle_terms(pred_angles, target_angles, kind: AngleLossKind) -> Tuple[np.ndarray, np.ndarray]:
    """物体ごとの角度損失とその θ̂ に対する微分。"""
    delta = np.asarray(pred_angles, dtype=float) - np.asarray(target_angles, dtype=float)
    if kind is AngleLossKind.PLAIN_L1:
        return np.abs(delta), np.sign(delta)
    d = np.asarray(wrap_angle_delta(delta), dtype=float)
    if kind is AngleLossKind.PERIODIC_L1:
        values, slopes = np.abs(d), np.sign(d)
    else:
        linear = np.abs(d) >= 1.0
        values = np.where(linear, np.abs(d) - 0.5, 0.5 * d * d)
        slopes = np.where(linear, np.sign(d), d)
    singular = np.abs(d) >= HALF_PI - SINGULAR_MARGIN
    return values, np.where(singular, 0.0, slopes)


def angle_loss(pred_angles, target_angles, centers,
               kind: AngleLossKind = AngleLossKind.SMOOTH_PERIODIC_L1) -> Tuple[float, np.ndarray]:
    """復号済み角度 θ̂ に対する角度損失。Δθ = θ̂ - θ。"""
    pred, target = _as_pair(pred_angles, target_angles)
    xs, ys = _center_index(pred, centers)
    grad = np.zeros_like(pred)
    if len(xs) == 0:
        return 0.0, grad
    values, slopes = angle_terms(pred[ys, xs], target[ys, xs], kind)
    np.add.at(grad, (ys, xs), slopes / len(xs))
    return float(values.sum() / len(xs)), grad


def total_loss(pred: DenseMaps, targets: EncodedTargets, weights: Optional[LossWeights] = None,
               focal_params: Optional[FocalParams] = None,
               kind: AngleLossKind = AngleLossKind.SMOOTH_PERIODIC_L1,
               range_mode: RangeMode = RangeMode.PI) -> LossBreakdown:
    """L = L_K + λ_size L_size + λ_off L_off + λ_angle L_angle と、予測マップ各チャンネルへの勾配。

    予測の orientation は生出力 t_θ で、range_mode で θ̂ に変換してから評価する。
    """
    weights = weights or LossWeights()
    truth = targets.maps
    pred.check_shapes()
    truth.check_shapes()
    for name, array in pred.channels().items():
        if array.shape != truth.channels()[name].shape:
            raise ShapeMismatchError(f"{name}: prediction {array.shape} != target {truth.channels()[name].shape}")

    centers = targets.centers
    l_k, g_k = focal_loss(pred.heatmap, truth.heatmap, focal_params, targets.object_count)
    l_off, g_off = offset_loss(pred.offset, truth.offset, centers)
    l_size, g_size = size_loss(pred.size, truth.size, centers)
    l_angle, g_theta = angle_loss(range_mode.decode(pred.orientation), truth.orientation, centers, kind)

    total = (l_k + weights.lambda_size * l_size + weights.lambda_off * l_off
             + weights.lambda_angle * l_angle)
    grads = {
        "heatmap": g_k,
        "offset": weights.lambda_off * g_off,
        "size": weights.lambda_size * g_size,
        "orientation": weights.lambda_angle * g_theta * range_mode.derivative(pred.orientation),
    }
    return LossBreakdown(l_k, l_off, l_size, l_angle, total, weights, grads)


# --- 3. 勾配検証 ---
EPSILON_RANGE = (1e-7, 1e-3)


def warn_if_epsilon_out_of_range(epsilon: float, logger=None) -> bool:
    """差分幅が推奨範囲外なら警告する。範囲外なら True。"""
    outside = not (EPSILON_RANGE[0] <= epsilon <= EPSILON_RANGE[1])
    if outside and logger is not None:
        logger.warn(f"epsilon={epsilon:g} is outside [{EPSILON_RANGE[0]:g}, {EPSILON_RANGE[1]:g}]; "
                    "the estimate will be dominated by truncation or rounding error")
    return outside


def finite_difference_check(loss_fn: LossFn, point, epsilon: float = 1e-5,
                            indices: Optional[Iterable[int]] = None, logger=None) -> float:
    """中心差分と解析勾配の最大相対誤差 |a - n| / max(1, |a|) を返す。

    loss_fn は点を受け取り (損失, 勾配) を返す。indices を渡すとその座標だけ調べる。
    """
    warn_if_epsilon_out_of_range(epsilon, logger)
    point = np.array(point, dtype=float)
    _, analytic = loss_fn(point)
    analytic = np.asarray(analytic, dtype=float).reshape(-1)
    flat = point.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if indices is None else indices):
        original = flat[i]
        flat[i] = original + epsilon
        upper = loss_fn(point)[0]
        flat[i] = original - epsilon
        lower = loss_fn(point)[0]
        flat[i] = original
        numeric = (upper - lower) / (2 * epsilon)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


# --- 4. 角度の勾配降下デモ ---
@dataclass(frozen=True)
class AngleStep:
    step: int
    t: float
    theta_hat: float
    loss: float


def descend_angles(target_theta, t_init, range_mode: RangeMode, kind: AngleLossKind,
                   learning_rate: float, steps: int) -> np.ndarray:
    """複数の (target, t) 組を同時に固定ステップの勾配降下で動かし、最終の t を返す。"""
    _check_descent(learning_rate, steps)
    target = np.asarray(target_theta, dtype=float)
    t = np.array(np.broadcast_to(np.asarray(t_init, dtype=float), target.shape))
    for _ in range(steps):
        _, slopes = angle_terms(range_mode.decode(t), target, kind)
        t = t - learning_rate * slopes * range_mode.derivative(t)
    return t


def fit_angle(target_theta: float, t_init: float, range_mode: RangeMode = RangeMode.PI,
              kind: AngleLossKind = AngleLossKind.SMOOTH_PERIODIC_L1,
              learning_rate: float = 0.1, steps: int = 500) -> List[AngleStep]:
    """1 物体の t をモーメンタムなしの勾配降下で更新し、初期値と各ステップ後の状態を記録する。"""
    _check_descent(learning_rate, steps)
    t = float(t_init)
    trajectory = []
    for step in range(steps + 1):
        theta_hat = float(range_mode.decode(t))
        values, slopes = angle_terms(theta_hat, target_theta, kind)
        trajectory.append(AngleStep(step, t, theta_hat, float(values)))
        if step < steps:
            t -= learning_rate * float(slopes) * float(range_mode.derivative(t))
    return trajectory


def _check_descent(learning_rate: float, steps: int):
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")


def angle_loss_curve(kind: AngleLossKind, deltas) -> Tuple[np.ndarray, np.ndarray]:
    """1 物体について Δθ の格子上の損失値と dL/dθ̂ を返す。"""
    deltas = np.asarray(deltas, dtype=float)
    return angle_terms(deltas, np.zeros_like(deltas), kind)


# --- 5. アブレーション ---
@dataclass(frozen=True)
class AblationRow:
    range_mode: RangeMode
    kind: AngleLossKind
    lambda_angle: float
    converged: float
    mean_error: float


def ablation_sweep(targets: Sequence[float], inits: Sequence[float],
                   range_modes: Sequence[RangeMode] = tuple(RangeMode),
                   kinds: Sequence[AngleLossKind] = tuple(AngleLossKind),
                   angle_weights: Sequence[float] = (1.0, 0.1, 0.01),
                   learning_rate: float = 0.1, steps: int = 500,
                   tolerance: float = math.radians(1.0)) -> List[AblationRow]:
    """予測範囲・角度損失・λ_angle の組ごとに全 (target, init) を降下させ、収束率と平均誤差を集計する。

    λ_angle は実効ステップ lr·λ_angle として効く。誤差は折り返し後の |Δθ|。
    """
    grid_target, grid_init = np.meshgrid(np.asarray(targets, float), np.asarray(inits, float), indexing="ij")
    grid_target, grid_init = grid_target.ravel(), grid_init.ravel()
    rows = []
    for mode in range_modes:
        t_init = mode.encode(grid_init)
        for kind in kinds:
            for weight in angle_weights:
                t_final = descend_angles(grid_target, t_init, mode, kind, learning_rate * weight, steps)
                errors = np.abs(wrap_angle_delta(mode.decode(t_final) - grid_target))
                rows.append(AblationRow(mode, kind, weight, float(np.mean(errors < tolerance)),
                                        float(np.mean(errors))))
    return rows
