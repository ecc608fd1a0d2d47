import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .codec import DenseMaps, encode_targets, splat_gaussian
from .geometry import HALF_PI, ObbBox, wrap_angle_delta
from .losses import (AngleLossKind, FocalParams, LossWeights, RangeMode, angle_loss,
                     finite_difference_check, focal_loss, offset_loss, size_loss, total_loss,
                     warn_if_epsilon_out_of_range)

LOSS_NAMES = ("focal", "offset", "size", "angle", "total")
# 微分不可能な点からこの距離以上離れた点だけを使う
DEGENERATE_MARGIN = 1e-3


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    samples: int
    max_error: float

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


def _distinct_cells(rng: np.random.Generator, width: int, height: int, count: int) -> List[Tuple[int, int]]:
    flat = rng.choice(width * height, size=count, replace=False)
    return [(int(i % width), int(i // width)) for i in flat]


def _away_from_zero(rng: np.random.Generator, shape, low: float, high: float) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _angle_delta(rng: np.random.Generator, kind: AngleLossKind, limit: float) -> float:
    # 0, 1, π/2 (折り返し後) の近傍を避けた Δθ を棄却法で引く
    while True:
        delta = rng.uniform(-limit, limit)
        d = abs(wrap_angle_delta(delta))
        loci = [0.0, 1.0, HALF_PI]
        if kind is AngleLossKind.PLAIN_L1:
            d = abs(delta)
            loci = [0.0]
        if all(abs(d - p) > DEGENERATE_MARGIN for p in loci):
            return delta


def _check_focal(rng: np.random.Generator, epsilon: float, params: FocalParams) -> float:
    target = np.zeros((5, 5, 1))
    cell = _distinct_cells(rng, 5, 5, 1)[0]
    splat_gaussian(target[:, :, 0], cell, rng.uniform(0.5, 1.5))
    pred = rng.uniform(0.05, 0.95, size=target.shape)
    return finite_difference_check(lambda p: focal_loss(p, target, params, 1), pred, epsilon)


def _check_center_l1(rng: np.random.Generator, epsilon: float, loss, scale: float) -> float:
    target = rng.uniform(0.0, scale, size=(4, 4, 2))
    pred = target + _away_from_zero(rng, target.shape, 0.01 * scale, 0.5 * scale)
    centers = _distinct_cells(rng, 4, 4, 2)
    return finite_difference_check(lambda p: loss(p, target, centers), pred, epsilon)


def _check_angle(rng: np.random.Generator, epsilon: float, kind: AngleLossKind) -> float:
    target = rng.uniform(-HALF_PI, HALF_PI, size=(4, 4, 1))
    centers = _distinct_cells(rng, 4, 4, 3)
    pred = target + rng.uniform(-0.5, 0.5, size=target.shape)
    for x, y in centers:
        pred[y, x, 0] = target[y, x, 0] + _angle_delta(rng, kind, 1.5 * math.pi)
    return finite_difference_check(lambda p: angle_loss(p, target, centers, kind), pred, epsilon)


def _check_total(rng: np.random.Generator, epsilon: float, weights: LossWeights,
                 params: FocalParams, kind: AngleLossKind) -> float:
    size, stride = 16, 4
    cells = _distinct_cells(rng, size // stride, size // stride, 2)
    boxes = []
    for x, y in cells:
        h = rng.uniform(6.0, 14.0)
        boxes.append(ObbBox((x + rng.uniform(0.05, 0.95)) * stride, (y + rng.uniform(0.05, 0.95)) * stride,
                            h * rng.uniform(0.3, 0.9), h, rng.uniform(-HALF_PI, HALF_PI)))
    targets = encode_targets(boxes, size, size, stride)
    truth = targets.maps

    pred = DenseMaps.zeros(truth.width_out, truth.height_out, stride)
    pred.heatmap = rng.uniform(0.05, 0.95, size=truth.heatmap.shape)
    pred.offset = truth.offset + _away_from_zero(rng, truth.offset.shape, 0.01, 0.3)
    pred.size = truth.size + _away_from_zero(rng, truth.size.shape, 0.5, 3.0)
    theta_hat = truth.orientation + rng.uniform(-0.5, 0.5, size=truth.orientation.shape)
    for x, y in targets.centers:
        theta_hat[y, x, 0] = truth.orientation[y, x, 0] + _angle_delta(rng, kind, 1.4)
    pred.orientation = RangeMode.PI.encode(theta_hat)

    names = ("heatmap", "offset", "size", "orientation")
    shapes = [pred.channels()[n].shape for n in names]
    splits = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]

    def loss_fn(point: np.ndarray):
        candidate = pred.copy()
        for name, part, shape in zip(names, np.split(point, splits), shapes):
            setattr(candidate, name, part.reshape(shape))
        breakdown = total_loss(candidate, targets, weights, params, kind)
        return breakdown.total, np.concatenate([breakdown.grads[n].ravel() for n in names])

    point = np.concatenate([pred.channels()[n].ravel() for n in names])
    return finite_difference_check(loss_fn, point, epsilon)


def gradcheck_suite(loss_name: str = "all", samples: int = 100, epsilon: float = 1e-5,
                    seed: int = 0, logger=None, weights: LossWeights = None,
                    focal_params: FocalParams = None,
                    kind: AngleLossKind = AngleLossKind.SMOOTH_PERIODIC_L1) -> List[GradcheckResult]:
    """指定した損失についてランダムな非退化点で有限差分チェックを行う。

    "angle" は 3 種類の角度損失をそれぞれ別の結果として返す。weights, focal_params, kind は
    focal と total の評価に使う。
    """
    names = LOSS_NAMES if loss_name == "all" else (loss_name,)
    unknown = [n for n in names if n not in LOSS_NAMES]
    if unknown:
        raise ValueError(f"unknown loss: {', '.join(unknown)}")
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    warn_if_epsilon_out_of_range(epsilon, logger)
    weights = weights or LossWeights()
    focal_params = focal_params or FocalParams()
    rng = np.random.default_rng(seed)
    checks = {
        "focal": [("focal", lambda: _check_focal(rng, epsilon, focal_params))],
        "offset": [("offset", lambda: _check_center_l1(rng, epsilon, offset_loss, 1.0))],
        "size": [("size", lambda: _check_center_l1(rng, epsilon, size_loss, 50.0))],
        "angle": [(f"angle/{k.value}", lambda k=k: _check_angle(rng, epsilon, k)) for k in AngleLossKind],
        "total": [("total", lambda: _check_total(rng, epsilon, weights, focal_params, kind))],
    }
    results = []
    for name in names:
        for label, check in checks[name]:
            worst = max(check() for _ in range(samples))
            results.append(GradcheckResult(label, samples, worst))
    return results
