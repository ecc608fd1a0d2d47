import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from .errors import InvalidBoxError

HALF_PI = math.pi / 2
# これ未満の交差面積は浮動小数点の切れ端として空とみなす
MIN_INTERSECTION_AREA = 1e-12

# 頂点列 (n, 2)。y 軸下向きの画像座標で反時計回り。空は (0, 2)。
Polygon = np.ndarray


# --- 1. ObbBox ---
@dataclass(frozen=True)
class ObbBox:
    """回転矩形 (cx, cy, w, h, theta)。単位はピクセルとラジアン。

    theta が正のとき、ボックスのローカル x 軸は画像の +y 方向へ回転する。
    """
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise InvalidBoxError(f"non-finite box field: {values}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"box dimensions must be positive: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def is_canonical(self) -> bool:
        return self.w <= self.h and -HALF_PI <= self.theta < HALF_PI


# --- 2. 角度 ---
def wrap_angle(theta: float) -> float:
    """角度を [-π/2, π/2) に折り返す (矩形の π 周期性)。"""
    if -HALF_PI <= theta < HALF_PI:
        return theta
    wrapped = theta - math.pi * math.floor((theta + HALF_PI) / math.pi)
    # floor 直後の丸め誤差で境界を踏み越えた場合の補正
    if wrapped >= HALF_PI:
        wrapped -= math.pi
    elif wrapped < -HALF_PI:
        wrapped += math.pi
    return wrapped


def wrap_angle_delta(delta):
    """角度差を (-π/2, π/2] に折り返す。スカラーと ndarray の両方を受け付ける。

    arctan(sin Δ / cos Δ) と同じ値だが、特異点 Δ = kπ + π/2 では π/2 を返す。
    """
    wrapped = HALF_PI - np.remainder(HALF_PI - np.asarray(delta, dtype=float), math.pi)
    # remainder が丸めで π ちょうどを返すと -π/2 になるため開区間へ戻す
    wrapped = np.where(wrapped <= -HALF_PI, wrapped + math.pi, wrapped)
    return wrapped if np.ndim(wrapped) else float(wrapped)


def canonicalize(box: ObbBox) -> ObbBox:
    """w <= h かつ theta ∈ [-π/2, π/2) の正準形に変換する。点集合は変わらない。"""
    w, h, theta = box.w, box.h, box.theta
    if w > h:
        # 90 度回転すればローカル軸が入れ替わる
        w, h, theta = h, w, theta + HALF_PI
    return ObbBox(box.cx, box.cy, w, h, wrap_angle(theta))


# --- 3. 多角形 ---
def obb_corners(box: ObbBox) -> Polygon:
    """4 頂点を (-w/2,-h/2), (-w/2,h/2), (w/2,h/2), (w/2,-h/2) の順で回転・平行移動して返す。"""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = box.w / 2, box.h / 2
    local = np.array([(-hw, -hh), (-hw, hh), (hw, hh), (hw, -hh)])
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([box.cx, box.cy])


def _signed_area(polygon: Polygon) -> float:
    if len(polygon) < 3:
        return 0.0
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(polygon: Polygon) -> float:
    """靴紐公式による面積。空の多角形は 0。"""
    return abs(_signed_area(np.asarray(polygon, dtype=float).reshape(-1, 2)))


def _empty_polygon() -> Polygon:
    return np.zeros((0, 2))


def convex_clip(subject: Polygon, clip: Polygon) -> Polygon:
    """Sutherland–Hodgman 法で凸多角形 subject を凸多角形 clip で切り取る。

    クリップ側の向きは符号付き面積から判定するので、時計回りでも動作する。
    """
    subject = np.asarray(subject, dtype=float).reshape(-1, 2)
    clip = np.asarray(clip, dtype=float).reshape(-1, 2)
    if len(subject) < 3 or len(clip) < 3:
        return _empty_polygon()
    orientation = math.copysign(1.0, _signed_area(clip))

    output: List[Tuple[float, float]] = [tuple(p) for p in subject]
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            break
        candidates, output = output, []
        s = candidates[-1]
        s_side = _edge_side(s, cp1, cp2, orientation)
        for e in candidates:
            e_side = _edge_side(e, cp1, cp2, orientation)
            if e_side >= 0:
                if s_side < 0:
                    output.append(_crossing(s, e, s_side, e_side))
                output.append(e)
            elif s_side >= 0:
                output.append(_crossing(s, e, s_side, e_side))
            s, s_side = e, e_side
        cp1 = cp2

    result = np.array(output, dtype=float).reshape(-1, 2)
    if len(result) < 3 or polygon_area(result) < MIN_INTERSECTION_AREA:
        return _empty_polygon()
    return result


def _edge_side(p, cp1, cp2, orientation: float) -> float:
    # 内側 (多角形の向きと同じ側) で正、辺上で 0
    return orientation * ((cp2[0] - cp1[0]) * (p[1] - cp1[1]) - (cp2[1] - cp1[1]) * (p[0] - cp1[0]))


def _crossing(s, e, s_side: float, e_side: float) -> Tuple[float, float]:
    # 両端の符号付き距離から交点を内挿する。符号が異なるので分母は 0 にならない
    t = s_side / (s_side - e_side)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


# --- 4. IoU ---
def rotated_iou(a: ObbBox, b: ObbBox) -> float:
    inter = polygon_area(convex_clip(obb_corners(a), obb_corners(b)))
    if inter < MIN_INTERSECTION_AREA:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def rotate_boxes(boxes: Iterable[ObbBox], angle: float, origin: Tuple[float, float] = (0.0, 0.0)) -> List[ObbBox]:
    """原点 origin まわりに全ボックスを剛体回転する。"""
    c, s = math.cos(angle), math.sin(angle)
    ox, oy = origin
    rotated = []
    for box in boxes:
        dx, dy = box.cx - ox, box.cy - oy
        rotated.append(ObbBox(ox + c * dx - s * dy, oy + s * dx + c * dy, box.w, box.h, box.theta + angle))
    return rotated
