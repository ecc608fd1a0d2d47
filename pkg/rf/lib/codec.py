import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import EncodingError, InvalidBoxError, ShapeMismatchError
from .geometry import ObbBox, canonicalize

DEFAULT_STRIDE = 4
DEFAULT_MIN_OVERLAP = 0.7
DEFAULT_CONF_THRESHOLD = 0.3
DEFAULT_TOP_K = 100

Cell = Tuple[int, int]


# --- 1. データ型 ---
@dataclass
class DenseMaps:
    """出力解像度 (H/s, W/s) の 4 種類のマップ。レイアウトはすべて [H, W, C]。

    予測として使うとき orientation は tanh 前の生出力 t_θ、ターゲットとしては正準角 θ を持つ。
    """
    width_out: int
    height_out: int
    stride: int
    heatmap: np.ndarray
    offset: np.ndarray
    size: np.ndarray
    orientation: np.ndarray

    @classmethod
    def zeros(cls, width_out: int, height_out: int, stride: int = DEFAULT_STRIDE, num_classes: int = 1) -> "DenseMaps":
        return cls(
            width_out=width_out, height_out=height_out, stride=stride,
            heatmap=np.zeros((height_out, width_out, num_classes)),
            offset=np.zeros((height_out, width_out, 2)),
            size=np.zeros((height_out, width_out, 2)),
            orientation=np.zeros((height_out, width_out, 1)),
        )

    def channels(self) -> dict:
        return {"heatmap": self.heatmap, "offset": self.offset, "size": self.size, "orientation": self.orientation}

    def check_shapes(self):
        expected = {"heatmap": None, "offset": 2, "size": 2, "orientation": 1}
        for name, array in self.channels().items():
            if array.ndim != 3 or array.shape[:2] != (self.height_out, self.width_out):
                raise ShapeMismatchError(
                    f"{name} map has shape {array.shape}, expected ({self.height_out}, {self.width_out}, C)")
            if expected[name] is not None and array.shape[2] != expected[name]:
                raise ShapeMismatchError(f"{name} map needs {expected[name]} channels, got {array.shape[2]}")

    def copy(self) -> "DenseMaps":
        return DenseMaps(self.width_out, self.height_out, self.stride,
                         self.heatmap.copy(), self.offset.copy(), self.size.copy(), self.orientation.copy())


@dataclass
class EncodedTargets:
    maps: DenseMaps
    centers: List[Cell] = field(default_factory=list)

    @property
    def object_count(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class Detection:
    box: ObbBox
    score: float


# --- 2. ガウシアン ---
def _smallest_valid_root(a: float, b: float, c: float) -> float:
    # a r^2 + b r + c = 0 の非負解のうち小さい方
    disc = math.sqrt(max(b * b - 4 * a * c, 0.0))
    roots = [r for r in ((-b - disc) / (2 * a), (-b + disc) / (2 * a)) if r >= 0]
    return min(roots) if roots else 0.0


def gaussian_radius(box_h: float, box_w: float, min_overlap: float = DEFAULT_MIN_OVERLAP) -> float:
    """CornerNet の 3 ケース (片側ずれ・内側・外側) で IoU >= min_overlap を保つ最大半径。

    単位はセル。下限は 1。
    """
    hw, s = box_h * box_w, box_h + box_w
    mo = min_overlap
    # 片方の角が内側、もう片方が外側
    r1 = _smallest_valid_root(1.0, -s, hw * (1 - mo) / (1 + mo))
    # 両方の角が内側
    r2 = _smallest_valid_root(4.0, -2 * s, (1 - mo) * hw)
    # 両方の角が外側
    r3 = _smallest_valid_root(4 * mo, 2 * mo * s, (mo - 1) * hw)
    return max(1.0, min(r1, r2, r3))


def splat_gaussian(heatmap: np.ndarray, center: Cell, sigma: float) -> np.ndarray:
    """center を中心に 2D ガウシアンを要素ごとの最大値で書き込む (in-place)。

    heatmap は [H, W] の 1 チャンネル。窓の半径は ceil(3σ) で、端では切り捨てる。
    """
    height, width = heatmap.shape[:2]
    x, y = center
    if not (0 <= x < width and 0 <= y < height):
        raise EncodingError(f"center cell {center} outside map {width}x{height}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3 * sigma))
    x0, x1 = max(0, x - radius), min(width, x + radius + 1)
    y0, y1 = max(0, y - radius), min(height, y + radius + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    kernel = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], kernel, out=heatmap[y0:y1, x0:x1])
    return heatmap


# --- 3. エンコード ---
def encode_targets(annotations: Sequence[ObbBox], image_w: int, image_h: int,
                   stride: int = DEFAULT_STRIDE, min_overlap: float = DEFAULT_MIN_OVERLAP) -> EncodedTargets:
    """正解ボックス群を 4 種類のターゲットマップに変換する。

    同じセルに複数の中心が落ちた場合、offset/size/angle は後のものが上書きし、
    heatmap は最大値を取る。
    """
    if stride <= 0 or image_w % stride or image_h % stride:
        raise EncodingError(f"stride {stride} must divide image size {image_w}x{image_h}")
    outside = [i for i, box in enumerate(annotations)
               if not (0 <= box.cx < image_w and 0 <= box.cy < image_h)]
    if outside:
        raise EncodingError("box center outside image", outside)

    maps = DenseMaps.zeros(image_w // stride, image_h // stride, stride)
    centers: List[Cell] = []
    for box in annotations:
        box = canonicalize(box)
        fx, fy = box.cx / stride, box.cy / stride
        x, y = int(math.floor(fx)), int(math.floor(fy))
        sigma = gaussian_radius(box.h / stride, box.w / stride, min_overlap) / 3
        splat_gaussian(maps.heatmap[:, :, 0], (x, y), sigma)
        maps.offset[y, x] = (fx - x, fy - y)
        maps.size[y, x] = (box.w, box.h)
        maps.orientation[y, x, 0] = box.theta
        centers.append((x, y))
    return EncodedTargets(maps=maps, centers=centers)


def to_prediction_maps(targets: EncodedTargets) -> DenseMaps:
    """ターゲットを予測マップ扱いにする。orientation を atanh(θ/π) に書き換える。"""
    maps = targets.maps.copy()
    maps.orientation = np.arctanh(maps.orientation / math.pi)
    return maps


def heatmap_preview(maps: DenseMaps) -> Image.Image:
    pixels = np.clip(maps.heatmap[:, :, 0] * 255.0, 0, 255).round().astype(np.uint8)
    return Image.fromarray(pixels)


# --- 4. デコード ---
def decode_angle(t_theta):
    """θ̂ = π·tanh(t_θ)。値域は (-π, π)。"""
    return math.pi * np.tanh(t_theta)


def extract_peaks(heatmap: np.ndarray, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                  top_k: int = DEFAULT_TOP_K) -> List[Tuple[Cell, float]]:
    """3x3 近傍のすべてのセル以上の値を持つセルをピークとして返す。

    スコア降順、同点は行優先インデックスの小さい順。
    """
    heat = np.asarray(heatmap, dtype=float)
    if heat.ndim == 3:
        heat = heat[:, :, 0]
    width = heat.shape[1]
    padded = np.pad(heat, 1, mode="constant", constant_values=-np.inf)
    neighborhood = np.lib.stride_tricks.sliding_window_view(padded, (3, 3)).max(axis=(-2, -1))
    keep = (heat >= neighborhood) & (heat >= conf_threshold)

    flat = np.flatnonzero(keep.ravel())
    scores = heat.ravel()[flat]
    order = np.lexsort((flat, -scores))[:max(top_k, 0)]
    return [((int(flat[i] % width), int(flat[i] // width)), float(scores[i])) for i in order]


def decode_detections(maps: DenseMaps, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                      top_k: int = DEFAULT_TOP_K) -> List[Detection]:
    """予測マップからピークを集めて回転矩形に復号する。NMS は行わない。

    サイズが正でないピークは有効なボックスにならないため捨てる。
    """
    detections = []
    for (x, y), score in extract_peaks(maps.heatmap, conf_threshold, top_k):
        ox, oy = maps.offset[y, x]
        w, h = maps.size[y, x]
        theta = decode_angle(float(maps.orientation[y, x, 0]))
        try:
            box = ObbBox((x + ox) * maps.stride, (y + oy) * maps.stride, float(w), float(h), float(theta))
        except InvalidBoxError:
            continue
        detections.append(Detection(canonicalize(box), score))
    return detections
