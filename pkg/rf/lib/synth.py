import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .codec import DEFAULT_STRIDE, Detection
from .errors import ConfigError
from .geometry import HALF_PI, ObbBox, canonicalize, obb_corners

# 画像ごとの乱数ストリームは SeedSequence(seed, spawn_key=(stream, index)) で作る
SCENE_STREAM = 0
PERTURB_STREAM = 1
MAX_PLACEMENT_ATTEMPTS = 1000


def image_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def image_id_for(index: int) -> str:
    return f"img_{index:04d}"


# --- 1. 設定 ---
@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    image_size: int = 512
    n_images: int = 10
    people_per_image: Tuple[int, int] = (2, 5)
    size_range: Tuple[float, float] = (40.0, 120.0)
    aspect_range: Tuple[float, float] = (0.3, 0.6)
    center_margin: float = 16.0

    def validate(self):
        lo, hi = self.people_per_image
        if self.image_size <= 0 or self.image_size % DEFAULT_STRIDE:
            raise ConfigError(f"image size {self.image_size} must be a positive multiple of {DEFAULT_STRIDE}")
        if self.n_images < 0:
            raise ConfigError(f"number of images must be non-negative, got {self.n_images}")
        if not 0 <= lo <= hi:
            raise ConfigError(f"people per image must satisfy 0 <= min <= max, got {lo}:{hi}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ConfigError(f"invalid size range {self.size_range}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1] < 1:
            raise ConfigError(f"aspect range must lie within (0, 1), got {self.aspect_range}")
        if self.center_margin < 0 or 2 * self.center_margin >= self.image_size:
            raise ConfigError(f"center margin {self.center_margin} leaves no room in a {self.image_size}px image")
        if self.size_range[0] >= self.image_size:
            raise ConfigError(f"people of height {self.size_range[0]} cannot fit in a {self.image_size}px image")


@dataclass(frozen=True)
class PerturbConfig:
    seed: int = 0
    center_noise_sigma: float = 0.0
    size_noise_sigma: float = 0.0
    angle_noise_sigma: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    score_model: Tuple[float, float] = (0.5, 1.0)

    def validate(self):
        sigmas = (self.center_noise_sigma, self.size_noise_sigma, self.angle_noise_sigma)
        if min(sigmas) < 0:
            raise ConfigError(f"noise sigmas must be non-negative, got {sigmas}")
        if not 0 <= self.drop_rate <= 1:
            raise ConfigError(f"drop rate must be a probability, got {self.drop_rate}")
        if self.spurious_rate < 0:
            raise ConfigError(f"spurious rate must be non-negative, got {self.spurious_rate}")
        lo, hi = self.score_model
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"score model must satisfy 0 <= floor <= ceiling <= 1, got {self.score_model}")


# --- 2. シーン生成 ---
def radial_angle(cx: float, cy: float, image_size: float) -> float:
    """h 軸が画像中心からの放射方向に沿う theta。θ = 0 は h 軸が +y。"""
    dx, dy = cx - image_size / 2, cy - image_size / 2
    if math.hypot(dx, dy) < 1.0:
        return 0.0
    return math.atan2(-dx, dy)


def _inside_image(box: ObbBox, image_size: float) -> bool:
    corners = obb_corners(box)
    return bool(np.all(corners >= 0.0) and np.all(corners <= image_size))


def _place_person(rng: np.random.Generator, cfg: SceneConfig) -> ObbBox:
    low, high = cfg.center_margin, cfg.image_size - cfg.center_margin
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        h = rng.uniform(*cfg.size_range)
        w = h * rng.uniform(*cfg.aspect_range)
        cx, cy = rng.uniform(low, high), rng.uniform(low, high)
        box = canonicalize(ObbBox(cx, cy, w, h, radial_angle(cx, cy, cfg.image_size)))
        if _inside_image(box, cfg.image_size):
            return box
    raise ConfigError(f"could not place a person inside the image after {MAX_PLACEMENT_ATTEMPTS} attempts; "
                      "reduce size_range or center_margin")


def generate_scene(cfg: SceneConfig) -> Dict[str, List[ObbBox]]:
    """俯瞰魚眼を模した合成シーン。人物の h 軸は画像中心からの放射方向を向く。"""
    cfg.validate()
    scene = {}
    for index in range(cfg.n_images):
        rng = image_rng(cfg.seed, SCENE_STREAM, index)
        count = int(rng.integers(cfg.people_per_image[0], cfg.people_per_image[1] + 1))
        scene[image_id_for(index)] = [_place_person(rng, cfg) for _ in range(count)]
    return scene


# --- 3. 擬似検出 ---
def _spurious_box(rng: np.random.Generator, width: float, height: float) -> ObbBox:
    h = rng.uniform(0.05, 0.25) * min(width, height)
    return canonicalize(ObbBox(rng.uniform(0, width), rng.uniform(0, height),
                               h * rng.uniform(0.3, 0.8), h, rng.uniform(-HALF_PI, HALF_PI)))


def perturb(gt: Dict[str, List[ObbBox]], cfg: PerturbConfig,
            image_sizes: Dict[str, Tuple[int, int]] = None) -> Dict[str, List[Detection]]:
    """正解にノイズを加えて擬似検出を作る。画像ごとにスコア降順で返す。

    偽検出の位置は image_sizes (幅, 高さ) の範囲で引く。省略時は正解ボックスの外接範囲を使う。
    """
    cfg.validate()
    floor, ceiling = cfg.score_model
    detections = {}
    for index, (image_id, boxes) in enumerate(gt.items()):
        rng = image_rng(cfg.seed, PERTURB_STREAM, index)
        dets = []
        for box in boxes:
            keep = rng.random() >= cfg.drop_rate
            noise = rng.normal(size=5)
            score = float(rng.uniform(floor, ceiling))
            if not keep:
                continue
            w = max(box.w * (1.0 + cfg.size_noise_sigma * noise[2]), 1e-3)
            h = max(box.h * (1.0 + cfg.size_noise_sigma * noise[3]), 1e-3)
            noisy = ObbBox(box.cx + cfg.center_noise_sigma * noise[0], box.cy + cfg.center_noise_sigma * noise[1],
                           w, h, box.theta + cfg.angle_noise_sigma * noise[4])
            dets.append(Detection(canonicalize(noisy), score))

        width, height = (image_sizes or {}).get(image_id, _extent(boxes))
        for _ in range(int(rng.poisson(cfg.spurious_rate))):
            dets.append(Detection(_spurious_box(rng, width, height), float(rng.uniform(0.0, floor))))
        dets.sort(key=lambda d: -d.score)
        detections[image_id] = dets
    return detections


def _extent(boxes: List[ObbBox]) -> Tuple[float, float]:
    if not boxes:
        return (1.0, 1.0)
    corners = np.concatenate([obb_corners(b) for b in boxes])
    return (max(float(corners[:, 0].max()), 1.0), max(float(corners[:, 1].max()), 1.0))


# --- 4. プレビュー ---
def render_preview(boxes: List[ObbBox], image_size: int) -> Image.Image:
    """確認用に枠線と h 軸を描いた画像。"""
    image = Image.new("RGB", (image_size, image_size), color=(0, 0, 0))
    draw = ImageDraw.Draw(image)
    center = image_size / 2
    draw.ellipse([center - 3, center - 3, center + 3, center + 3], outline=(255, 255, 0))
    for box in boxes:
        draw.polygon([tuple(p) for p in obb_corners(box)], outline=(0, 255, 0))
        dx, dy = -math.sin(box.theta) * box.h / 2, math.cos(box.theta) * box.h / 2
        draw.line([(box.cx - dx, box.cy - dy), (box.cx + dx, box.cy + dy)], fill=(255, 0, 0))
    return image
