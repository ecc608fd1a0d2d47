import math

import numpy as np
import pytest

from lib.errors import InvalidBoxError
from lib.geometry import (HALF_PI, ObbBox, canonicalize, convex_clip, obb_corners, polygon_area,
                          rotate_boxes, rotated_iou, wrap_angle, wrap_angle_delta)

UNIT_SQUARE = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])


def _same_vertices(actual, expected, tol=1e-9):
    actual = sorted(map(tuple, np.round(np.asarray(actual), 9)))
    expected = sorted(map(tuple, np.round(np.asarray(expected, dtype=float), 9)))
    return len(actual) == len(expected) and all(
        math.isclose(a[0], b[0], abs_tol=tol) and math.isclose(a[1], b[1], abs_tol=tol)
        for a, b in zip(actual, expected))


def _random_box(rng, extent=50.0):
    return ObbBox(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                  rng.uniform(1.0, 40.0), rng.uniform(1.0, 40.0), rng.uniform(-2 * math.pi, 2 * math.pi))


def _raster_iou(a: ObbBox, b: ObbBox, resolution: int = 1000) -> float:
    # 両ボックスを含む正方形を格子点で塗り、ローカル座標での包含判定で面積を数える
    corners = np.vstack([obb_corners(a), obb_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    span = float((hi - lo).max())
    step = span / resolution
    xs, ys = np.meshgrid(lo[0] + (np.arange(resolution) + 0.5) * step,
                         lo[1] + (np.arange(resolution) + 0.5) * step)

    def inside(box):
        c, s = math.cos(box.theta), math.sin(box.theta)
        dx, dy = xs - box.cx, ys - box.cy
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


# --- ObbBox / canonicalize ---
@pytest.mark.parametrize("box, expected", [
    (ObbBox(10, 10, 4, 2, 0), (10, 10, 2, 4, -HALF_PI)),
    (ObbBox(0, 0, 2, 4, math.pi), (0, 0, 2, 4, 0.0)),
    (ObbBox(5, 5, 3, 3, 0.3), (5, 5, 3, 3, 0.3)),
])
def test_canonicalize_examples(box, expected):
    result = canonicalize(box)
    assert result.as_tuple() == pytest.approx(expected, abs=1e-12)
    assert result.is_canonical()


@pytest.mark.parametrize("fields", [
    (0, 0, 0, 4, 0), (0, 0, 2, -1, 0), (0, 0, 2, 4, math.nan), (math.inf, 0, 2, 4, 0),
])
def test_invalid_box_rejected(fields):
    with pytest.raises(InvalidBoxError):
        ObbBox(*fields)


def test_canonicalize_preserves_point_set():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        box = _random_box(rng)
        canon = canonicalize(box)
        assert canon.is_canonical()
        assert canon.w <= canon.h
        assert canonicalize(canon) == canon
        assert rotated_iou(box, canon) == pytest.approx(1.0, abs=1e-9)


def test_wrap_angle_range_and_identity():
    assert wrap_angle(0.25) == 0.25
    assert wrap_angle(HALF_PI) == pytest.approx(-HALF_PI)
    assert -HALF_PI <= wrap_angle(-HALF_PI) < HALF_PI
    rng = np.random.default_rng(3)
    for theta in rng.uniform(-20, 20, size=500):
        wrapped = wrap_angle(theta)
        assert -HALF_PI <= wrapped < HALF_PI
        assert math.sin(2 * (wrapped - theta)) == pytest.approx(0.0, abs=1e-9)


# --- wrap_angle_delta ---
@pytest.mark.parametrize("delta, expected", [
    (math.pi, 0.0),
    (0.6 * math.pi, -0.4 * math.pi),
    (HALF_PI, HALF_PI),
    (-HALF_PI, HALF_PI),
    (0.0, 0.0),
])
def test_wrap_angle_delta_examples(delta, expected):
    assert wrap_angle_delta(delta) == pytest.approx(expected, abs=1e-12)


def test_wrap_angle_delta_matches_arctan_form():
    rng = np.random.default_rng(5)
    deltas = rng.uniform(-10, 10, size=2000)
    expected = np.arctan(np.sin(deltas) / np.cos(deltas))
    wrapped = wrap_angle_delta(deltas)
    assert isinstance(wrapped, np.ndarray)
    assert np.all(wrapped > -HALF_PI) and np.all(wrapped <= HALF_PI)
    np.testing.assert_allclose(wrapped, expected, atol=1e-9)


def test_wrap_angle_delta_is_pi_periodic():
    # 浮動小数点では kπ の加算自体が丸められるので 1e-12 で比較する
    rng = np.random.default_rng(6)
    deltas = rng.uniform(-1.5, 1.5, size=1000)
    for k in (-2, -1, 1, 2):
        np.testing.assert_allclose(wrap_angle_delta(deltas + k * math.pi), wrap_angle_delta(deltas), atol=1e-12)


# --- corners / polygons ---
@pytest.mark.parametrize("box, expected", [
    (ObbBox(0, 0, 2, 4, 0), [(-1, -2), (-1, 2), (1, 2), (1, -2)]),
    (ObbBox(0, 0, 2, 4, HALF_PI), [(-2, 1), (2, 1), (2, -1), (-2, -1)]),
])
def test_obb_corners_examples(box, expected):
    assert _same_vertices(obb_corners(box), expected)


def test_obb_corners_diagonal_square():
    corners = obb_corners(ObbBox(3, 3, 2, 2, math.pi / 4))
    r = math.sqrt(2)
    assert _same_vertices(corners, [(3 + r, 3), (3 - r, 3), (3, 3 + r), (3, 3 - r)])


@pytest.mark.parametrize("polygon, expected", [
    (UNIT_SQUARE, 1.0),
    (np.zeros((0, 2)), 0.0),
    (np.array([(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)]), 2.0),
])
def test_polygon_area_examples(polygon, expected):
    assert polygon_area(polygon) == pytest.approx(expected)


def test_convex_clip_examples():
    assert polygon_area(convex_clip(UNIT_SQUARE, UNIT_SQUARE)) == pytest.approx(1.0, abs=1e-9)
    assert len(convex_clip(UNIT_SQUARE, UNIT_SQUARE + 10.0)) == 0
    shifted = UNIT_SQUARE + np.array([0.5, 0.0])
    assert polygon_area(convex_clip(UNIT_SQUARE, shifted)) == pytest.approx(0.5, abs=1e-12)


def test_convex_clip_ignores_clip_winding():
    shifted = UNIT_SQUARE + np.array([0.5, 0.0])
    assert polygon_area(convex_clip(UNIT_SQUARE, shifted[::-1])) == pytest.approx(0.5, abs=1e-12)


def test_convex_clip_bounded_by_operands_and_inclusion_exclusion():
    rng = np.random.default_rng(8)
    for _ in range(300):
        a, b = _random_box(rng, 10.0), _random_box(rng, 10.0)
        inter = polygon_area(convex_clip(obb_corners(a), obb_corners(b)))
        assert inter <= min(a.area, b.area) + 1e-9
        union = a.area + b.area - inter
        iou = rotated_iou(a, b)
        if inter > 0:
            assert iou * union == pytest.approx(inter, rel=1e-6)


# --- rotated IoU ---
def test_rotated_iou_examples():
    a = ObbBox(0, 0, 2, 4, 0)
    assert rotated_iou(a, a) == pytest.approx(1.0)
    assert rotated_iou(a, ObbBox(0, 0, 2, 4, math.pi)) == pytest.approx(1.0)
    assert rotated_iou(a, ObbBox(1, 0, 2, 4, 0)) == pytest.approx(1 / 3)
    assert rotated_iou(a, ObbBox(100, 100, 2, 4, 0)) == 0.0


def test_rotated_iou_swapped_sides_is_same_rectangle():
    # (h, w, -1°) と (w, h, 89°) は同じ点集合
    a = ObbBox(50, 50, 30, 10, math.radians(-1))
    b = ObbBox(50, 50, 10, 30, math.radians(89))
    assert rotated_iou(a, b) == pytest.approx(1.0, abs=1e-9)


def test_rotated_iou_symmetric_and_bounded():
    rng = np.random.default_rng(9)
    for _ in range(500):
        a, b = _random_box(rng, 15.0), _random_box(rng, 15.0)
        iou = rotated_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert iou == pytest.approx(rotated_iou(b, a), abs=1e-9)


def test_rotated_iou_invariant_under_rigid_rotation():
    rng = np.random.default_rng(10)
    for _ in range(200):
        a, b = _random_box(rng, 15.0), _random_box(rng, 15.0)
        angle = rng.uniform(-math.pi, math.pi)
        ra, rb = rotate_boxes([a, b], angle, origin=(rng.uniform(-5, 5), rng.uniform(-5, 5)))
        assert rotated_iou(ra, rb) == pytest.approx(rotated_iou(a, b), abs=1e-9)


def test_rotated_iou_agrees_with_rasterization():
    rng = np.random.default_rng(12)
    for _ in range(200):
        a = ObbBox(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0),
                   rng.uniform(-math.pi, math.pi))
        # 半分程度は重なるように近くへ置く
        b = ObbBox(a.cx + rng.uniform(-15, 15), a.cy + rng.uniform(-15, 15),
                   rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0), rng.uniform(-math.pi, math.pi))
        assert rotated_iou(a, b) == pytest.approx(_raster_iou(a, b), abs=1e-2)
