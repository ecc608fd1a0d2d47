import math

import numpy as np
import pytest

from lib.codec import Detection
from lib.errors import EvaluationError
from lib.evaluation import ImageMatches, MatchRecord, average_precision, match_image, report
from lib.geometry import ObbBox

GT_A = ObbBox(20, 20, 10, 20, 0.1)
GT_B = ObbBox(60, 60, 12, 30, -0.6)


def test_identical_detections_all_matched():
    gts = [GT_A, GT_B]
    matches = match_image([Detection(b, 1.0) for b in gts], gts, image_id="a")
    assert all(r.matched for r in matches.records)
    assert sorted(r.gt_index for r in matches.records) == [0, 1]


def test_no_detections_counts_gt():
    matches = match_image([], [GT_A])
    assert matches.records == [] and matches.num_gt == 1


def test_detection_takes_highest_iou_gt():
    det = ObbBox(0, 0, 10, 10, 0)
    # IoU 0.8 と 0.6 になるように幅だけずらした 2 つの正解
    high = ObbBox(0, 0, 10, 8, 0)
    low = ObbBox(0, 0, 10, 6, 0)
    matches = match_image([Detection(det, 0.9)], [low, high])
    record = matches.records[0]
    assert record.gt_index == 1
    assert record.iou == pytest.approx(0.8)


def test_greedy_order_by_score():
    gt = [ObbBox(0, 0, 10, 10, 0)]
    dets = [Detection(ObbBox(0.5, 0, 10, 10, 0), 0.4), Detection(ObbBox(1, 0, 10, 10, 0), 0.9)]
    matches = match_image(dets, gt)
    assert [r.detection_index for r in matches.records] == [1, 0]
    assert matches.records[0].matched and not matches.records[1].matched


def test_ap_perfect_and_hand_fixture():
    perfect = [ImageMatches("a", 2, [MatchRecord("a", 0, 0.9, 0, 1.0), MatchRecord("a", 1, 0.8, 1, 1.0)])]
    assert average_precision(perfect) == 1.0
    fixture = [ImageMatches("a", 2, [MatchRecord("a", 0, 0.9, 0, 0.9), MatchRecord("a", 1, 0.8)])]
    assert average_precision(fixture) == pytest.approx(0.5, abs=1e-12)


def test_ap_without_matches_is_zero():
    misses = [ImageMatches("a", 1, [MatchRecord("a", 0, 0.9)])]
    assert average_precision(misses) == 0.0
    assert average_precision([ImageMatches("a", 1, [])]) == 0.0


def test_ap_requires_ground_truth():
    with pytest.raises(EvaluationError):
        average_precision([ImageMatches("a", 0, [MatchRecord("a", 0, 0.9)])])


def _scene(rng, n_images=10):
    gt = {}
    for i in range(n_images):
        gt[f"img_{i:04d}"] = [ObbBox(rng.uniform(0, 500), rng.uniform(0, 500), rng.uniform(5, 20),
                                     rng.uniform(20, 60), rng.uniform(-1.5, 1.5)) for _ in range(4)]
    return gt


def _noisy(rng, gt):
    dets = {}
    for image_id, boxes in gt.items():
        dets[image_id] = [Detection(ObbBox(b.cx + rng.normal(0, 4), b.cy + rng.normal(0, 4), b.w, b.h,
                                           b.theta + rng.normal(0, 0.3)), float(rng.uniform(0.3, 1.0)))
                          for b in boxes]
    return dets


def test_report_perfect():
    rng = np.random.default_rng(0)
    gt = _scene(rng)
    dets = {k: [Detection(b, 1.0) for b in v] for k, v in gt.items()}
    result = report(gt, dets)
    assert (result.ap50, result.precision, result.recall, result.f1) == (1.0, 1.0, 1.0, 1.0)


def test_report_dropped_detections_recall():
    rng = np.random.default_rng(1)
    gt = _scene(rng)
    dets, kept = {}, 0
    for image_id, boxes in gt.items():
        keep = [b for b in boxes if rng.random() >= 0.2]
        kept += len(keep)
        dets[image_id] = [Detection(b, 1.0) for b in keep]
    result = report(gt, dets)
    assert result.recall == pytest.approx(kept / 40, abs=1e-9)
    assert result.precision == 1.0


def test_report_threshold_above_scores():
    rng = np.random.default_rng(2)
    gt = _scene(rng)
    dets = {k: [Detection(b, 0.5) for b in v] for k, v in gt.items()}
    result = report(gt, dets, conf_threshold=0.9)
    assert result.num_predictions == 0
    assert result.precision == 0.0 and result.recall == 0.0 and result.f1 == 0.0
    assert result.ap50 == 1.0


def test_report_unknown_images():
    with pytest.raises(EvaluationError) as err:
        report({"a": [GT_A]}, {"a": [], "b": [], "c": []})
    assert err.value.image_ids == ["b", "c"]


def test_ap_invariant_to_monotone_score_transform():
    rng = np.random.default_rng(3)
    gt = _scene(rng)
    dets = _noisy(rng, gt)
    squashed = {k: [Detection(d.box, math.exp(3 * d.score) / 30) for d in v] for k, v in dets.items()}
    assert report(gt, squashed).ap50 == pytest.approx(report(gt, dets).ap50, abs=1e-12)


def test_low_scoring_false_positive_never_raises_ap():
    rng = np.random.default_rng(4)
    gt = _scene(rng)
    dets = _noisy(rng, gt)
    before = report(gt, dets).ap50
    dets["img_0000"].append(Detection(ObbBox(900, 900, 5, 10, 0), 0.01))
    assert report(gt, dets).ap50 <= before


def test_report_dict_has_ledger():
    result = report({"a": [GT_A]}, {"a": [Detection(GT_A, 0.7)]})
    data = result.to_dict()
    assert {"ap50", "precision", "recall", "f1", "matches"} <= set(data)
    assert data["matches"][0]["gt_index"] == 0


@pytest.mark.parametrize("seed", range(5))
def test_recall_non_increasing_in_conf_threshold(seed):
    rng = np.random.default_rng(10 + seed)
    gt = _scene(rng)
    dets = _noisy(rng, gt)
    recalls = [report(gt, dets, conf_threshold=c).recall for c in np.linspace(0.0, 1.0, 21)]
    assert all(later <= earlier for earlier, later in zip(recalls, recalls[1:]))
    assert recalls[0] > 0.0 and recalls[-1] == 0.0


@pytest.mark.parametrize("iou_threshold", [0.3, 0.5, 0.7])
def test_matching_is_one_to_one_above_threshold(iou_threshold):
    rng = np.random.default_rng(20)
    gt = _scene(rng, n_images=20)
    # 正解 1 つに 2 つの検出が重なるようにする
    first, second = _noisy(rng, gt), _noisy(rng, gt)
    matched = 0
    for image_id, boxes in gt.items():
        matches = match_image(first[image_id] + second[image_id], boxes, iou_threshold, image_id)
        taken = [r.gt_index for r in matches.records if r.matched]
        assert len(taken) == len(set(taken)) <= len(boxes)
        assert all(r.iou >= iou_threshold for r in matches.records if r.matched)
        assert all(r.iou is None for r in matches.records if not r.matched)
        matched += len(taken)
    assert matched > 0
