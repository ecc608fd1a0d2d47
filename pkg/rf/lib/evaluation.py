from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .codec import Detection
from .errors import EvaluationError
from .geometry import ObbBox, rotated_iou

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_CONF_THRESHOLD = 0.3
# 0, 0.01, ..., 1.00 の 101 点
RECALL_GRID = np.arange(101) / 100.0

GroundTruthSet = Dict[str, List[ObbBox]]
DetectionSet = Dict[str, List[Detection]]


@dataclass(frozen=True)
class MatchRecord:
    """検出 1 件の照合結果。未照合なら gt_index と iou は None。"""
    image_id: str
    detection_index: int
    score: float
    gt_index: Optional[int] = None
    iou: Optional[float] = None

    @property
    def matched(self) -> bool:
        return self.gt_index is not None


@dataclass
class ImageMatches:
    image_id: str
    num_gt: int
    records: List[MatchRecord] = field(default_factory=list)


@dataclass
class EvalReport:
    ap50: float
    precision: float
    recall: float
    f1: float
    num_gt: int
    num_predictions: int
    true_positives: int
    matches: List[MatchRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        summary = {k: v for k, v in asdict(self).items() if k != "matches"}
        summary["matches"] = [asdict(m) for m in self.matches]
        return summary


# --- 1. 照合 ---
def match_image(dets: Sequence[Detection], gts: Sequence[ObbBox],
                iou_threshold: float = DEFAULT_IOU_THRESHOLD, image_id: str = "") -> ImageMatches:
    """スコア降順の貪欲法で検出を正解に割り当てる。

    各検出は未割り当ての正解のうち IoU が最大 (同値なら添字が小さい方) のものと組になる。
    同スコアの検出は入力順。
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    records: Dict[int, MatchRecord] = {}
    for i in order:
        best_iou, best_gt = -1.0, None
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(dets[i].box, gt)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_gt = iou, j
        if best_gt is None:
            records[i] = MatchRecord(image_id, i, dets[i].score)
        else:
            taken[best_gt] = True
            records[i] = MatchRecord(image_id, i, dets[i].score, best_gt, best_iou)
    return ImageMatches(image_id, len(gts), [records[i] for i in order])


# --- 2. AP ---
def _ranked(matches: Sequence[ImageMatches]) -> List[MatchRecord]:
    records = [r for m in matches for r in m.records]
    # mergesort は安定なので同スコアは画像順・検出順のまま
    order = np.argsort(-np.array([r.score for r in records], dtype=float), kind="mergesort")
    return [records[i] for i in order]


def average_precision(matches: Sequence[ImageMatches]) -> float:
    """全画像の検出をスコア順に並べた 101 点補間 AP。

    各再現率 r_i での精度は r_i 以上の再現率で得られる最大精度。
    AP はこの包絡線を格子の 100 区間で積分した値。
    """
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        raise EvaluationError("average precision is undefined without ground truth")
    ranked = _ranked(matches)
    if not ranked:
        return 0.0
    tp = np.cumsum([r.matched for r in ranked], dtype=float)
    fp = np.cumsum([not r.matched for r in ranked], dtype=float)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # 右側からの累積最大で単調な包絡線にする
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    index = np.searchsorted(recall, RECALL_GRID, side="left")
    interpolated = np.where(index < len(envelope), envelope[np.minimum(index, len(envelope) - 1)], 0.0)
    return float(interpolated[1:].sum() / (len(RECALL_GRID) - 1))


# --- 3. レポート ---
def report(gt: Mapping[str, Sequence[ObbBox]], dets: Mapping[str, Sequence[Detection]],
           conf_threshold: float = DEFAULT_CONF_THRESHOLD,
           iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> EvalReport:
    """AP は全検出、P/R/F1 は conf_threshold 以上の検出だけで計算する。"""
    unknown = [image_id for image_id in dets if image_id not in gt]
    if unknown:
        raise EvaluationError("detections refer to images missing from the ground truth", unknown)

    matches = [match_image(dets.get(image_id, []), boxes, iou_threshold, image_id)
               for image_id, boxes in gt.items()]
    ap50 = average_precision(matches)

    # 貪欲法は高スコア側から決まるので、しきい値で切っても上位の照合は変わらない
    kept = [r for m in matches for r in m.records if r.score >= conf_threshold]
    num_gt = sum(m.num_gt for m in matches)
    true_positives = sum(r.matched for r in kept)
    precision = true_positives / len(kept) if kept else 0.0
    recall = true_positives / num_gt
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        ap50=ap50, precision=precision, recall=recall, f1=f1,
        num_gt=num_gt, num_predictions=len(kept), true_positives=true_positives,
        matches=[r for m in matches for r in m.records],
    )
