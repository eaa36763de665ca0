"""Box overlap and VOC-style average precision

Detections are matched greedily in descending score order, ties keeping their input order. A detection whose best
overlap is a masked annotation is dropped from the curve instead of being counted as a false positive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from saandet.models.dataset import Annotation
from saandet.models.geometry import BBox

APVariant = Literal["all_point", "11_point"]
Outcome = Literal["tp", "fp", "ignored"]

BoxLike = BBox | Tuple[float, float, float, float]


def _coords(box: BoxLike) -> Tuple[float, float, float, float]:
    return box.as_tuple() if isinstance(box, BBox) else tuple(box)  # type: ignore[return-value]


def compute_iou(a: BoxLike, b: BoxLike) -> float:
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


@dataclass(frozen=True)
class ScoredBox:
    """One detection of a single class"""

    image_id: str
    score: float
    box: Tuple[float, float, float, float]


@dataclass(frozen=True)
class Match:
    detection: int
    ground_truth: Optional[str]
    outcome: Outcome

    @property
    def is_tp(self) -> bool:
        return self.outcome == "tp"


@dataclass(frozen=True)
class APResult:
    ap: Optional[float]
    num_ground_truth: int
    recall: Tuple[float, ...]
    precision: Tuple[float, ...]
    matches: Tuple[Match, ...]


def match_detections(
    detections: Sequence[ScoredBox], ground_truth: Sequence[Annotation], iou_threshold: float = 0.5
) -> list[Match]:
    """Greedy matching; returns one :class:`Match` per detection in processing order"""
    by_image: dict[str, list[Annotation]] = {}
    for ann in ground_truth:
        by_image.setdefault(ann.image_id, []).append(ann)
    taken: set[str] = set()
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    matches: list[Match] = []
    for i in order:
        det = detections[i]
        best_iou, best = 0.0, None
        for ann in by_image.get(det.image_id, ()):
            iou = compute_iou(det.box, ann.bbox)
            if iou > best_iou:
                best_iou, best = iou, ann
        if best is None or best_iou < iou_threshold:
            matches.append(Match(i, None, "fp"))
        elif best.masked:
            matches.append(Match(i, best.annotation_id, "ignored"))
        elif best.annotation_id in taken:
            matches.append(Match(i, None, "fp"))
        else:
            taken.add(best.annotation_id)
            matches.append(Match(i, best.annotation_id, "tp"))
    return matches


def precision_recall(matches: Sequence[Match], num_ground_truth: int) -> tuple[np.ndarray, np.ndarray]:
    counted = [m for m in matches if m.outcome != "ignored"]
    tp = np.cumsum([m.is_tp for m in counted], dtype=np.float64)
    fp = np.cumsum([not m.is_tp for m in counted], dtype=np.float64)
    recall = tp / num_ground_truth
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def interpolated_precision(precision: np.ndarray) -> np.ndarray:
    """Precision envelope: at every point the best precision reached at that recall or beyond"""
    return np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision


def average_precision(recall: np.ndarray, precision: np.ndarray, variant: APVariant = "all_point") -> float:
    if variant == "11_point":
        ap = 0.0
        for t in np.arange(11) / 10:
            above = precision[recall >= t]
            ap += float(above.max()) if above.size else 0.0
        return ap / 11
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = interpolated_precision(np.concatenate(([0.0], precision, [0.0])))
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def compute_ap(
    detections: Sequence[ScoredBox],
    ground_truth: Sequence[Annotation],
    iou_threshold: float = 0.5,
    variant: APVariant = "all_point",
) -> APResult:
    """AP of one class; ``ap`` is ``None`` when the class has no unmasked ground truth"""
    num_gt = sum(1 for ann in ground_truth if not ann.masked)
    matches = match_detections(detections, ground_truth, iou_threshold)
    if num_gt == 0:
        return APResult(ap=None, num_ground_truth=0, recall=(), precision=(), matches=tuple(matches))
    recall, precision = precision_recall(matches, num_gt)
    ap = min(1.0, max(0.0, average_precision(recall, precision, variant)))
    return APResult(
        ap=ap,
        num_ground_truth=num_gt,
        recall=tuple(float(r) for r in recall),
        precision=tuple(float(p) for p in interpolated_precision(precision)),
        matches=tuple(matches),
    )
