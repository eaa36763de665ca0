"""Box arithmetic shared by the proposal and detection stages

Boxes are ``(N, 4)`` float tensors ``x1, y1, x2, y2`` in input pixels with exclusive max edges.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torchvision.ops import box_iou

# keeps exp() of a predicted log-scale finite
BBOX_XFORM_CLIP = math.log(1000.0 / 16)


class BoxCoder:
    """Encodes ground-truth boxes as ``(dx, dy, dw, dh)`` offsets against reference boxes"""

    def __init__(self, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)):
        self.weights = tuple(float(w) for w in weights)

    def encode(self, reference: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        ref_w = reference[:, 2] - reference[:, 0]
        ref_h = reference[:, 3] - reference[:, 1]
        ref_cx = reference[:, 0] + 0.5 * ref_w
        ref_cy = reference[:, 1] + 0.5 * ref_h
        gt_w = gt[:, 2] - gt[:, 0]
        gt_h = gt[:, 3] - gt[:, 1]
        gt_cx = gt[:, 0] + 0.5 * gt_w
        gt_cy = gt[:, 1] + 0.5 * gt_h
        return torch.stack(
            (
                wx * (gt_cx - ref_cx) / ref_w,
                wy * (gt_cy - ref_cy) / ref_h,
                ww * torch.log(gt_w / ref_w),
                wh * torch.log(gt_h / ref_h),
            ),
            dim=1,
        )

    def decode(self, reference: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        reference = reference.to(deltas.dtype)
        ref_w = reference[:, 2] - reference[:, 0]
        ref_h = reference[:, 3] - reference[:, 1]
        ref_cx = reference[:, 0] + 0.5 * ref_w
        ref_cy = reference[:, 1] + 0.5 * ref_h
        dx = deltas[:, 0] / wx
        dy = deltas[:, 1] / wy
        dw = torch.clamp(deltas[:, 2] / ww, max=BBOX_XFORM_CLIP)
        dh = torch.clamp(deltas[:, 3] / wh, max=BBOX_XFORM_CLIP)
        cx = dx * ref_w + ref_cx
        cy = dy * ref_h + ref_cy
        w = torch.exp(dw) * ref_w
        h = torch.exp(dh) * ref_h
        return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)


def clip_boxes(boxes: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    height, width = image_size
    x = boxes[:, 0::2].clamp(min=0, max=width)
    y = boxes[:, 1::2].clamp(min=0, max=height)
    return torch.stack((x[:, 0], y[:, 0], x[:, 1], y[:, 1]), dim=1)


def remove_small_boxes(boxes: torch.Tensor, min_size: float) -> torch.Tensor:
    """Indices of boxes whose sides are both at least ``min_size``"""
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    return torch.nonzero((widths >= min_size) & (heights >= min_size)).flatten()


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy non-maximum suppression

    Boxes are visited by descending score; equal scores keep their input order, so of two identical boxes with the
    same score the one with the lower index survives. A box is suppressed when its IoU with an already kept box
    exceeds ``iou_threshold``.

    :return: indices of the kept boxes, highest score first
    """
    if boxes.numel() == 0:
        return torch.empty((0,), dtype=torch.int64, device=boxes.device)
    order = torch.sort(scores, descending=True, stable=True).indices
    ordered = boxes[order]
    suppressed = torch.zeros(len(order), dtype=torch.bool, device=boxes.device)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        overlaps = box_iou(ordered[i : i + 1], ordered[i + 1 :])[0]
        suppressed[i + 1 :] |= overlaps > iou_threshold
    return torch.stack(keep)


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, labels: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Per-label :func:`nms`; the merged result is ordered by descending score with stable ties"""
    if boxes.numel() == 0:
        return torch.empty((0,), dtype=torch.int64, device=boxes.device)
    kept = []
    for label in torch.unique(labels, sorted=True):
        idx = torch.nonzero(labels == label).flatten()
        kept.append(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    merged = torch.cat(kept)
    merged = merged[torch.sort(merged).indices]
    return merged[torch.sort(scores[merged], descending=True, stable=True).indices]
