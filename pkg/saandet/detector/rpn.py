from __future__ import annotations

from typing import Sequence

import torch
from torch import nn
from torchvision.ops import box_iou

from saandet.detector.backbone import BackboneFeatures
from saandet.detector.boxes import BoxCoder, clip_boxes, nms, remove_small_boxes
from saandet.detector.structures import Proposals, StageOutputs
from saandet.exceptions import ShapeError
from saandet.models.config import DetectorConfig


class AnchorGenerator:
    """Anchors of every ``size x ratio`` pair centred on each feature cell, ordered ``(y, x, anchor)``"""

    def __init__(self, sizes: Sequence[int], aspect_ratios: Sequence[float]):
        self.sizes = tuple(sizes)
        self.aspect_ratios = tuple(aspect_ratios)

    @property
    def num_anchors(self) -> int:
        return len(self.sizes) * len(self.aspect_ratios)

    def base_anchors(self) -> torch.Tensor:
        rows = []
        for size in self.sizes:
            for ratio in self.aspect_ratios:
                # ratio is height / width, area stays size ** 2
                w = size / ratio**0.5
                h = size * ratio**0.5
                rows.append((-w / 2, -h / 2, w / 2, h / 2))
        return torch.tensor(rows, dtype=torch.float32)

    def __call__(self, feature_size: tuple[int, int], stride: int) -> torch.Tensor:
        h, w = feature_size
        shift_y = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
        shift_x = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
        yy, xx = torch.meshgrid(shift_y, shift_x, indexing="ij")
        shifts = torch.stack((xx, yy, xx, yy), dim=-1).reshape(-1, 1, 4)
        return (shifts + self.base_anchors().view(1, -1, 4)).reshape(-1, 4)


class RPNHead(nn.Module):
    def __init__(self, in_channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(in_channels, num_anchors, kernel_size=1)
        self.bbox_deltas = nn.Conv2d(in_channels, num_anchors * 4, kernel_size=1)
        for layer in (self.conv, self.objectness, self.bbox_deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened ``(h * w * A,)`` objectness logits and ``(h * w * A, 4)`` deltas of the first image"""
        hidden = torch.relu(self.conv(features))
        logits = self.objectness(hidden)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.bbox_deltas(hidden)[0]
        num_anchors = logits.shape[0] // (deltas.shape[1] * deltas.shape[2])
        deltas = deltas.view(num_anchors, 4, deltas.shape[1], deltas.shape[2]).permute(2, 3, 0, 1).reshape(-1, 4)
        return logits, deltas


def filter_proposals(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    image_size: tuple[int, int],
    pre_nms_top_n: int,
    post_nms_top_n: int,
    nms_threshold: float,
    min_size: float = 1.0,
) -> Proposals:
    """Clip, drop tiny boxes, keep the ``pre_nms_top_n`` best, suppress overlaps and cap at ``post_nms_top_n``"""
    boxes = clip_boxes(boxes, image_size)
    keep = remove_small_boxes(boxes, min_size)
    boxes, scores = boxes[keep], scores[keep]
    order = torch.sort(scores, descending=True, stable=True).indices[:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    keep = nms(boxes, scores, nms_threshold)[:post_nms_top_n]
    return Proposals(boxes=boxes[keep], scores=scores[keep])


def balanced_sample(
    labels: torch.Tensor, batch_size: int, positive_fraction: float, generator: torch.Generator | None
) -> torch.Tensor:
    """Keep at most ``batch_size`` labelled samples, positives capped at ``positive_fraction``; the rest become -1"""
    positive = torch.nonzero(labels >= 1).flatten()
    negative = torch.nonzero(labels == 0).flatten()
    num_pos = min(int(batch_size * positive_fraction), positive.numel())
    num_neg = min(batch_size - num_pos, negative.numel())
    pos_keep = positive[torch.randperm(positive.numel(), generator=generator)[:num_pos]]
    neg_keep = negative[torch.randperm(negative.numel(), generator=generator)[:num_neg]]
    sampled = torch.full_like(labels, -1)
    sampled[pos_keep] = labels[pos_keep]
    sampled[neg_keep] = 0
    return sampled


def assign_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    ignore_boxes: torch.Tensor,
    image_size: tuple[int, int],
    fg_iou: float,
    bg_iou: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness labels (1, 0 or -1) and the index of the matched ground-truth box for every anchor

    Anchors crossing the image border are ignored, as are anchors that would be background but overlap an ignore
    region by at least ``bg_iou``.
    """
    height, width = image_size
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.int64)
    matched = torch.zeros(anchors.shape[0], dtype=torch.int64)
    inside = (anchors[:, 0] >= 0) & (anchors[:, 1] >= 0) & (anchors[:, 2] <= width) & (anchors[:, 3] <= height)
    if gt_boxes.numel() == 0:
        labels[inside] = 0
    else:
        iou = box_iou(anchors, gt_boxes)
        best_iou, matched = iou.max(dim=1)
        labels[inside & (best_iou < bg_iou)] = 0
        labels[inside & (best_iou >= fg_iou)] = 1
        # every ground-truth box keeps its best anchors even below the foreground threshold
        per_gt_best = iou.masked_fill(~inside[:, None], -1.0).max(dim=0).values
        for g in range(gt_boxes.shape[0]):
            if per_gt_best[g] > 0:
                best = inside & (iou[:, g] == per_gt_best[g])
                labels[best] = 1
                matched[best] = g
    if ignore_boxes.numel() > 0:
        near_ignore = box_iou(anchors, ignore_boxes).max(dim=1).values >= bg_iou
        labels[(labels == 0) & near_ignore] = -1
    return labels, matched


class RegionProposalNetwork(nn.Module):
    def __init__(self, in_channels: int, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.anchor_generator = AnchorGenerator(config.anchor_sizes, config.aspect_ratios)
        self.head = RPNHead(in_channels, self.anchor_generator.num_anchors)
        self.box_coder = BoxCoder((1.0, 1.0, 1.0, 1.0))

    def forward(
        self,
        features: BackboneFeatures,
        gt_boxes: torch.Tensor | None = None,
        ignore_boxes: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[Proposals, StageOutputs | None]:
        if features.features.shape[0] != 1:
            raise ShapeError("the proposal stage handles one image at a time")
        logits, deltas = self.head(features.features)
        anchors = self.anchor_generator(tuple(features.features.shape[-2:]), features.stride)
        if anchors.shape[0] != logits.shape[0]:
            raise ShapeError(f"{anchors.shape[0]} anchors for {logits.shape[0]} objectness scores")
        with torch.no_grad():
            proposals = filter_proposals(
                self.box_coder.decode(anchors, deltas.detach()),
                torch.sigmoid(logits.detach()),
                features.image_size,
                self.config.pre_nms_top_n,
                self.config.max_proposals,
                self.config.rpn_nms_threshold,
                self.config.min_proposal_size,
            )
        if gt_boxes is None:
            return proposals, None

        empty = torch.zeros((0, 4))
        labels, matched = assign_anchors(
            anchors,
            gt_boxes,
            ignore_boxes if ignore_boxes is not None else empty,
            features.image_size,
            self.config.rpn_fg_iou,
            self.config.rpn_bg_iou,
        )
        labels = balanced_sample(labels, self.config.rpn_batch_size, self.config.rpn_positive_fraction, generator)
        positive = torch.nonzero(labels == 1).flatten()
        targets = (
            self.box_coder.encode(anchors[positive], gt_boxes[matched[positive]]) if positive.numel() else empty
        )
        outputs = StageOutputs(
            logits=logits, labels=labels, deltas=deltas[positive], regression_targets=targets.to(deltas.dtype)
        )
        return proposals, outputs
