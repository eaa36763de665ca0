from __future__ import annotations

from typing import Sequence

import torch
from torch import nn
from torchvision.ops import box_iou
from torchvision.ops import roi_align as tv_roi_align

from saandet.detector.rpn import balanced_sample
from saandet.exceptions import GeometryError, ShapeError


def roi_align(
    features: torch.Tensor,
    boxes: torch.Tensor,
    output_size: int,
    spatial_scale: float,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinearly pool every box of one image into a ``C x P x P`` grid

    ``features`` is the ``1 x C x h x w`` map of a single image and ``boxes`` are in input pixels. Sampling uses
    the half-pixel-aligned grid, so a feature cell's value sits at its centre.

    :return: ``(N, C, P, P)`` pooled tensor
    """
    if features.dim() != 4 or features.shape[0] != 1:
        raise ShapeError(f"expected a 1 x C x h x w feature map, got {tuple(features.shape)}")
    if boxes.dim() != 2 or boxes.shape[-1] != 4:
        raise ShapeError(f"expected (N, 4) boxes, got {tuple(boxes.shape)}")
    degenerate = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if bool(degenerate.any()):
        raise GeometryError(f"zero-area proposal {boxes[degenerate][0].tolist()}")
    return tv_roi_align(
        features,
        [boxes.to(features.dtype)],
        output_size=(output_size, output_size),
        spatial_scale=spatial_scale,
        sampling_ratio=sampling_ratio,
        aligned=True,
    )


class RoIHead(nn.Module):
    """Fully connected layers turning a pooled ``C x P x P`` region into a ``d``-dimensional feature"""

    def __init__(self, in_channels: int, pooled_size: int, representation_sizes: Sequence[int]):
        super().__init__()
        self.in_channels = in_channels
        self.pooled_size = pooled_size
        layers: list[nn.Module] = []
        prev = in_channels * pooled_size * pooled_size
        for size in representation_sizes:
            layers += [nn.Linear(prev, size), nn.ReLU(inplace=True)]
            prev = size
        self.layers = nn.Sequential(*layers)
        for module in self.layers:
            if isinstance(module, nn.Linear):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)
        self.out_features = prev

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        expected = (self.in_channels, self.pooled_size, self.pooled_size)
        if pooled.dim() != 4 or tuple(pooled.shape[1:]) != expected:
            raise ShapeError(f"expected pooled regions of shape (N, {expected}), got {tuple(pooled.shape)}")
        return self.layers(pooled.flatten(start_dim=1))


class PredictHead(nn.Module):
    """Class logits over ``K`` object classes plus background, and ``4K`` class-specific box deltas"""

    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ShapeError("the predict head needs at least one object class")
        self.in_features = in_features
        self.num_classes = num_classes
        self.cls_score = nn.Linear(in_features, num_classes + 1)
        self.bbox_pred = nn.Linear(in_features, num_classes * 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if features.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features}-dimensional features, got {features.shape[-1]}")
        return self.cls_score(features), self.bbox_pred(features)


def predict_head(head: PredictHead, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax class scores ``(N, K + 1)`` and box deltas ``(N, 4K)``"""
    logits, deltas = head(features)
    return torch.softmax(logits, dim=-1), deltas


def expand_predict_head(
    head: PredictHead, num_classes: int, std: float = 0.01, generator: torch.Generator | None = None
) -> PredictHead:
    """Copy of ``head`` widened to ``num_classes`` object classes

    Background and existing class rows are copied bit for bit; new class rows get zero bias and normal weights with
    standard deviation ``std`` (``std / 10`` for the box rows).
    """
    if num_classes <= head.num_classes:
        raise ShapeError(f"cannot shrink or keep the predict head: {head.num_classes} -> {num_classes}")
    old = head.num_classes
    expanded = PredictHead(head.in_features, num_classes)
    device = head.cls_score.weight.device
    expanded.to(device)
    with torch.no_grad():
        d = head.in_features
        new_cls = torch.randn((num_classes - old, d), generator=generator) * std
        new_box = torch.randn(((num_classes - old) * 4, d), generator=generator) * (std / 10)
        expanded.cls_score.weight.copy_(torch.cat([head.cls_score.weight, new_cls.to(device)]))
        expanded.cls_score.bias.copy_(
            torch.cat([head.cls_score.bias, head.cls_score.bias.new_zeros(num_classes - old)])
        )
        expanded.bbox_pred.weight.copy_(torch.cat([head.bbox_pred.weight, new_box.to(device)]))
        expanded.bbox_pred.bias.copy_(
            torch.cat([head.bbox_pred.bias, head.bbox_pred.bias.new_zeros((num_classes - old) * 4)])
        )
    return expanded


def sample_proposals(
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    ignore_boxes: torch.Tensor,
    batch_size: int,
    positive_fraction: float,
    fg_iou: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pick the RoIs the second stage trains on

    Ground-truth boxes join the candidate set. A candidate is foreground when its best IoU reaches ``fg_iou``; a
    background candidate overlapping an ignore region by ``fg_iou`` is dropped.

    :return: sampled boxes, their class labels (0 for background) and the matched ground-truth index
    """
    candidates = torch.cat([proposals, gt_boxes]) if gt_boxes.numel() else proposals
    if candidates.numel() == 0:
        empty = torch.zeros((0,), dtype=torch.int64)
        return torch.zeros((0, 4)), empty, empty
    labels = torch.zeros(candidates.shape[0], dtype=torch.int64)
    matched = torch.zeros(candidates.shape[0], dtype=torch.int64)
    if gt_boxes.numel():
        best_iou, matched = box_iou(candidates, gt_boxes).max(dim=1)
        foreground = best_iou >= fg_iou
        labels[foreground] = gt_labels[matched[foreground]]
    if ignore_boxes.numel():
        near_ignore = box_iou(candidates, ignore_boxes).max(dim=1).values >= fg_iou
        labels[(labels == 0) & near_ignore] = -1
    sampled = balanced_sample(labels, batch_size, positive_fraction, generator)
    keep = torch.nonzero(sampled >= 0).flatten()
    return candidates[keep], sampled[keep], matched[keep]
