from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from structlog.stdlib import get_logger
from torch import nn

from saandet.detector.backbone import BackboneFeatures, backbone_forward, build_backbone
from saandet.detector.boxes import BoxCoder, batched_nms, clip_boxes, remove_small_boxes
from saandet.detector.roi import PredictHead, RoIHead, expand_predict_head, roi_align, sample_proposals
from saandet.detector.rpn import RegionProposalNetwork
from saandet.detector.structures import Detection, Proposals, StageOutputs
from saandet.exceptions import ShapeError
from saandet.models.config import DetectorConfig

logger = get_logger(__name__)

# maps (N, d) RoI features to the (N, d) features the predict head consumes
FeatureHook = Callable[[torch.Tensor], torch.Tensor]

ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class TrainingOutputs:
    rpn: StageOutputs
    roi: StageOutputs
    proposals: Proposals


class TwoStageDetector(nn.Module):
    """Backbone, proposal stage, RoI head and predict head of a Faster R-CNN style detector

    ``fuse`` hooks in between the RoI head and the predict head; without it the detector is a plain two-stage
    detector. Class ids are 1-based positions in the detector's own class list, 0 is background.
    """

    def __init__(self, config: DetectorConfig, num_classes: int):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        self.rpn = RegionProposalNetwork(self.backbone.out_channels, config)
        self.roi_head = RoIHead(self.backbone.out_channels, config.roi_output_size, config.representation_sizes)
        self.predict_head = PredictHead(self.roi_head.out_features, num_classes)
        self.box_coder = BoxCoder(ROI_BOX_WEIGHTS)

    @property
    def num_classes(self) -> int:
        return self.predict_head.num_classes

    @property
    def feature_dim(self) -> int:
        return self.roi_head.out_features

    def expand_classes(self, num_classes: int, generator: torch.Generator | None = None) -> None:
        old = self.num_classes
        self.predict_head = expand_predict_head(
            self.predict_head, num_classes, std=self.config.new_class_init_std, generator=generator
        )
        logger.info("predict head expanded", old_classes=old, new_classes=num_classes)

    def features(self, image: torch.Tensor) -> BackboneFeatures:
        return backbone_forward(self.backbone, image)

    def roi_features(self, features: BackboneFeatures, boxes: torch.Tensor) -> torch.Tensor:
        pooled = roi_align(
            features.features,
            boxes,
            self.config.roi_output_size,
            1.0 / features.stride,
            self.config.sampling_ratio,
        )
        return self.roi_head(pooled)

    def forward_train(
        self,
        image: torch.Tensor,
        gt_boxes: torch.Tensor,
        gt_labels: torch.Tensor,
        ignore_boxes: torch.Tensor | None = None,
        fuse: Optional[FeatureHook] = None,
        generator: torch.Generator | None = None,
    ) -> TrainingOutputs:
        """Predictions on sampled anchors and RoIs of one image, paired with their targets"""
        if gt_labels.numel() and int(gt_labels.max()) > self.num_classes:
            raise ShapeError(f"label {int(gt_labels.max())} exceeds the {self.num_classes} detector classes")
        ignore = ignore_boxes if ignore_boxes is not None else torch.zeros((0, 4))
        features = self.features(image)
        proposals, rpn_outputs = self.rpn(features, gt_boxes, ignore, generator)
        assert rpn_outputs is not None
        boxes, labels, matched = sample_proposals(
            proposals.boxes,
            gt_boxes,
            gt_labels,
            ignore,
            self.config.roi_batch_size,
            self.config.roi_positive_fraction,
            self.config.roi_fg_iou,
            generator,
        )
        z = self.roi_features(features, boxes)
        if fuse is not None:
            z = fuse(z)
        logits, deltas = self.predict_head(z)
        positive = torch.nonzero(labels > 0).flatten()
        pos_labels = labels[positive]
        # the 4 deltas predicted for each positive's own class
        columns = (pos_labels - 1)[:, None] * 4 + torch.arange(4)
        pos_deltas = deltas[positive[:, None], columns] if positive.numel() else deltas.new_zeros((0, 4))
        targets = (
            self.box_coder.encode(boxes[positive], gt_boxes[matched[positive]])
            if positive.numel()
            else deltas.new_zeros((0, 4))
        )
        roi_outputs = StageOutputs(logits=logits, labels=labels, deltas=pos_deltas, regression_targets=targets)
        return TrainingOutputs(rpn=rpn_outputs, roi=roi_outputs, proposals=proposals)

    @torch.no_grad()
    def detect(self, image: torch.Tensor, fuse: Optional[FeatureHook] = None) -> list[Detection]:
        """Scored, class-wise suppressed detections for one image"""
        features = self.features(image)
        proposals, _ = self.rpn(features)
        if len(proposals) == 0:
            return []
        z = self.roi_features(features, proposals.boxes)
        if fuse is not None:
            z = fuse(z)
        logits, deltas = self.predict_head(z)
        scores = torch.softmax(logits, dim=-1)[:, 1:]
        n, k = scores.shape
        boxes = self.box_coder.decode(proposals.boxes.repeat_interleave(k, dim=0), deltas.reshape(n * k, 4))
        boxes = clip_boxes(boxes, features.image_size)
        labels = torch.arange(1, k + 1).repeat(n)
        scores = scores.reshape(-1)

        keep = torch.nonzero(scores > self.config.score_threshold).flatten()
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
        keep = remove_small_boxes(boxes, 1e-2)
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
        keep = batched_nms(boxes, scores, labels, self.config.detection_nms_threshold)
        keep = keep[: self.config.detections_per_image]
        return [
            Detection(class_id=int(labels[i]), score=float(scores[i]), box=tuple(boxes[i].tolist()))  # type: ignore
            for i in keep
        ]
