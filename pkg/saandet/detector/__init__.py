from saandet.detector.backbone import BackboneFeatures, ResNetBackbone, TinyBackbone, backbone_forward, build_backbone
from saandet.detector.boxes import BoxCoder, batched_nms, nms
from saandet.detector.core import TrainingOutputs, TwoStageDetector
from saandet.detector.roi import PredictHead, RoIHead, expand_predict_head, predict_head, roi_align
from saandet.detector.rpn import AnchorGenerator, RegionProposalNetwork, filter_proposals
from saandet.detector.structures import Detection, Proposals, StageOutputs

__all__ = [
    "AnchorGenerator",
    "BackboneFeatures",
    "BoxCoder",
    "Detection",
    "PredictHead",
    "Proposals",
    "RegionProposalNetwork",
    "ResNetBackbone",
    "RoIHead",
    "StageOutputs",
    "TinyBackbone",
    "TrainingOutputs",
    "TwoStageDetector",
    "backbone_forward",
    "batched_nms",
    "build_backbone",
    "expand_predict_head",
    "filter_proposals",
    "nms",
    "predict_head",
    "roi_align",
]
