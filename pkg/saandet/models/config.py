from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from saandet.models.dataset import ShotBudget

FusionMode = Literal["gru", "xcorr", "none"]
DetectorSize = Literal["tiny", "full"]
AnnotationFormat = Literal["voc", "nwpu", "canonical"]

DETECTOR_PRESETS: dict[str, dict[str, Any]] = {
    "tiny": {
        "stride": 8,
        "channels": (32, 64, 128),
        "anchor_sizes": (16, 32, 64),
        "representation_sizes": (256,),
        "pre_nms_top_n": 600,
        "max_proposals": 100,
        "rpn_batch_size": 128,
        "roi_batch_size": 64,
        "pretrained": False,
    },
    "full": {
        "stride": 16,
        "channels": (1024,),
        "anchor_sizes": (32, 64, 128, 256, 512),
        "representation_sizes": (1024, 1024),
        "pre_nms_top_n": 6000,
        "max_proposals": 300,
        "rpn_batch_size": 256,
        "roi_batch_size": 128,
        "pretrained": True,
    },
}


class DataConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    root: Optional[Path] = None
    format: AnnotationFormat = "canonical"
    novel: Tuple[str, ...] = ()
    exclude_classes: Tuple[str, ...] = ()
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    allow_masking: bool = True
    pixel_mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: Tuple[float, float, float] = (0.229, 0.224, 0.225)
    workers: int = Field(default=0, ge=0)
    prefetch: int = Field(default=2, ge=1)


class SupportConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    size: int = Field(default=224, gt=0)
    interpolation: Literal["bilinear", "nearest"] = "bilinear"


class DetectorConfig(BaseModel):
    """Detector hyperparameters; keys left unset are filled from the preset of ``size``"""

    model_config = ConfigDict(frozen=True)

    size: DetectorSize = "tiny"
    pretrained: bool = False
    stride: int = 8
    channels: Tuple[int, ...] = (32, 64, 128)
    anchor_sizes: Tuple[int, ...] = (16, 32, 64)
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_nms_threshold: float = Field(default=0.7, gt=0, le=1)
    pre_nms_top_n: int = 600
    max_proposals: int = Field(default=100, ge=1)
    rpn_batch_size: int = 128
    rpn_positive_fraction: float = 0.5
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    min_proposal_size: float = 1.0
    roi_output_size: int = Field(default=7, ge=1)
    sampling_ratio: int = 2
    representation_sizes: Tuple[int, ...] = (256,)
    roi_batch_size: int = 64
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    score_threshold: float = 0.05
    detection_nms_threshold: float = 0.5
    detections_per_image: int = 100
    new_class_init_std: float = 0.01

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        preset = DETECTOR_PRESETS.get(data.get("size", "tiny"), DETECTOR_PRESETS["tiny"])
        return {**preset, **data}

    @property
    def feature_dim(self) -> int:
        return self.representation_sizes[-1]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    phase: Literal["base", "finetune", "joint"] = "base"
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=1, ge=1)
    lr: Optional[float] = None
    finetune_lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Tuple[float, ...] = (0.75,)
    gamma: float = 0.1
    warmup_steps: int = Field(default=20, ge=0)
    grad_clip: Optional[float] = 10.0
    flip: bool = False
    log_every: int = Field(default=20, ge=1)


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iou_threshold: float = Field(default=0.5, gt=0, le=1)
    ap_variant: Literal["all_point", "11_point"] = "all_point"
    keep_detections: int = Field(default=8, ge=0)
    shots: Tuple[int, ...] = (1, 2, 3, 5, 10)
    rhos: Tuple[Optional[int], ...] = (0, 1, 2, 3, 5, None)
    methods: Tuple[str, ...] = ("saan", "frcn-ft", "frcn-joint")

    @field_validator("rhos", mode="before")
    @classmethod
    def _parse_rhos(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)):
            return tuple(ShotBudget(rho=item).rho for item in value)
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    data: DataConfig = DataConfig()
    budget: ShotBudget = ShotBudget()
    detector: DetectorConfig = DetectorConfig()
    support: SupportConfig = SupportConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    fusion: FusionMode = "gru"
    seed: int = 0
    output_dir: Path = Path("runs")
    loglevel: str = "INFO"

    @property
    def base_lr(self) -> float:
        if self.train.lr is not None:
            return self.train.lr
        return 1e-2
