from .config import DataConfig, DetectorConfig, EvalConfig, RunConfig, SupportConfig, TrainConfig
from .dataset import (
    Annotation,
    ClassSplit,
    DatasetIndex,
    Episode,
    FinetuneSet,
    ImageRecord,
    ShotBudget,
    SplitSpec,
    SupportRef,
)
from .geometry import BBox, CropWindow, ImageDims

__all__ = [
    "Annotation",
    "BBox",
    "ClassSplit",
    "CropWindow",
    "DataConfig",
    "DatasetIndex",
    "DetectorConfig",
    "Episode",
    "EvalConfig",
    "FinetuneSet",
    "ImageDims",
    "ImageRecord",
    "RunConfig",
    "ShotBudget",
    "SplitSpec",
    "SupportConfig",
    "SupportRef",
    "TrainConfig",
]
