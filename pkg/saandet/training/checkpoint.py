"""Checkpoint archives

A checkpoint is a ``torch.save`` state dict ``<name>.pt`` next to a ``<name>.json`` metadata sidecar. Both are written
through a temporary file and renamed into place.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, ValidationError
from structlog.stdlib import get_logger

from saandet.exceptions import DataError, RuntimeFailure
from saandet.models.config import DetectorConfig, FusionMode
from saandet.models.dataset import ShotBudget
from saandet.saan import FewShotDetector
from saandet.utils.io import atomic_torch_save, atomic_write_text

logger = get_logger(__name__)

CheckpointPhase = Literal["base", "finetune", "joint"]


class CheckpointMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    phase: CheckpointPhase
    method: str
    classes: Tuple[str, ...]
    novel_classes: Tuple[str, ...] = ()
    feature_dim: int
    fusion: FusionMode
    detector: DetectorConfig
    config_hash: str
    seed: int
    steps: int
    split_id: str = ""
    budget: Optional[ShotBudget] = None


@dataclass
class Checkpoint:
    model: FewShotDetector
    meta: CheckpointMeta
    path: Optional[Path] = None

    def __post_init__(self) -> None:
        if len(self.meta.classes) != self.model.detector.num_classes:
            raise RuntimeFailure(
                f"checkpoint lists {len(self.meta.classes)} classes for a predict head of "
                f"{self.model.detector.num_classes + 1} outputs"
            )


def _paths(path: Path | str) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    return stem.with_name(stem.name + ".pt"), stem.with_name(stem.name + ".json")


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    weights_path, meta_path = _paths(path)
    atomic_torch_save(weights_path, checkpoint.model.state_dict())
    atomic_write_text(meta_path, checkpoint.meta.model_dump_json(indent=2) + "\n")
    checkpoint.path = weights_path
    logger.info("checkpoint saved", path=str(weights_path), phase=checkpoint.meta.phase, steps=checkpoint.meta.steps)
    return weights_path


def load_checkpoint(path: Path | str) -> Checkpoint:
    weights_path, meta_path = _paths(path)
    if not weights_path.is_file() or not meta_path.is_file():
        raise DataError(f"checkpoint {weights_path} or its sidecar {meta_path.name} is missing")
    try:
        meta = CheckpointMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise RuntimeFailure(f"unreadable checkpoint metadata {meta_path}: {e}") from e
    # weights come from the archive, not from a download
    detector_config = meta.detector.model_copy(update={"pretrained": False})
    model = FewShotDetector(detector_config, meta.classes, meta.fusion)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise RuntimeFailure(f"checkpoint {weights_path} does not match its metadata: {e}") from e
    model.eval()
    return Checkpoint(model=model, meta=meta, path=weights_path)
