from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, computed_field
from structlog.stdlib import get_logger

from saandet.data.episodes import finetune_pool, phase_one_pool
from saandet.data.loader import ImageStore, Normalizer, SupportCropper
from saandet.evaluation.metrics import APVariant, ScoredBox, compute_ap
from saandet.exceptions import DataError
from saandet.models.config import RunConfig
from saandet.models.dataset import Annotation, FinetuneSet
from saandet.saan import SupportFeatureBank
from saandet.training.checkpoint import Checkpoint
from saandet.training.phases import TrainingData
from saandet.utils.io import atomic_write_text

logger = get_logger(__name__)


class DetectionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_name: str
    score: float
    box: Tuple[float, float, float, float]


class ClassReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_name: str
    is_novel: bool
    num_ground_truth: int
    ap: Optional[float] = Field(default=None, ge=0, le=1)
    ap_11pt: Optional[float] = Field(default=None, ge=0, le=1)
    recall: Tuple[float, ...] = ()
    precision: Tuple[float, ...] = ()


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


class EvalReport(BaseModel):
    """Per-class AP of one checkpoint on the test images of its split"""

    model_config = ConfigDict(frozen=True)

    method: str
    phase: str
    split_id: str
    novel_classes: Tuple[str, ...]
    k: Optional[int] = None
    rho: Optional[str] = None
    seed: int
    config_hash: str
    iou_threshold: float
    ap_variant: APVariant
    test_images: int
    classes: Tuple[ClassReport, ...]
    detections: dict[str, Tuple[DetectionRecord, ...]] = {}

    @computed_field  # type: ignore[misc]
    @property
    def novel_map(self) -> Optional[float]:
        return _mean(c.ap for c in self.classes if c.is_novel)

    @computed_field  # type: ignore[misc]
    @property
    def base_map(self) -> Optional[float]:
        return _mean(c.ap for c in self.classes if not c.is_novel)

    def class_report(self, class_name: str) -> ClassReport:
        for report in self.classes:
            if report.class_name == class_name:
                return report
        raise KeyError(class_name)


def write_reports(path: Path | str, reports: Sequence[EvalReport]) -> Path:
    return atomic_write_text(path, "".join(report.model_dump_json() + "\n" for report in reports))


def read_reports(path: Path | str) -> list[EvalReport]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report file {path} does not exist")
    reports = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            reports.append(EvalReport.model_validate_json(line))
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: unreadable report: {e}") from e
    return reports


def evaluation_supports(
    checkpoint: Checkpoint, data: TrainingData, finetune_set: Optional[FinetuneSet], k: int
) -> dict[str, Tuple[str, ...]]:
    """The first ``k`` support annotations of every detector class

    After fine-tuning these are the same objects the model was fine-tuned on; a base checkpoint draws from the
    phase-1 pool.
    """
    if finetune_set is not None and checkpoint.meta.phase != "base":
        pool = finetune_pool(data.index, finetune_set, data.split)
    else:
        pool = phase_one_pool(data.index, data.split)
    chosen = {}
    for class_name in checkpoint.model.class_names:
        ids = pool.get(class_name, ())
        if not ids:
            raise DataError(f"no support annotation available for class '{class_name}'")
        chosen[class_name] = tuple(ids[:k])
    return chosen


def _support_bank(
    checkpoint: Checkpoint,
    data: TrainingData,
    finetune_set: Optional[FinetuneSet],
    k: int,
    cropper: SupportCropper,
) -> SupportFeatureBank:
    supports = evaluation_supports(checkpoint, data, finetune_set, k)
    crops = [cropper.crop(ann_id) for ids in supports.values() for ann_id in ids]
    with torch.no_grad():
        return checkpoint.model.encode_supports(crops)


def evaluate(
    checkpoint: Checkpoint, data: TrainingData, finetune_set: Optional[FinetuneSet], config: RunConfig
) -> EvalReport:
    """Run the checkpoint over every test image of the split and score each of its classes"""
    test_images = data.split.test_images
    if not test_images:
        raise DataError(f"split '{data.split.split_id}' has no test images")
    model = checkpoint.model
    model.eval()
    budget = finetune_set.budget if finetune_set is not None else checkpoint.meta.budget
    k = budget.k if budget is not None else config.budget.k

    store = ImageStore(data.index, data.image_root)
    normalizer = Normalizer(config.data.pixel_mean, config.data.pixel_std)
    bank = None
    if model.uses_supports:
        cropper = SupportCropper(store, normalizer, config.support.size, config.support.interpolation)
        bank = _support_bank(checkpoint, data, finetune_set, k, cropper)

    evaluated = [c for c in model.class_names if c not in config.data.exclude_classes]
    detections: dict[str, list[ScoredBox]] = {c: [] for c in evaluated}
    ground_truth: dict[str, list[Annotation]] = {c: [] for c in evaluated}
    kept: dict[str, Tuple[DetectionRecord, ...]] = {}
    for position, image_id in enumerate(test_images):
        for ann in data.index.annotations_by_image[image_id]:
            if ann.class_name in ground_truth:
                ground_truth[ann.class_name].append(ann)
        raw = model.detect(normalizer(store.raw(image_id)), bank)
        records = tuple(
            DetectionRecord(class_name=model.class_names[d.class_id - 1], score=d.score, box=d.box) for d in raw
        )
        for record in records:
            if record.class_name in detections:
                detections[record.class_name].append(ScoredBox(image_id, record.score, record.box))
        if position < config.eval.keep_detections:
            kept[image_id] = records

    novel = set(data.split.classes.novel)
    class_reports = []
    for class_name in evaluated:
        result = compute_ap(
            detections[class_name], ground_truth[class_name], config.eval.iou_threshold, config.eval.ap_variant
        )
        eleven = compute_ap(detections[class_name], ground_truth[class_name], config.eval.iou_threshold, "11_point")
        if result.ap is None:
            logger.warning("class has no test objects, AP left out", class_name=class_name)
        class_reports.append(
            ClassReport(
                class_name=class_name,
                is_novel=class_name in novel,
                num_ground_truth=result.num_ground_truth,
                ap=result.ap,
                ap_11pt=eleven.ap,
                recall=result.recall,
                precision=result.precision,
            )
        )

    report = EvalReport(
        method=checkpoint.meta.method,
        phase=checkpoint.meta.phase,
        split_id=data.split.split_id,
        novel_classes=tuple(data.split.classes.novel),
        k=budget.k if budget is not None else None,
        rho=budget.rho_label if budget is not None else None,
        seed=checkpoint.meta.seed,
        config_hash=checkpoint.meta.config_hash,
        iou_threshold=config.eval.iou_threshold,
        ap_variant=config.eval.ap_variant,
        test_images=len(test_images),
        classes=tuple(class_reports),
        detections=kept,
    )
    logger.info(
        "evaluation finished",
        method=report.method,
        split=report.split_id,
        k=report.k,
        rho=report.rho,
        novel_map=report.novel_map,
        base_map=report.base_map,
    )
    return report
