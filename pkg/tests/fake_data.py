from __future__ import annotations

from typing import Mapping, Sequence, Tuple

from saandet.evaluation.report import ClassReport, DetectionRecord, EvalReport
from saandet.models.dataset import Annotation, DatasetIndex, ImageRecord
from saandet.models.geometry import BBox

Box = Tuple[float, float, float, float]


def make_index(
    objects: Mapping[str, Sequence[Tuple[str, Box]]],
    classes: Sequence[str],
    size: int = 100,
) -> DatasetIndex:
    """Index of ``size x size`` images from ``{image_id: [(class, box), ...]}``"""
    images = []
    annotations = []
    for image_id, items in objects.items():
        images.append(ImageRecord(image_id=image_id, path=f"images/{image_id}.png", width=size, height=size))
        for position, (class_name, box) in enumerate(items):
            annotations.append(
                Annotation(
                    annotation_id=f"{image_id}#{position}",
                    image_id=image_id,
                    class_name=class_name,
                    bbox=BBox.from_tuple(box),
                )
            )
    return DatasetIndex(classes=tuple(classes), images=tuple(images), annotations=tuple(annotations))


def one_object_per_image(classes: Sequence[str], per_class: int) -> DatasetIndex:
    objects = {f"{c}_{i:02d}": [(c, (10.0, 10.0, 40.0, 40.0))] for c in classes for i in range(per_class)}
    return make_index(objects, classes)


def make_report(
    method: str = "saan",
    novel: str = "tank",
    k: int = 1,
    rho: str = "1",
    aps: Mapping[str, float | None] | None = None,
    detections: Mapping[str, Sequence[DetectionRecord]] | None = None,
) -> EvalReport:
    """Report over ``aps`` (class -> AP); the ``novel`` class is flagged as novel"""
    aps = dict(aps if aps is not None else {"plane": 0.75, novel: 0.5})
    classes = tuple(
        ClassReport(class_name=name, is_novel=name == novel, num_ground_truth=4, ap=ap, ap_11pt=ap)
        for name, ap in aps.items()
    )
    return EvalReport(
        method=method,
        phase="finetune",
        split_id=novel,
        novel_classes=(novel,),
        k=k,
        rho=rho,
        seed=0,
        config_hash="0123456789ab",
        iou_threshold=0.5,
        ap_variant="all_point",
        test_images=10,
        classes=classes,
        detections={key: tuple(value) for key, value in (detections or {}).items()},
    )
