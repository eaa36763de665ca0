from __future__ import annotations

import random
from collections import defaultdict
from typing import Iterable, Mapping, Sequence, Tuple

from structlog.stdlib import get_logger

from saandet.exceptions import DataError
from saandet.models.dataset import DatasetIndex, Episode, FinetuneSet, Phase, SplitSpec, SupportRef

logger = get_logger(__name__)

SupportPool = Mapping[str, Sequence[str]]


def build_support_pool(index: DatasetIndex, annotation_ids: Iterable[str]) -> dict[str, Tuple[str, ...]]:
    """Group annotation ids by class, each list sorted so draws are reproducible"""
    pool: dict[str, list[str]] = defaultdict(list)
    for ann_id in annotation_ids:
        ann = index.annotation_by_id[ann_id]
        if not ann.masked:
            pool[ann.class_name].append(ann_id)
    return {c: tuple(sorted(ids)) for c, ids in pool.items()}


def phase_one_pool(index: DatasetIndex, split: SplitSpec) -> dict[str, Tuple[str, ...]]:
    base = set(split.classes.base)
    return build_support_pool(
        index,
        (
            ann.annotation_id
            for i in split.base_train_images
            for ann in index.annotations_by_image[i]
            if ann.class_name in base
        ),
    )


def finetune_pool(
    index: DatasetIndex, finetune_set: FinetuneSet, split: SplitSpec | None = None
) -> dict[str, Tuple[str, ...]]:
    """Supports for phase 2, drawn from the active fine-tuning annotations only

    Novel classes never see more than their ``k`` sampled objects. A base class left without active annotations
    (``rho=0``) borrows its supports from the phase-1 pool when ``split`` is given.
    """
    pool = build_support_pool(index, finetune_set.active)
    if split is not None:
        fallback = phase_one_pool(index, split)
        for class_name in split.classes.base:
            if class_name not in pool and class_name in fallback:
                pool[class_name] = fallback[class_name]
    return pool


def active_classes_for(split: SplitSpec, phase: Phase, index: DatasetIndex) -> Tuple[str, ...]:
    if phase == "base":
        return index.sort_classes(split.classes.base)
    return index.sort_classes(split.classes.all)


def build_episode(
    split: SplitSpec,
    phase: Phase,
    query_image_id: str,
    support_pool: SupportPool,
    seed: int,
    index: DatasetIndex,
) -> Episode:
    """Pair a query image with one support crop per active class

    Training phases draw supports at random under ``seed``; the ``eval`` phase takes the first annotation of every
    class pool so the choice does not depend on the seed.
    """
    active = active_classes_for(split, phase, index)
    rng = random.Random(seed)
    supports = []
    for class_name in active:
        candidates = support_pool.get(class_name, ())
        if not candidates:
            raise DataError(f"support pool for class '{class_name}' is empty")
        choice = candidates[0] if phase == "eval" else rng.choice(list(candidates))
        supports.append(SupportRef(annotation_id=choice, class_name=class_name))
    return Episode(query_image_id=query_image_id, supports=tuple(supports), active_classes=active)
