from __future__ import annotations

import random
from collections import Counter
from typing import Iterable, Mapping

from structlog.stdlib import get_logger

from saandet.exceptions import DataError, InfeasibleBudgetError
from saandet.models.dataset import Annotation, ClassSplit, DatasetIndex, FinetuneSet, ShotBudget, SplitSpec

logger = get_logger(__name__)

# bound on the exhaustive search used when surplus annotations may not be masked
SEARCH_NODE_LIMIT = 200_000


def make_split(index: DatasetIndex, novel: Iterable[str], train_fraction: float = 0.8, seed: int = 0) -> SplitSpec:
    """Assign every image to train or test and derive the phase-1 training pool

    Images containing a novel-class object stay in the training split (they feed fine-tuning) but are withheld from
    ``base_train_images`` so novel objects are never learned as background.
    """
    novel_set = set(novel)
    unknown = novel_set - set(index.classes)
    if unknown:
        raise DataError(f"unknown novel classes: {sorted(unknown)}")
    if not novel_set or novel_set == set(index.classes):
        raise DataError("novel classes must be a non-empty proper subset of the class list")
    if not 0 < train_fraction < 1:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")

    split = ClassSplit(
        base=tuple(c for c in index.classes if c not in novel_set),
        novel=tuple(c for c in index.classes if c in novel_set),
    )
    image_ids = sorted(img.image_id for img in index.images)
    random.Random(seed).shuffle(image_ids)
    n_train = int(round(train_fraction * len(image_ids)))
    train = sorted(image_ids[:n_train])
    test = sorted(image_ids[n_train:])
    base_train = [i for i in train if not index.classes_in_image(i) & novel_set]
    logger.info(
        "split created", novel=split.novel, train=len(train), test=len(test), base_train=len(base_train), seed=seed
    )
    return SplitSpec(
        classes=split,
        train_images=tuple(train),
        test_images=tuple(test),
        base_train_images=tuple(base_train),
        train_fraction=train_fraction,
        seed=seed,
    )


def class_targets(index: DatasetIndex, split: SplitSpec, budget: ShotBudget) -> dict[str, int]:
    """Active annotation count required per class: ``k`` per novel class, ``rho * k`` per base class"""
    available = Counter(ann.class_name for i in split.train_images for ann in index.annotations_by_image[i])
    targets = {c: budget.k for c in split.classes.novel}
    for c in split.classes.base:
        targets[c] = available.get(c, 0) if budget.rho is None else budget.rho * budget.k
    return targets


def _greedy_with_masking(
    order: list[str], index: DatasetIndex, targets: Mapping[str, int]
) -> tuple[list[str], list[str], list[str], dict[str, int]]:
    remaining = dict(targets)
    images: list[str] = []
    active: list[str] = []
    masked: list[str] = []
    for image_id in order:
        if not any(remaining.values()):
            break
        annotations = index.annotations_by_image[image_id]
        if not any(remaining.get(ann.class_name, 0) > 0 for ann in annotations):
            continue
        images.append(image_id)
        for ann in annotations:
            if remaining.get(ann.class_name, 0) > 0:
                remaining[ann.class_name] -= 1
                active.append(ann.annotation_id)
            else:
                masked.append(ann.annotation_id)
    return images, active, masked, remaining


def _exact_without_masking(
    order: list[str], index: DatasetIndex, targets: Mapping[str, int]
) -> list[str] | None:
    """Depth-first search for a set of whole images whose class counts equal ``targets`` exactly"""
    image_counts: list[tuple[str, Counter[str]]] = []
    for image_id in order:
        counts = Counter(ann.class_name for ann in index.annotations_by_image[image_id])
        if counts and all(targets.get(c, 0) >= n for c, n in counts.items()):
            image_counts.append((image_id, counts))
    nodes = 0

    def search(start: int, remaining: dict[str, int], chosen: list[str]) -> list[str] | None:
        nonlocal nodes
        if not any(remaining.values()):
            return list(chosen)
        for i in range(start, len(image_counts)):
            nodes += 1
            if nodes > SEARCH_NODE_LIMIT:
                return None
            image_id, counts = image_counts[i]
            if all(remaining.get(c, 0) >= n for c, n in counts.items()):
                for c, n in counts.items():
                    remaining[c] -= n
                chosen.append(image_id)
                found = search(i + 1, remaining, chosen)
                if found is not None:
                    return found
                chosen.pop()
                for c, n in counts.items():
                    remaining[c] += n
        return None

    return search(0, dict(targets), [])


def _name_infeasible_class(
    index: DatasetIndex, split: SplitSpec, targets: Mapping[str, int], allow_masking: bool
) -> tuple[str, str]:
    pool = [ann for i in split.train_images for ann in index.annotations_by_image[i]]
    available = Counter(ann.class_name for ann in pool)
    for class_name in index.sort_classes(targets):
        if available.get(class_name, 0) < targets[class_name]:
            return class_name, f"needs {targets[class_name]} annotations, {available.get(class_name, 0)} available"
    if not allow_masking:
        for class_name in index.sort_classes(targets):
            if targets[class_name] == 0:
                continue
            per_image = Counter(ann.image_id for ann in pool if ann.class_name == class_name)
            if per_image and min(per_image.values()) > targets[class_name]:
                return class_name, (
                    f"every image holds more than {targets[class_name]} objects (fewest: {min(per_image.values())})"
                )
    first = index.sort_classes([c for c, n in targets.items() if n > 0])
    return (first[0] if first else "?"), "no combination of whole images meets the budget"


def sample_finetune_set(
    index: DatasetIndex,
    split: SplitSpec,
    budget: ShotBudget,
    seed: int = 0,
    allow_masking: bool = True,
) -> FinetuneSet:
    """Select fine-tuning images so every class has exactly its budgeted number of active annotations

    Novel classes get ``k`` active annotations and base classes ``rho * k`` (all of them for ``rho=None``). Objects
    beyond a class budget inside a selected image are masked: they become ignore regions instead of dropping the
    image. With ``allow_masking=False`` only whole images are taken.
    """
    targets = class_targets(index, split, budget)
    order = sorted(split.train_images)
    random.Random(seed).shuffle(order)

    if allow_masking:
        images, active, masked, remaining = _greedy_with_masking(order, index, targets)
        if any(remaining.values()):
            class_name, reason = _name_infeasible_class(index, split, targets, allow_masking)
            raise InfeasibleBudgetError(class_name, reason)
    else:
        chosen = _exact_without_masking(order, index, targets)
        if chosen is None:
            class_name, reason = _name_infeasible_class(index, split, targets, allow_masking)
            raise InfeasibleBudgetError(class_name, reason)
        images = chosen
        active = [ann.annotation_id for i in chosen for ann in index.annotations_by_image[i]]
        masked = []

    counts = Counter(index.annotation_by_id[a].class_name for a in active)
    finetune_set = FinetuneSet(
        budget=budget,
        images=tuple(sorted(images)),
        active=tuple(sorted(active)),
        masked=tuple(sorted(masked)),
        counts={c: counts.get(c, 0) for c in index.sort_classes(targets)},
        seed=seed,
    )
    logger.info(
        "fine-tuning set sampled",
        k=budget.k,
        rho=budget.rho_label,
        images=len(finetune_set.images),
        masked=len(finetune_set.masked),
        counts=finetune_set.counts,
    )
    return finetune_set


def active_annotations(index: DatasetIndex, image_id: str, finetune_set: FinetuneSet | None) -> list[Annotation]:
    """Annotations of ``image_id`` with ``masked`` set according to the fine-tuning set"""
    annotations = list(index.annotations_by_image[image_id])
    if finetune_set is None:
        return annotations
    masked = set(finetune_set.masked)
    return [ann.model_copy(update={"masked": True}) if ann.annotation_id in masked else ann for ann in annotations]
