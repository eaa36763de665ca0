from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from structlog.stdlib import get_logger
from torch.utils.data import DataLoader, Dataset

from saandet.data.episodes import SupportPool, build_episode
from saandet.data.splits import active_annotations
from saandet.exceptions import DataError
from saandet.geometry import SupportImage, extract_support_crop, square_pad_bbox
from saandet.models.config import RunConfig
from saandet.models.dataset import DatasetIndex, Episode, FinetuneSet, Phase, SplitSpec
from saandet.utils.seeding import derive_seed

logger = get_logger(__name__)


@dataclass(frozen=True)
class QueryTargets:
    boxes: torch.Tensor  # (n, 4) active boxes
    labels: torch.Tensor  # (n,) 1-based detector class ids
    ignore_boxes: torch.Tensor  # (m, 4) masked annotations


@dataclass(frozen=True)
class EpisodeBatchItem:
    image_id: str
    episode: Episode | None
    image: torch.Tensor
    targets: QueryTargets
    supports: Tuple[SupportImage, ...]


class ImageStore:
    """Loads dataset images as float ``C x H x W`` tensors in ``[0, 1]``"""

    def __init__(self, index: DatasetIndex, image_root: Path | str, cache_size: int = 256):
        self.index = index
        self.image_root = Path(image_root)
        self.cache_size = cache_size
        self._cache: dict[str, torch.Tensor] = {}

    def _read(self, image_id: str) -> torch.Tensor:
        record = self.index.image_by_id[image_id]
        path = self.image_root / record.path
        try:
            with Image.open(path) as img:
                array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise DataError(f"cannot read image {path}: {e}") from e
        return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()

    def raw(self, image_id: str) -> torch.Tensor:
        pixels = self._cache.get(image_id)
        if pixels is None:
            pixels = self._read(image_id)
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[image_id] = pixels
        return pixels


class Normalizer:
    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        self.mean = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)

    def __call__(self, pixels: torch.Tensor) -> torch.Tensor:
        return (pixels - self.mean) / self.std


class SupportCropper:
    """Materializes support crops from raw pixels; normalization is applied after resampling"""

    def __init__(self, store: ImageStore, normalizer: Normalizer, size: int, mode: str = "bilinear"):
        self.store = store
        self.normalizer = normalizer
        self.size = size
        self.mode = mode

    def crop(self, annotation_id: str) -> SupportImage:
        ann = self.store.index.annotation_by_id[annotation_id]
        record = self.store.index.image_by_id[ann.image_id]
        window = square_pad_bbox(ann.bbox, record.dims)
        support = extract_support_crop(
            self.store.raw(ann.image_id),
            window,
            self.size,
            self.mode,  # type: ignore[arg-type]
            class_name=ann.class_name,
            annotation_id=annotation_id,
        )
        return SupportImage(
            pixels=self.normalizer(support.pixels), class_name=support.class_name, annotation_id=annotation_id
        )


def query_targets(
    index: DatasetIndex,
    image_id: str,
    class_ids: Mapping[str, int],
    finetune_set: FinetuneSet | None = None,
) -> QueryTargets:
    """Boxes of ``image_id`` split into supervised targets and ignore regions

    Objects of classes the detector does not know about are treated as ignore regions as well.
    """
    boxes, labels, ignore = [], [], []
    for ann in active_annotations(index, image_id, finetune_set):
        if ann.masked or ann.class_name not in class_ids:
            ignore.append(ann.bbox.as_tuple())
        else:
            boxes.append(ann.bbox.as_tuple())
            labels.append(class_ids[ann.class_name])
    return QueryTargets(
        boxes=torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
        labels=torch.tensor(labels, dtype=torch.int64),
        ignore_boxes=torch.tensor(ignore, dtype=torch.float32).reshape(-1, 4),
    )


class EpisodeDataset(Dataset):
    """Step-indexed episode stream

    Item ``step`` is a pure function of ``(seed, step)``: the query image cycles through a seeded permutation of
    ``query_images`` and the support draw uses a seed derived from the step, so concurrent loader workers produce the
    same sequence as a single process.
    """

    def __init__(
        self,
        index: DatasetIndex,
        split: SplitSpec,
        phase: Phase,
        query_images: Sequence[str],
        support_pool: SupportPool,
        class_ids: Mapping[str, int],
        config: RunConfig,
        image_root: Path | str,
        steps: int,
        finetune_set: FinetuneSet | None = None,
        with_supports: bool = True,
    ):
        if not query_images:
            raise DataError(f"no query images for phase '{phase}'")
        self.index = index
        self.split = split
        self.phase = phase
        self.support_pool = support_pool
        self.class_ids = dict(class_ids)
        self.seed = config.seed
        self.steps = steps
        self.finetune_set = finetune_set
        self.with_supports = with_supports
        self.flip = config.train.flip
        generator = np.random.default_rng(derive_seed(config.seed, "query-order", phase))
        self.query_images = [query_images[i] for i in generator.permutation(len(query_images))]
        self.store = ImageStore(index, image_root)
        self.normalizer = Normalizer(config.data.pixel_mean, config.data.pixel_std)
        self.cropper = SupportCropper(self.store, self.normalizer, config.support.size, config.support.interpolation)

    def __len__(self) -> int:
        return self.steps

    def __getitem__(self, step: int) -> EpisodeBatchItem:
        image_id = self.query_images[step % len(self.query_images)]
        episode_seed = derive_seed(self.seed, "episode", self.phase, step)
        episode: Episode | None = None
        supports: Tuple[SupportImage, ...] = ()
        if self.with_supports:
            episode = build_episode(self.split, self.phase, image_id, self.support_pool, episode_seed, self.index)
            supports = tuple(self.cropper.crop(ref.annotation_id) for ref in episode.supports)
        image = self.normalizer(self.store.raw(image_id))
        targets = query_targets(self.index, image_id, self.class_ids, self.finetune_set)
        if self.flip and derive_seed(self.seed, "flip", step) % 2 == 1:
            image, targets = hflip(image, targets)
        return EpisodeBatchItem(image_id=image_id, episode=episode, image=image, targets=targets, supports=supports)


def hflip(image: torch.Tensor, targets: QueryTargets) -> tuple[torch.Tensor, QueryTargets]:
    width = image.shape[-1]

    def flip_boxes(boxes: torch.Tensor) -> torch.Tensor:
        flipped = boxes.clone()
        flipped[:, 0] = width - boxes[:, 2]
        flipped[:, 2] = width - boxes[:, 0]
        return flipped

    return image.flip(-1), QueryTargets(
        boxes=flip_boxes(targets.boxes), labels=targets.labels, ignore_boxes=flip_boxes(targets.ignore_boxes)
    )


def collate_episodes(batch: list[EpisodeBatchItem]) -> list[EpisodeBatchItem]:
    return batch


def episode_loader(dataset: EpisodeDataset, batch_size: int, workers: int, prefetch: int) -> DataLoader:
    """Bounded-queue loader; ``prefetch`` batches per worker are prepared ahead of the training loop"""
    kwargs = {"num_workers": workers, "collate_fn": collate_episodes, "batch_size": batch_size, "shuffle": False}
    if workers > 0:
        kwargs["prefetch_factor"] = prefetch
        kwargs["persistent_workers"] = False
    return DataLoader(dataset, **kwargs)
