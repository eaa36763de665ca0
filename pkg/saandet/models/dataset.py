from __future__ import annotations

from collections import Counter, defaultdict
from typing import Any, Iterable, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from saandet.models.geometry import BBox, ImageDims

Phase = Literal["base", "finetune", "joint", "eval"]


class ImageRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: str
    path: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @property
    def dims(self) -> ImageDims:
        return ImageDims(width=self.width, height=self.height)


class Annotation(BaseModel):
    model_config = ConfigDict(frozen=True)

    annotation_id: str
    image_id: str
    class_name: str
    bbox: BBox
    masked: bool = False


class DatasetIndex(BaseModel):
    """Immutable catalog of images, their annotations and the class list

    Class ids are 1-based positions in ``classes``; 0 is reserved for background.
    """

    model_config = ConfigDict(frozen=True)

    classes: Tuple[str, ...]
    images: Tuple[ImageRecord, ...]
    annotations: Tuple[Annotation, ...]

    _image_by_id: dict[str, ImageRecord] = PrivateAttr(default_factory=dict)
    _annotation_by_id: dict[str, Annotation] = PrivateAttr(default_factory=dict)
    _annotations_by_image: dict[str, Tuple[Annotation, ...]] = PrivateAttr(default_factory=dict)
    _class_counts: dict[str, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _check_consistency(self) -> "DatasetIndex":
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")
        images = {img.image_id: img for img in self.images}
        if len(images) != len(self.images):
            raise ValueError("duplicate image ids")
        known = set(self.classes)
        for ann in self.annotations:
            image = images.get(ann.image_id)
            if image is None:
                raise ValueError(f"annotation {ann.annotation_id} references unknown image {ann.image_id}")
            if ann.class_name not in known:
                raise ValueError(f"annotation {ann.annotation_id} has unknown class {ann.class_name}")
            if not ann.bbox.within(image.dims):
                raise ValueError(f"annotation {ann.annotation_id} lies outside its image")
        return self

    def model_post_init(self, __context: Any) -> None:
        grouped: dict[str, list[Annotation]] = defaultdict(list)
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        counts = Counter(ann.class_name for ann in self.annotations)
        self._image_by_id = {img.image_id: img for img in self.images}
        self._annotation_by_id = {ann.annotation_id: ann for ann in self.annotations}
        self._annotations_by_image = {img.image_id: tuple(grouped.get(img.image_id, ())) for img in self.images}
        self._class_counts = {name: counts.get(name, 0) for name in self.classes}

    @property
    def image_by_id(self) -> dict[str, ImageRecord]:
        return self._image_by_id

    @property
    def annotation_by_id(self) -> dict[str, Annotation]:
        return self._annotation_by_id

    @property
    def annotations_by_image(self) -> dict[str, Tuple[Annotation, ...]]:
        return self._annotations_by_image

    @property
    def class_counts(self) -> dict[str, int]:
        return self._class_counts

    def class_id(self, class_name: str) -> int:
        return self.classes.index(class_name) + 1

    def sort_classes(self, class_names: Iterable[str]) -> Tuple[str, ...]:
        """Order class names by ascending class id"""
        return tuple(sorted(class_names, key=self.class_id))

    def classes_in_image(self, image_id: str) -> set[str]:
        return {ann.class_name for ann in self.annotations_by_image[image_id]}


class ClassSplit(BaseModel):
    model_config = ConfigDict(frozen=True)

    base: Tuple[str, ...]
    novel: Tuple[str, ...]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "ClassSplit":
        if not self.base or not self.novel:
            raise ValueError("base and novel class sets must both be non-empty")
        if set(self.base) & set(self.novel):
            raise ValueError(f"base and novel classes overlap: {sorted(set(self.base) & set(self.novel))}")
        return self

    @property
    def all(self) -> Tuple[str, ...]:
        return self.base + self.novel


class SplitSpec(BaseModel):
    """Per-image train/test assignment

    ``base_train_images`` is the phase-1 pool: training images that carry no novel-class object.
    """

    model_config = ConfigDict(frozen=True)

    classes: ClassSplit
    train_images: Tuple[str, ...]
    test_images: Tuple[str, ...]
    base_train_images: Tuple[str, ...]
    train_fraction: float
    seed: int

    @property
    def split_id(self) -> str:
        return "+".join(self.classes.novel)


class ShotBudget(BaseModel):
    """``k`` shots per novel class and a base:novel proportion; ``rho=None`` means every base object"""

    model_config = ConfigDict(frozen=True)

    k: int = Field(default=10, ge=1)
    rho: Optional[int] = Field(default=1, ge=0)

    @field_validator("rho", mode="before")
    @classmethod
    def _parse_infinity(cls, value: object) -> object:
        if isinstance(value, str) and value.strip().lower() in {"inf", "infinity", "∞", "all", "none"}:
            return None
        if isinstance(value, float) and value == float("inf"):
            return None
        return value

    @property
    def rho_label(self) -> str:
        return "inf" if self.rho is None else str(self.rho)


class FinetuneSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    budget: ShotBudget
    images: Tuple[str, ...]
    active: Tuple[str, ...]
    masked: Tuple[str, ...]
    counts: dict[str, int]
    seed: int


class SupportRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    annotation_id: str
    class_name: str


class Episode(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_image_id: str
    supports: Tuple[SupportRef, ...]
    active_classes: Tuple[str, ...]

    @model_validator(mode="after")
    def _check_bijective(self) -> "Episode":
        support_classes = [ref.class_name for ref in self.supports]
        if len(support_classes) != len(self.active_classes) or set(support_classes) != set(self.active_classes):
            raise ValueError("episode needs exactly one support per active class")
        return self
