"""Desk-scale synthetic detection dataset

Colored geometric shapes on grayscale noise. Boxes are read back from each shape's own raster mask, so every
shape pixel lies inside its annotation. Shapes never overlap and class colors are saturated while the background is
gray, which makes the dataset trivially separable by color.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, model_validator
from structlog.stdlib import get_logger

from saandet.data.formats import annotation_id, write_index
from saandet.exceptions import DataError
from saandet.models.dataset import Annotation, DatasetIndex, ImageRecord
from saandet.models.geometry import BBox
from saandet.utils.seeding import derive_seed

logger = get_logger(__name__)

SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring")
PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (220, 40, 40),
    (40, 200, 60),
    (50, 80, 230),
    (230, 200, 30),
    (200, 50, 210),
    (30, 210, 210),
)
PLACEMENT_ATTEMPTS = 50
MARGIN = 2


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    classes: int = Field(default=3, ge=2, le=len(SHAPES))
    images: int = Field(default=100, ge=1)
    image_size: int = Field(default=128, ge=32)
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=4, ge=1)
    min_size: int = Field(default=14, ge=4)
    max_size: int = Field(default=36, ge=4)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "SyntheticConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if self.min_size > self.max_size or self.max_size >= self.image_size:
            raise ValueError("object sizes must satisfy min_size <= max_size < image_size")
        return self

    @property
    def class_names(self) -> Tuple[str, ...]:
        return SHAPES[: self.classes]

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, x: int, y: int, size: int) -> None:
    x2, y2 = x + size - 1, y + size - 1
    if shape == "disk":
        draw.ellipse((x, y, x2, y2), fill=255)
    elif shape == "square":
        draw.rectangle((x, y, x2, y2), fill=255)
    elif shape == "triangle":
        draw.polygon([(x + size // 2, y), (x2, y2), (x, y2)], fill=255)
    elif shape == "diamond":
        draw.polygon([(x + size // 2, y), (x2, y + size // 2), (x + size // 2, y2), (x, y + size // 2)], fill=255)
    elif shape == "cross":
        bar = max(size // 3, 2)
        offset = (size - bar) // 2
        draw.rectangle((x + offset, y, x + offset + bar - 1, y2), fill=255)
        draw.rectangle((x, y + offset, x2, y + offset + bar - 1), fill=255)
    elif shape == "ring":
        draw.ellipse((x, y, x2, y2), fill=255)
        inset = max(size // 4, 2)
        draw.ellipse((x + inset, y + inset, x2 - inset, y2 - inset), fill=0)
    else:
        raise DataError(f"unknown shape {shape!r}")


def _overlaps(box: Tuple[int, int, int, int], placed: list[Tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    for px1, py1, px2, py2 in placed:
        if x1 < px2 + MARGIN and px1 < x2 + MARGIN and y1 < py2 + MARGIN and py1 < y2 + MARGIN:
            return True
    return False


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.integers(70, 150)
    ramp = np.linspace(-20, 20, size)[None, :] * rng.choice([-1.0, 1.0])
    noise = rng.normal(0.0, 12.0, size=(size, size))
    gray = np.clip(base + ramp + noise, 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def render_image(
    config: SyntheticConfig, image_index: int
) -> tuple[Image.Image, list[tuple[str, Tuple[int, int, int, int]]]]:
    """Render one image and return it with its ``(class, box)`` list"""
    rng = np.random.default_rng(derive_seed(config.seed, "synthetic", image_index))
    wanted = int(rng.integers(config.min_objects, config.max_objects + 1))
    while True:
        canvas = Image.fromarray(_background(rng, config.image_size))
        objects: list[tuple[str, Tuple[int, int, int, int]]] = []
        placed: list[Tuple[int, int, int, int]] = []
        failed = False
        for _ in range(wanted):
            class_idx = int(rng.integers(0, config.classes))
            shape = config.class_names[class_idx]
            for _attempt in range(PLACEMENT_ATTEMPTS):
                size = int(rng.integers(config.min_size, config.max_size + 1))
                x = int(rng.integers(0, config.image_size - size + 1))
                y = int(rng.integers(0, config.image_size - size + 1))
                mask = Image.new("L", canvas.size, 0)
                _draw_shape(ImageDraw.Draw(mask), shape, x, y, size)
                box = mask.getbbox()
                if box is None or _overlaps(box, placed):
                    continue
                canvas.paste(PALETTE[class_idx], mask=mask)
                placed.append(box)
                objects.append((shape, box))
                break
            else:
                failed = True
                break
        if not failed:
            return canvas, objects
        logger.warning("shape placement failed, regenerating with fewer shapes", image=image_index, shapes=wanted)
        wanted = max(wanted - 1, 1)


def generate_synthetic_dataset(config: SyntheticConfig, out_dir: Path | str) -> DatasetIndex:
    """Render ``config.images`` images into ``out_dir/images`` and write ``out_dir/index.tsv``"""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    for i in range(config.images):
        image_id = f"synth_{i:05d}"
        canvas, objects = render_image(config, i)
        rel_path = f"images/{image_id}.png"
        canvas.save(out_dir / rel_path, format="PNG")
        images.append(ImageRecord(image_id=image_id, path=rel_path, width=canvas.width, height=canvas.height))
        for position, (shape, box) in enumerate(objects):
            annotations.append(
                Annotation(
                    annotation_id=annotation_id(image_id, position),
                    image_id=image_id,
                    class_name=shape,
                    bbox=BBox.from_tuple(box),
                )
            )
    index = DatasetIndex(classes=config.class_names, images=tuple(images), annotations=tuple(annotations))
    header = {"seed": config.seed, "source": "synthetic", "config_hash": config.config_hash}
    write_index(out_dir / "index.tsv", index, header=header)
    logger.info("synthetic dataset written", out_dir=str(out_dir), images=len(images), objects=len(annotations))
    return index
