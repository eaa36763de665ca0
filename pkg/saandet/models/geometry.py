from __future__ import annotations

from typing import Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class BBox(BaseModel):
    """Axis-aligned box in 0-based image coordinates, ``x2``/``y2`` exclusive"""

    model_config = ConfigDict(frozen=True)

    x1: float = Field(ge=0)
    y1: float = Field(ge=0)
    x2: float = Field(ge=0)
    y2: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_extent(self) -> "BBox":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        return self

    @classmethod
    def from_tuple(cls, coords: Tuple[float, float, float, float]) -> "BBox":
        x1, y1, x2, y2 = coords
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def within(self, dims: "ImageDims") -> bool:
        return self.x2 <= dims.width and self.y2 <= dims.height

    def hflip(self, dims: "ImageDims") -> "BBox":
        return BBox(x1=dims.width - self.x2, y1=self.y1, x2=dims.width - self.x1, y2=self.y2)


class ImageDims(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)


class CropWindow(BBox):
    """Square-padded, boundary-clamped window around ``source``"""

    source: BBox
