"""Support crop geometry

Support images are object patches cut from training images. The short side of the annotated box is padded
symmetrically until it matches the long side, the padded axis is clamped to the image, and the patch is resampled to
a fixed ``S x S`` square. Clamping near the border leaves a non-square window, so the final resize may distort the
aspect ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F

from saandet.exceptions import GeometryError, ShapeError
from saandet.models.geometry import BBox, CropWindow, ImageDims

Interpolation = Literal["bilinear", "nearest"]


@dataclass(frozen=True)
class SupportImage:
    pixels: torch.Tensor
    class_name: str
    annotation_id: str

    @property
    def size(self) -> int:
        return int(self.pixels.shape[-1])


def square_pad_bbox(bbox: BBox, dims: ImageDims) -> CropWindow:
    """Pad the short side of ``bbox`` up to its long side, then clamp the padded axis to the image

    Both sides get half the difference, so an odd difference leaves the window on half-pixel edges.
    """
    if not bbox.within(dims):
        raise GeometryError(f"box {bbox.as_tuple()} exceeds image {dims.width}x{dims.height}")
    w, h = bbox.width, bbox.height
    x1, y1, x2, y2 = bbox.as_tuple()
    if w >= h:
        pad = (w - h) / 2
        y1, y2 = max(y1 - pad, 0.0), min(y2 + pad, float(dims.height))
    else:
        pad = (h - w) / 2
        x1, x2 = max(x1 - pad, 0.0), min(x2 + pad, float(dims.width))
    return CropWindow(x1=x1, y1=y1, x2=x2, y2=y2, source=bbox)


def _nearest_indices(in_len: int, out_len: int) -> torch.Tensor:
    return torch.div(torch.arange(out_len) * in_len, out_len, rounding_mode="floor")


def resize_square(pixels: torch.Tensor, size: int, mode: Interpolation = "bilinear") -> torch.Tensor:
    """Resample a ``C x h x w`` tensor to ``C x size x size``"""
    if pixels.dim() != 3:
        raise ShapeError(f"expected a C x H x W tensor, got shape {tuple(pixels.shape)}")
    _, h, w = pixels.shape
    if mode == "nearest":
        rows = _nearest_indices(h, size)
        cols = _nearest_indices(w, size)
        return pixels.index_select(1, rows).index_select(2, cols)
    if (h, w) == (size, size):
        return pixels.clone()
    resized = F.interpolate(pixels.unsqueeze(0).float(), size=(size, size), mode="bilinear", align_corners=False)
    return resized.squeeze(0).to(pixels.dtype)


def extract_support_crop(
    image: torch.Tensor,
    window: CropWindow,
    size: int = 224,
    mode: Interpolation = "bilinear",
    class_name: str = "",
    annotation_id: str = "",
) -> SupportImage:
    """Cut ``window`` out of a ``C x H x W`` image and resample it to ``size x size``

    Fractional window edges are rounded outward: the min edge down, the max edge up.
    """
    if image.dim() != 3:
        raise ShapeError(f"expected a C x H x W image, got shape {tuple(image.shape)}")
    _, height, width = image.shape
    if window.x2 > width or window.y2 > height:
        raise GeometryError(f"crop window {window.as_tuple()} exceeds image {width}x{height}")
    x1, y1 = int(math.floor(window.x1)), int(math.floor(window.y1))
    x2, y2 = int(math.ceil(window.x2)), int(math.ceil(window.y2))
    patch = image[:, y1:y2, x1:x2]
    return SupportImage(pixels=resize_square(patch, size, mode), class_name=class_name, annotation_id=annotation_id)
