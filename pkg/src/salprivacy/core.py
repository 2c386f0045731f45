"""Boxes, detections, saliency maps and the exact geometry shared by every stage.

Coordinates are continuous pixel coordinates in the image frame. Pixel
``(i, j)`` (column ``i``, row ``j``) has its center at ``(i + 0.5, j + 0.5)``
and belongs to a box iff that center lies in ``[x_min, x_max) x [y_min, y_max)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyRegion


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box has no extent: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-pixel saliency in [0, 1], stored as a ``(height, width)`` float array."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"saliency map must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError("saliency values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an RGB ``uint8`` image of shape ``(H, W, 3)`` and return it."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] <= 0 or image.shape[1] <= 0:
        raise ValueError("image dimensions must be positive")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    return image


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return inter / (a.area + b.area - inter)


def clip_box(b: BoundingBox, width: float, height: float) -> Optional[BoundingBox]:
    """Intersect ``b`` with the frame ``[0, width] x [0, height]``.

    Returns ``None`` when nothing with positive area remains.
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    x0, y0 = max(b.x_min, 0.0), max(b.y_min, 0.0)
    x1, y1 = min(b.x_max, float(width)), min(b.y_max, float(height))
    if x0 >= x1 or y0 >= y1:
        return None
    if (x0, y0, x1, y1) == (b.x_min, b.y_min, b.x_max, b.y_max):
        return b
    return BoundingBox(x0, y0, x1, y1)


def pixel_span(lo: float, hi: float, size: int) -> tuple[int, int]:
    """Half-open index range of pixels whose centers fall in ``[lo, hi)``."""
    start = max(math.ceil(lo - 0.5), 0)
    stop = min(math.ceil(hi - 0.5), size)
    return start, max(stop, start)


def region_slices(b: BoundingBox, width: int, height: int) -> tuple[slice, slice]:
    """Row and column slices selecting the pixels covered by ``b``."""
    c0, c1 = pixel_span(b.x_min, b.x_max, width)
    r0, r1 = pixel_span(b.y_min, b.y_max, height)
    return slice(r0, r1), slice(c0, c1)


def mean_saliency(m: SaliencyMap, b: BoundingBox) -> float:
    rows, cols = region_slices(b, m.width, m.height)
    region = m.values[rows, cols]
    if region.size == 0:
        raise EmptyRegion(f"{b} covers no pixel centers of a {m.width}x{m.height} map")
    # pairwise summation can drift a ulp past the extremes of a flat region
    return float(np.clip(region.mean(), region.min(), region.max()))
