"""Blur or black out the pixels of kept privacy regions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import BoundingBox, check_image, clip_box, region_slices

MODES = ("blur", "blackout")


@dataclass(frozen=True)
class ObfuscationConfig:
    mode: str = "blur"
    blur_sigma: float = 8.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")

    @property
    def blur_kernel_radius(self) -> int:
        return math.ceil(3.0 * self.blur_sigma)


def region_mask(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels whose centers fall inside any box."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        c = clip_box(b, width, height)
        if c is not None:
            mask[region_slices(c, width, height)] = True
    return mask


def gaussian_blur(image: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Sampled, normalized Gaussian of the given radius; edges mirror (``dcba|abcd``)."""
    return ndimage.gaussian_filter(
        image.astype(np.float64), sigma=(sigma, sigma, 0), mode="reflect", radius=(radius, radius, 0)
    )


def obfuscate(image: np.ndarray, boxes: Sequence[BoundingBox], cfg: ObfuscationConfig = ObfuscationConfig()) -> np.ndarray:
    image = check_image(image)
    h, w = image.shape[:2]
    mask = region_mask(boxes, w, h)
    out = image.copy()
    if not mask.any():
        return out
    if cfg.mode == "blackout":
        out[mask] = 0
        return out
    blurred = gaussian_blur(image, cfg.blur_sigma, cfg.blur_kernel_radius)
    out[mask] = np.clip(np.rint(blurred[mask]), 0, 255).astype(np.uint8)
    return out
