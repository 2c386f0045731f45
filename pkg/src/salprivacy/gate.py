"""Manual-threshold (MT) refinement of candidate privacy regions by saliency.

A candidate whose mean saliency lies strictly above the threshold is a
salient object, hence not private, and is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Detection, SaliencyMap, clip_box, mean_saliency
from .errors import DimensionMismatch, EmptyRegion


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 0.5
    reject_on_equal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"gate threshold must lie in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class GateDecision:
    detection: Detection
    mean_saliency: float
    kept: bool
    # set when the clipped box covers no pixel of the map
    empty_region: bool = False


def rejects(value: float, cfg: GateConfig) -> bool:
    if cfg.reject_on_equal:
        return value >= cfg.threshold
    return value > cfg.threshold


def gate(
    detections: Sequence[Detection],
    saliency: SaliencyMap,
    cfg: GateConfig = GateConfig(),
    image_size: Optional[tuple[int, int]] = None,
) -> list[GateDecision]:
    """Decide, per detection and in input order, whether it survives the gate.

    ``image_size`` is the ``(width, height)`` of the image the detections
    refer to; when given it must equal the map size.
    """
    if image_size is not None and tuple(image_size) != (saliency.width, saliency.height):
        raise DimensionMismatch(
            f"saliency map is {saliency.width}x{saliency.height}, "
            f"image is {image_size[0]}x{image_size[1]}"
        )
    decisions = []
    for det in detections:
        box = clip_box(det.box, saliency.width, saliency.height)
        try:
            if box is None:
                raise EmptyRegion(str(det.box))
            value = mean_saliency(saliency, box)
        except EmptyRegion:
            decisions.append(GateDecision(det, 0.0, True, empty_region=True))
            continue
        decisions.append(GateDecision(det, value, not rejects(value, cfg)))
    return decisions


def kept_detections(decisions: Sequence[GateDecision]) -> list[Detection]:
    return [d.detection for d in decisions if d.kept]
