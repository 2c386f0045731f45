"""Single-class average precision, PASCAL style.

With a single privacy class, mAP and AP are the same number; reports carry
both keys so results line up with multi-method comparison tables.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection, iou
from .errors import EmptyDataset, UnknownImageId

INTERPOLATIONS = ("all_point", "eleven_point")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    interpolation: str = "all_point"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie strictly between 0 and 1")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")


@dataclass(frozen=True)
class Match:
    detection: Detection
    truth_index: Optional[int]
    is_tp: bool


def match_detections(dets: Sequence[Detection], truths: Sequence[BoundingBox], iou_threshold: float) -> list[Match]:
    """Label each detection TP or FP; results are in input order.

    Detections are visited by descending score (input order among ties); each
    takes its best-IoU still-unmatched truth if that IoU reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    free = [True] * len(truths)
    result: list[Optional[Match]] = [None] * len(dets)
    for i in order:
        best_j, best = None, -1.0
        for j, t in enumerate(truths):
            if free[j]:
                v = iou(dets[i].box, t)
                if v > best:
                    best_j, best = j, v
        if best_j is not None and best >= iou_threshold:
            free[best_j] = False
            result[i] = Match(dets[i], best_j, True)
        else:
            result[i] = Match(dets[i], None, False)
    return result


def pr_curve(labels: Sequence[bool], total_truths: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(labels, dtype=np.float64))
    recall = tp / total_truths if total_truths else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-300)
    return recall, precision


def average_precision(labels: Sequence[bool], total_truths: int, cfg: EvalConfig = EvalConfig()) -> float:
    """AP of score-sorted TP/FP labels against ``total_truths`` ground-truth boxes."""
    if total_truths < 0:
        raise ValueError("total_truths must be non-negative")
    if total_truths == 0:
        return 1.0 if len(labels) == 0 else 0.0
    if len(labels) == 0:
        return 0.0
    recall, precision = pr_curve(labels, total_truths)
    if cfg.interpolation == "eleven_point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            ap += (above.max() if above.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    ap: float
    pr_points: list[tuple[float, float]]
    matches: dict[str, list[Match]]
    config: EvalConfig = field(default_factory=EvalConfig)
    total_truths: int = 0

    @property
    def map(self) -> float:
        return self.ap

    def to_json(self) -> dict:
        return {
            "ap": self.ap,
            "map": self.ap,
            "total_truths": self.total_truths,
            "pr_points": [[r, p] for r, p in self.pr_points],
            "config": asdict(self.config),
            "matches": {
                image: [
                    {
                        "box": m.detection.box.as_list(),
                        "score": m.detection.score,
                        "truth_index": m.truth_index,
                        "is_tp": m.is_tp,
                    }
                    for m in ms
                ]
                for image, ms in sorted(self.matches.items())
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def evaluate(
    predictions: Mapping[str, Sequence[Detection]],
    truths: Mapping[str, Sequence[BoundingBox]],
    cfg: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Pool matches over all images and compute the AP of the whole test set.

    Images present in ``truths`` but missing from ``predictions`` count as
    having no detections.
    """
    if not truths:
        raise EmptyDataset("cannot evaluate on an empty test set")
    unknown = sorted(set(predictions) - set(truths))
    if unknown:
        raise UnknownImageId(f"predictions for unknown images: {unknown[:5]}")
    matches = {}
    pooled = []
    for order, image in enumerate(sorted(truths)):
        ms = match_detections(list(predictions.get(image, [])), list(truths[image]), cfg.iou_threshold)
        matches[image] = ms
        pooled += [(-m.detection.score, order, k, m.is_tp) for k, m in enumerate(ms)]
    pooled.sort()
    labels = [p[3] for p in pooled]
    total = sum(len(t) for t in truths.values())
    recall, precision = pr_curve(labels, total)
    return EvalReport(
        ap=average_precision(labels, total, cfg),
        pr_points=[(float(r), float(p)) for r, p in zip(recall, precision)],
        matches=matches,
        config=cfg,
        total_truths=total,
    )
