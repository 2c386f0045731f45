"""Manifest-level operations and the predictions file format.

Predictions file (JSON lines, one record per image, raw and gated alike)::

    {"image": "images/00007.png", "width": 128, "height": 128,
     "detections": [{"box": [x_min, y_min, x_max, y_max], "score": 0.91}, ...],
     "saliency": "preds_saliency/images__00007.png"}

``image`` is the image path relative to the manifest directory and serves as
the image id; boxes are in original-image pixels. ``saliency`` is optional
and relative to the predictions file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from . import detector as det
from . import fusion as fus
from . import saliency as sal
from .core import BoundingBox, Detection, SaliencyMap
from .data import AnnotationRecord, atomic_write_text, image_id, load_saliency_png, prepare, save_saliency_png
from .errors import MissingMasks, ParseError
from .evaluation import EvalConfig, EvalReport, evaluate
from .gate import GateConfig, GateDecision, gate


@dataclass
class ImagePrediction:
    image: str
    width: int
    height: int
    detections: list[Detection]
    saliency: Optional[str] = None

    def to_json(self) -> dict:
        out = {
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "detections": [{"box": d.box.as_list(), "score": d.score} for d in self.detections],
        }
        if self.saliency is not None:
            out["saliency"] = self.saliency
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ImagePrediction":
        return cls(
            image=obj["image"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            detections=[Detection(BoundingBox(*d["box"]), float(d["score"])) for d in obj["detections"]],
            saliency=obj.get("saliency"),
        )


def write_predictions(path, preds: Iterable[ImagePrediction]) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_json()) + "\n" for p in preds))


def read_predictions(path) -> list[ImagePrediction]:
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(ImagePrediction.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_no, str(exc)) from exc
    return out


def saliency_filename(image: str) -> str:
    return image.replace("/", "__").rsplit(".", 1)[0] + ".png"


# ---------------------------------------------------------------- samples


def detector_samples(records: Sequence[AnnotationRecord], size: int):
    return [prepare(r, size)[:2] for r in records]


def saliency_samples(records: Sequence[AnnotationRecord], size: int):
    out = []
    for r in records:
        image, _, mask, _ = prepare(r, size)
        if mask is None:
            raise MissingMasks(f"{r.image_path} has no saliency mask")
        out.append((image, mask))
    return out


def hybrid_samples(records: Sequence[AnnotationRecord], size: int):
    return [prepare(r, size)[:3] for r in records]


# ---------------------------------------------------------------- prediction


def predict_records(
    model,
    records: Sequence[AnnotationRecord],
    root,
    saliency_model: Optional[sal.SaliencyNet] = None,
    saliency_dir: Optional[Path] = None,
    saliency_ref_root: Optional[Path] = None,
) -> list[ImagePrediction]:
    """Detect privacy regions in every record, in original-image pixels.

    ``model`` is a detector or hybrid model. Saliency maps (the hybrid's own,
    or ``saliency_model``'s for a plain detector) are written to
    ``saliency_dir`` when it is given.
    """
    size = model.cfg.input_size
    out = []
    for rec in records:
        image, _, _, lb = prepare(rec, size)
        smap = None
        if isinstance(model, fus.HybridModel):
            dets, smap = fus.hybrid_forward(model, image)
        else:
            dets = det.Detector(model).detect(image)
            if saliency_model is not None:
                smap = sal.saliency_forward(saliency_model, image)
        mapped = []
        for d in dets:
            box = lb.to_original(d.box)
            if box is not None:
                mapped.append(Detection(box, d.score))
        ident = image_id(rec, root)
        ref = None
        if smap is not None and saliency_dir is not None:
            path = Path(saliency_dir) / saliency_filename(ident)
            save_saliency_png(path, lb.map_to_original(smap))
            base = saliency_ref_root if saliency_ref_root is not None else Path(saliency_dir).parent
            ref = path.relative_to(base).as_posix() if path.is_relative_to(base) else str(path)
        out.append(ImagePrediction(ident, rec.width, rec.height, mapped, ref))
    return out


def gate_predictions(
    preds: Sequence[ImagePrediction],
    saliency_for: "callable",
    cfg: GateConfig = GateConfig(),
) -> tuple[list[ImagePrediction], list[tuple[str, GateDecision]]]:
    """Apply the manual threshold per image; ``saliency_for(pred)`` returns its map."""
    kept, log = [], []
    for p in preds:
        decisions = gate(p.detections, saliency_for(p), cfg, image_size=(p.width, p.height))
        log += [(p.image, d) for d in decisions]
        kept.append(ImagePrediction(p.image, p.width, p.height, [d.detection for d in decisions if d.kept], p.saliency))
    return kept, log


def saliency_loader(saliency_dir: Optional[Path] = None, predictions_root: Optional[Path] = None):
    def load(p: ImagePrediction) -> SaliencyMap:
        if saliency_dir is not None:
            return load_saliency_png(Path(saliency_dir) / saliency_filename(p.image))
        if p.saliency is None:
            raise FileNotFoundError(f"no saliency map recorded for {p.image}")
        return load_saliency_png(Path(predictions_root or ".") / p.saliency)

    return load


def decision_log_lines(log) -> str:
    return "".join(
        json.dumps(
            {
                "image": image,
                "box": d.detection.box.as_list(),
                "score": d.detection.score,
                "mean_saliency": d.mean_saliency,
                "kept": d.kept,
                "empty_region": d.empty_region,
            }
        )
        + "\n"
        for image, d in log
    )


def evaluate_predictions(
    preds: Sequence[ImagePrediction], records: Sequence[AnnotationRecord], root, cfg: EvalConfig = EvalConfig()
) -> EvalReport:
    truths = {image_id(r, root): r.boxes for r in records}
    return evaluate({p.image: p.detections for p in preds}, truths, cfg)


def set_threads(n: int = 1) -> None:
    torch.set_num_threads(max(1, n))
