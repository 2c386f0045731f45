"""Dataset manifests, the train/test split, letterboxing and synthetic scenes.

Manifest format (JSON lines, paths relative to the manifest's directory)::

    {"format": "salprivacy-manifest", "version": 1}
    {"image": "images/00000.png", "width": 128, "height": 128,
     "boxes": [[x_min, y_min, x_max, y_max], ...], "saliency_mask": "masks/00000.png"}

The header line is optional on read; ``saliency_mask`` is optional.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .core import BoundingBox, SaliencyMap, clip_box, iou, mean_saliency, region_slices
from .errors import EmptyDataset, InvalidBox, MissingImage, ParseError, PlacementFailure

MANIFEST_FORMAT = "salprivacy-manifest"
MANIFEST_VERSION = 1
PAD_VALUE = 128


@dataclass
class AnnotationRecord:
    image_path: Path
    width: int
    height: int
    boxes: list[BoundingBox]
    saliency_mask_path: Optional[Path] = None

    def load_image(self) -> np.ndarray:
        return read_rgb(self.image_path)

    def load_mask(self) -> Optional[np.ndarray]:
        if self.saliency_mask_path is None:
            return None
        return (np.asarray(Image.open(self.saliency_mask_path).convert("L")) >= 128).astype(np.float64)


# ---------------------------------------------------------------- image io


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.ascontiguousarray(array)).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_saliency_png(path, m: SaliencyMap) -> None:
    write_png(path, np.round(m.values * 255.0).astype(np.uint8))


def load_saliency_png(path) -> SaliencyMap:
    with Image.open(path) as im:
        return SaliencyMap(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- manifests


def _parse_box(raw, width, height, line_no) -> BoundingBox:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise ParseError(line_no, f"box must be [x_min, y_min, x_max, y_max], got {raw!r}")
    try:
        box = BoundingBox(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise InvalidBox(f"line {line_no}: {exc}") from exc
    clipped = clip_box(box, width, height)
    if clipped is None:
        raise InvalidBox(f"line {line_no}: {raw} lies outside the {width}x{height} image")
    return clipped


def load_dataset(manifest_path) -> list[AnnotationRecord]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = []
    for line_no, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ParseError(line_no, "record must be a JSON object")
        if "format" in obj:
            if obj["format"] != MANIFEST_FORMAT or obj.get("version") != MANIFEST_VERSION:
                raise ParseError(line_no, f"unsupported manifest header {obj}")
            continue
        try:
            image, width, height, boxes = obj["image"], int(obj["width"]), int(obj["height"]), obj["boxes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_no, f"missing or malformed field: {exc}") from exc
        if width <= 0 or height <= 0:
            raise ParseError(line_no, "image dimensions must be positive")
        if not isinstance(boxes, list):
            raise ParseError(line_no, "boxes must be a list")
        image_path = root / image
        if not image_path.is_file():
            raise MissingImage(image_path)
        mask_path = None
        if obj.get("saliency_mask") is not None:
            mask_path = root / obj["saliency_mask"]
            if not mask_path.is_file():
                raise MissingImage(mask_path)
        records.append(
            AnnotationRecord(
                image_path=image_path,
                width=width,
                height=height,
                boxes=[_parse_box(b, width, height, line_no) for b in boxes],
                saliency_mask_path=mask_path,
            )
        )
    return records


def record_to_json(rec: AnnotationRecord, root: Path) -> dict:
    out = {
        "image": Path(os.path.relpath(rec.image_path, root)).as_posix(),
        "width": rec.width,
        "height": rec.height,
        "boxes": [b.as_list() for b in rec.boxes],
    }
    if rec.saliency_mask_path is not None:
        out["saliency_mask"] = Path(os.path.relpath(rec.saliency_mask_path, root)).as_posix()
    return out


def write_manifest(records: Sequence[AnnotationRecord], manifest_path) -> None:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION})]
    lines += [json.dumps(record_to_json(r, root)) for r in records]
    atomic_write_text(manifest_path, "\n".join(lines) + "\n")


def image_id(rec: AnnotationRecord, root) -> str:
    """Stable identifier of a record: its image path relative to ``root``."""
    return Path(os.path.relpath(rec.image_path, root)).as_posix()


# ---------------------------------------------------------------- split


def split(records: Sequence, train_fraction: float = 0.8, seed: int = 0):
    if len(records) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in [0, 1]")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    # round half up so 0.8 * N behaves like the arithmetic suggests
    n_train = int(math.floor(train_fraction * n + 0.5))
    return [records[i] for i in order[:n_train]], [records[i] for i in order[n_train:]]


# ---------------------------------------------------------------- letterbox


@dataclass(frozen=True)
class Letterbox:
    """Maps original-image pixel coordinates to the padded square input."""

    scale: float
    pad_x: float
    pad_y: float
    width: int
    height: int
    size: int

    @classmethod
    def fit(cls, width: int, height: int, size: int) -> "Letterbox":
        scale = min(size / width, size / height)
        new_w, new_h = round(width * scale), round(height * scale)
        return cls(scale, (size - new_w) // 2, (size - new_h) // 2, width, height, size)

    @property
    def inner(self) -> tuple[int, int]:
        return round(self.width * self.scale), round(self.height * self.scale)

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return image
        new_w, new_h = self.inner
        resized = np.asarray(Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR))
        out = np.full((self.size, self.size, 3), PAD_VALUE, dtype=np.uint8)
        out[int(self.pad_y):int(self.pad_y) + new_h, int(self.pad_x):int(self.pad_x) + new_w] = resized
        return out

    @property
    def is_identity(self) -> bool:
        return self.width == self.size and self.height == self.size

    def to_input(self, b: BoundingBox) -> BoundingBox:
        s = self.scale
        return BoundingBox(b.x_min * s + self.pad_x, b.y_min * s + self.pad_y, b.x_max * s + self.pad_x, b.y_max * s + self.pad_y)

    def to_original(self, b: BoundingBox) -> Optional[BoundingBox]:
        s = self.scale
        box = BoundingBox(
            (b.x_min - self.pad_x) / s, (b.y_min - self.pad_y) / s, (b.x_max - self.pad_x) / s, (b.y_max - self.pad_y) / s
        )
        return clip_box(box, self.width, self.height)

    def map_to_original(self, m: SaliencyMap) -> SaliencyMap:
        """Crop the padding off an input-size map and resize it to the original frame."""
        if self.is_identity:
            return m
        from .fusion import rescale_map

        new_w, new_h = self.inner
        x0, y0 = int(self.pad_x), int(self.pad_y)
        return rescale_map(SaliencyMap(m.values[y0:y0 + new_h, x0:x0 + new_w]), self.height, self.width)


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneConfig:
    canvas: int = 128
    salient_count: tuple[int, int] = (1, 2)
    privacy_count: tuple[int, int] = (1, 3)
    # privacy-like patches painted inside salient objects; salient, so unlabeled
    decoy_count: tuple[int, int] = (1, 2)
    # fraction of scenes that receive decoys at all
    decoy_rate: float = 1.0
    salient_size: tuple[float, float] = (0.3, 0.5)
    privacy_size: tuple[int, int] = (12, 32)
    max_overlap: float = 0.1
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("salient_count", "privacy_count", "decoy_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (low, high) range")
        if not 0.0 <= self.decoy_rate <= 1.0:
            raise ValueError("decoy_rate must lie in [0, 1]")
        if self.canvas < 64:
            raise ValueError("canvas must be at least 64 pixels")
        lo, hi = self.privacy_size
        if lo < 4 or hi < lo:
            raise ValueError("privacy_size must be a (low, high) range of at least 4 pixels")


@dataclass
class SyntheticScene:
    image: np.ndarray
    boxes: list[BoundingBox]
    mask: np.ndarray
    salient_boxes: list[BoundingBox] = field(default_factory=list)
    decoy_boxes: list[BoundingBox] = field(default_factory=list)


def _overlaps(box: BoundingBox, others: Sequence[BoundingBox]) -> bool:
    return any(
        min(box.x_max, o.x_max) > max(box.x_min, o.x_min) and min(box.y_max, o.y_max) > max(box.y_min, o.y_min)
        for o in others
    )


def _place(rng, w: int, h: int, lo, hi, accept, retries: int, origin=(0, 0)) -> BoundingBox:
    """Random integer box of size in ``[lo, hi]`` inside ``origin + [0, w] x [0, h]``."""
    for _ in range(retries):
        bw, bh = int(rng.integers(lo[0], hi[0] + 1)), int(rng.integers(lo[1], hi[1] + 1))
        if bw > w or bh > h:
            continue
        x = int(rng.integers(0, w - bw + 1)) + origin[0]
        y = int(rng.integers(0, h - bh + 1)) + origin[1]
        box = BoundingBox(x, y, x + bw, y + bh)
        if accept(box):
            return box
    raise PlacementFailure(f"could not place a region after {retries} attempts")


def _paint_text(image, box: BoundingBox, rng, base: float) -> None:
    """Low-contrast text-like rows of dashes on a slightly lighter card."""
    rows, cols = region_slices(box, image.shape[1], image.shape[0])
    h, w = rows.stop - rows.start, cols.stop - cols.start
    card = np.full((h, w), base + 18.0)
    pitch = int(rng.integers(3, 5))
    for r in range(1, h - 1, pitch):
        c = 1
        while c < w - 1:
            run = int(rng.integers(2, 7))
            card[r:r + max(1, pitch // 2), c:min(c + run, w - 1)] = base - 22.0
            c += run + int(rng.integers(1, 3))
    tint = rng.uniform(-4, 4, size=3)
    image[rows, cols] = np.clip(card[..., None] + tint, 0, 255)


def _saturated_color(rng, background: float) -> np.ndarray:
    while True:
        color = rng.integers(0, 256, size=3).astype(np.float64)
        color[rng.integers(3)] = rng.choice([rng.uniform(0, 40), rng.uniform(215, 255)])
        if np.abs(color - background).max() > 90 and color.max() - color.min() > 100:
            return color


def render_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> SyntheticScene:
    size = cfg.canvas
    background = float(rng.uniform(90, 160))
    image = np.full((size, size, 3), background) + rng.normal(0.0, 3.0, size=(size, size, 3))
    mask = np.zeros((size, size))

    salient: list[BoundingBox] = []
    lo_s = int(cfg.salient_size[0] * size)
    hi_s = max(int(cfg.salient_size[1] * size), lo_s)
    for _ in range(int(rng.integers(cfg.salient_count[0], cfg.salient_count[1] + 1))):
        box = _place(
            rng, size, size, (lo_s, lo_s), (hi_s, hi_s),
            lambda b: all(iou(b, o) <= cfg.max_overlap for o in salient), cfg.max_retries,
        )
        salient.append(box)
        rows, cols = region_slices(box, size, size)
        image[rows, cols] = _saturated_color(rng, background) + rng.normal(0.0, 3.0, size=3)
        mask[rows, cols] = 1.0

    decoys: list[BoundingBox] = []
    lo_p, hi_p = cfg.privacy_size
    n_decoys = int(rng.integers(cfg.decoy_count[0], cfg.decoy_count[1] + 1))
    if salient and rng.random() < cfg.decoy_rate:
        for _ in range(n_decoys):
            host = salient[int(rng.integers(len(salient)))]
            margin = 3
            inner_w, inner_h = int(host.width) - 2 * margin, int(host.height) - 2 * margin
            if inner_w < lo_p or inner_h < lo_p:
                continue
            ox, oy = host.x_min + margin, host.y_min + margin
            try:
                box = _place(
                    rng, inner_w, inner_h, (lo_p, lo_p), (min(hi_p, inner_w), min(hi_p, inner_h)),
                    lambda b: all(iou(b, o) <= cfg.max_overlap for o in decoys), cfg.max_retries, origin=(ox, oy),
                )
            except PlacementFailure:
                # a crowded host just gets fewer decoys
                continue
            decoys.append(box)
            _paint_text(image, box, rng, background)

    privacy: list[BoundingBox] = []
    for _ in range(int(rng.integers(cfg.privacy_count[0], cfg.privacy_count[1] + 1))):
        box = _place(
            rng, size, size, (lo_p, lo_p), (hi_p, hi_p),
            lambda b: not _overlaps(b, salient) and all(iou(b, o) <= cfg.max_overlap for o in privacy),
            cfg.max_retries,
        )
        privacy.append(box)
        _paint_text(image, box, rng, background)

    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return SyntheticScene(image, privacy, mask, salient, decoys)


def check_scene(scene: SyntheticScene) -> None:
    """Assert the saliency/privacy exclusivity the generator promises."""
    m = SaliencyMap(scene.mask)
    for b in scene.boxes:
        assert mean_saliency(m, b) == 0.0, f"privacy box {b} overlaps a salient object"
    for b in scene.salient_boxes:
        assert mean_saliency(m, b) >= 0.9, f"salient box {b} is not salient"


def generate_synthetic(cfg: SyntheticSceneConfig, n_scenes: int) -> list[SyntheticScene]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    rng = np.random.default_rng(cfg.seed)
    scenes = []
    for _ in range(n_scenes):
        scene = render_scene(cfg, rng)
        check_scene(scene)
        scenes.append(scene)
    return scenes


def write_synthetic(scenes: Sequence[SyntheticScene], out_dir) -> Path:
    """Write images, masks and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = []
    for i, scene in enumerate(scenes):
        image_path = out_dir / "images" / f"{i:05d}.png"
        mask_path = out_dir / "masks" / f"{i:05d}.png"
        write_png(image_path, scene.image)
        write_png(mask_path, (scene.mask * 255).astype(np.uint8))
        h, w = scene.mask.shape
        records.append(AnnotationRecord(image_path, w, h, list(scene.boxes), mask_path))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def prepare(rec: AnnotationRecord, size: int):
    """Letterboxed ``(image, boxes, mask, letterbox)`` of one record at input size."""
    lb = Letterbox.fit(rec.width, rec.height, size)
    image = lb.apply(rec.load_image())
    boxes = [clip_box(lb.to_input(b), size, size) for b in rec.boxes]
    mask = rec.load_mask()
    if mask is not None and not lb.is_identity:
        padded = np.zeros((size, size))
        new_w, new_h = lb.inner
        resized = np.asarray(Image.fromarray((mask * 255).astype(np.uint8)).resize((new_w, new_h), Image.NEAREST))
        padded[int(lb.pad_y):int(lb.pad_y) + new_h, int(lb.pad_x):int(lb.pad_x) + new_w] = resized >= 128
        mask = padded
    return image, [b for b in boxes if b is not None], mask, lb
