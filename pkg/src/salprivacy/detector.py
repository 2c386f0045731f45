"""Three-scale, single-class privacy-region detector in the YOLOv3 style.

Each scale predicts, per cell and anchor, five raw values
``(t_x, t_y, t_w, t_h, t_obj)``. With one class, objectness is the class
score. The latent feature maps feeding the three prediction heads are part of
the public surface: the hybrid model adds saliency into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox, Detection, check_image, clip_box, iou
from .errors import ConfigMismatch, DegenerateTruth
from .layers import ConvAct, images_to_tensor
from .training import TrainConfig, TrainState, make_state, run_epochs, seed_everything

STRIDES = (8, 16, 32)
DEFAULT_ANCHORS = (
    ((16, 16), (24, 12), (12, 24)),
    ((32, 32), (48, 24), (24, 48)),
    ((64, 64), (96, 48), (48, 96)),
)


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 256
    strides: tuple[int, ...] = STRIDES
    anchors_per_scale: int = 3
    anchor_sizes: tuple = DEFAULT_ANCHORS
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.5
    # stem, stride-4 stage, then the latent widths at strides 8, 16, 32
    widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    ignore_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(
            self, "anchor_sizes", tuple(tuple(tuple(float(v) for v in a) for a in s) for s in self.anchor_sizes)
        )
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.strides != STRIDES:
            raise ValueError(f"the backbone taps strides {STRIDES}, got {self.strides}")
        if any(self.input_size % s for s in self.strides):
            raise ValueError(f"input_size {self.input_size} not divisible by strides {self.strides}")
        if len(self.anchor_sizes) != len(self.strides):
            raise ValueError("need one anchor list per scale")
        for per_scale in self.anchor_sizes:
            if len(per_scale) != self.anchors_per_scale:
                raise ValueError("anchor list length must equal anchors_per_scale")
            if any(w <= 0 or h <= 0 for w, h in per_scale):
                raise ValueError("anchor sizes must be positive")
        if len(self.widths) != 5:
            raise ValueError("widths must list 5 channel counts")
        for name in ("conf_threshold", "nms_iou_threshold", "ignore_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def latent_channels(self) -> tuple[int, int, int]:
        return self.widths[2], self.widths[3], self.widths[4]

    def grid_size(self, scale: int) -> int:
        return self.input_size // self.strides[scale]


@dataclass
class ScaleGrid:
    """Raw predictions of one scale, shaped ``(anchors, grid_h, grid_w, 5)``."""

    stride: int
    anchors: tuple
    raw: np.ndarray

    @property
    def grid_h(self) -> int:
        return self.raw.shape[1]

    @property
    def grid_w(self) -> int:
        return self.raw.shape[2]


class RegionDetector(Protocol):
    """Anything that proposes privacy regions for an input-size image."""

    def detect(self, image: np.ndarray) -> list[Detection]: ...


OBJECTNESS_PRIOR = 0.01


class Head(nn.Sequential):
    def __init__(self, channels: int, n_anchors: int):
        super().__init__(ConvAct(channels, channels, 3), nn.Conv2d(channels, n_anchors * 5, 1))
        # start with rare objectness so the many negatives do not swamp early updates
        with torch.no_grad():
            self[1].bias.view(n_anchors, 5)[:, 4].fill_(math.log(OBJECTNESS_PRIOR / (1 - OBJECTNESS_PRIOR)))


class TinyYolo(nn.Module):
    """Strided conv backbone with a top-down path and three prediction heads."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Sequential(ConvAct(3, w[0], 3, 2), ConvAct(w[0], w[1], 3, 2))
        self.stage8 = nn.Sequential(ConvAct(w[1], w[2], 3, 2), ConvAct(w[2], w[2], 3))
        self.stage16 = nn.Sequential(ConvAct(w[2], w[3], 3, 2), ConvAct(w[3], w[3], 3))
        self.stage32 = nn.Sequential(ConvAct(w[3], w[4], 3, 2), ConvAct(w[4], w[4], 3))
        self.merge16 = ConvAct(w[3] + w[4], w[3], 3)
        self.merge8 = ConvAct(w[2] + w[3], w[2], 3)
        self.heads = nn.ModuleList(Head(c, cfg.anchors_per_scale) for c in cfg.latent_channels)

    def latents(self, x: torch.Tensor) -> list[torch.Tensor]:
        c8 = self.stage8(self.stem(x))
        c16 = self.stage16(c8)
        c32 = self.stage32(c16)
        p16 = self.merge16(torch.cat([c16, F.interpolate(c32, scale_factor=2.0, mode="nearest")], 1))
        p8 = self.merge8(torch.cat([c8, F.interpolate(p16, scale_factor=2.0, mode="nearest")], 1))
        return [p8, p16, c32]

    def predict(self, latents: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Heads only: returns per-scale tensors shaped ``(B, A, H, W, 5)``."""
        out = []
        for head, lat in zip(self.heads, latents):
            r = head(lat)
            b, _, h, w = r.shape
            out.append(r.view(b, self.cfg.anchors_per_scale, 5, h, w).permute(0, 1, 3, 4, 2))
        return out

    def forward(self, x: torch.Tensor):
        lat = self.latents(x)
        return self.predict(lat), lat


def check_input(image: np.ndarray, size: int) -> np.ndarray:
    image = check_image(image)
    if image.shape[:2] != (size, size):
        raise ConfigMismatch(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    return image


def to_grids(raw: Sequence[torch.Tensor], cfg: DetectorConfig, index: int = 0) -> list[ScaleGrid]:
    return [
        ScaleGrid(cfg.strides[s], cfg.anchor_sizes[s], r[index].detach().cpu().double().numpy())
        for s, r in enumerate(raw)
    ]


def forward(model: TinyYolo, image: np.ndarray) -> tuple[list[ScaleGrid], list[torch.Tensor]]:
    """Run one image; returns the three grids and the latent maps."""
    cfg = model.cfg
    check_input(image, cfg.input_size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        raw, lat = model(images_to_tensor(image, dtype))
    return to_grids(raw, cfg), lat


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode(grids: Sequence[ScaleGrid], cfg: DetectorConfig) -> list[Detection]:
    size = cfg.input_size
    dets = []
    for g in grids:
        raw = np.asarray(g.raw, dtype=np.float64)
        scores = _sigmoid(raw[..., 4])
        anchors = np.asarray(g.anchors, dtype=np.float64)
        for a, row, col in zip(*np.nonzero(scores >= cfg.conf_threshold)):
            tx, ty, tw, th, _ = raw[a, row, col]
            cx = (col + _sigmoid(tx)) * g.stride
            cy = (row + _sigmoid(ty)) * g.stride
            w = anchors[a, 0] * math.exp(min(tw, 20.0))
            h = anchors[a, 1] * math.exp(min(th, 20.0))
            box = clip_box(BoundingBox.from_center(cx, cy, w, h), size, size)
            if box is not None:
                dets.append(Detection(box, float(scores[a, row, col])))
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    order = sorted(dets, key=lambda d: (-d.score, d.box.x_min, d.box.y_min))
    kept: list[Detection] = []
    for d in order:
        if all(iou(d.box, k.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------- targets


def _centered_iou(w1, h1, w2, h2):
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def _box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between rows of ``a`` (N, 4) and ``b`` (M, 4) in corner format."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class Assignment:
    """Where one truth box lives in the prediction grids and what it should predict."""

    scale: int
    anchor: int
    row: int
    col: int
    # in-cell center offsets and log size ratios
    target: tuple[float, float, float, float]


def assign(box: BoundingBox, cfg: DetectorConfig) -> Assignment:
    """Best-shape anchor over all scales; owning cell holds the box center."""
    best, best_iou = None, -1.0
    for s, per_scale in enumerate(cfg.anchor_sizes):
        for a, (aw, ah) in enumerate(per_scale):
            v = _centered_iou(box.width, box.height, aw, ah)
            if v > best_iou:
                best, best_iou = (s, a), v
    s, a = best
    stride, n = cfg.strides[s], cfg.grid_size(s)
    cx, cy = box.center
    col = min(int(math.floor(cx / stride)), n - 1)
    row = min(int(math.floor(cy / stride)), n - 1)
    aw, ah = cfg.anchor_sizes[s][a]
    target = (cx / stride - col, cy / stride - row, math.log(box.width / aw), math.log(box.height / ah))
    return Assignment(s, a, row, col, target)


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def encode(box: BoundingBox, cfg: DetectorConfig, grids: Optional[list[ScaleGrid]] = None, t_obj: float = 10.0):
    """Write the raw values that decode back to ``box`` into ``grids``.

    Fresh grids with very negative objectness are created when none are
    given. Returns ``(grids, assignment)``.
    """
    if grids is None:
        grids = [
            ScaleGrid(
                cfg.strides[s],
                cfg.anchor_sizes[s],
                np.concatenate(
                    [np.zeros((cfg.anchors_per_scale, n, n, 4)), np.full((cfg.anchors_per_scale, n, n, 1), -30.0)],
                    axis=-1,
                ),
            )
            for s, n in enumerate(cfg.grid_size(s) for s in range(len(cfg.strides)))
        ]
    asg = assign(box, cfg)
    ox, oy, lw, lh = asg.target
    grids[asg.scale].raw[asg.anchor, asg.row, asg.col] = (_logit(ox), _logit(oy), lw, lh, t_obj)
    return grids, asg


def prior_boxes(cfg: DetectorConfig, scale: int) -> np.ndarray:
    """Anchor boxes centered in every cell, shape ``(A, n, n, 4)``."""
    n, stride = cfg.grid_size(scale), cfg.strides[scale]
    centers = (np.arange(n) + 0.5) * stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    out = np.empty((cfg.anchors_per_scale, n, n, 4))
    for a, (aw, ah) in enumerate(cfg.anchor_sizes[scale]):
        out[a] = np.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], axis=-1)
    return out


@dataclass
class ScaleTargets:
    positive: np.ndarray  # (A, n, n) bool
    negative: np.ndarray  # (A, n, n) bool
    coords: np.ndarray  # (A, n, n, 4)


def build_targets(truth: Sequence[BoundingBox], cfg: DetectorConfig) -> list[ScaleTargets]:
    """Objectness and regression targets of one image.

    Anchors whose cell-centered prior overlaps a truth box with IoU of at
    least ``cfg.ignore_iou`` and that are not positives are left out of the
    objectness loss.
    """
    size = cfg.input_size
    boxes = []
    for b in truth:
        c = clip_box(b, size, size)
        if c is None:
            raise DegenerateTruth(f"{b} has no area inside the {size}x{size} frame")
        boxes.append(c)
    truth_arr = np.array([b.as_list() for b in boxes]).reshape(-1, 4)
    out = []
    for s in range(len(cfg.strides)):
        n = cfg.grid_size(s)
        priors = prior_boxes(cfg, s)
        if len(boxes):
            overlap = _box_iou_matrix(priors.reshape(-1, 4), truth_arr).max(axis=1).reshape(priors.shape[:3])
        else:
            overlap = np.zeros(priors.shape[:3])
        out.append(
            ScaleTargets(
                positive=np.zeros((cfg.anchors_per_scale, n, n), dtype=bool),
                negative=overlap < cfg.ignore_iou,
                coords=np.zeros((cfg.anchors_per_scale, n, n, 4)),
            )
        )
    for b in boxes:
        asg = assign(b, cfg)
        t = out[asg.scale]
        t.positive[asg.anchor, asg.row, asg.col] = True
        t.negative[asg.anchor, asg.row, asg.col] = False
        t.coords[asg.anchor, asg.row, asg.col] = asg.target
    return out


def stack_targets(per_image: Sequence[list[ScaleTargets]], dtype=torch.float32):
    """Batch per-image targets into per-scale ``(pos, neg, coords)`` tensors."""
    batched = []
    for s in range(len(per_image[0])):
        pos = torch.from_numpy(np.stack([t[s].positive for t in per_image]))
        neg = torch.from_numpy(np.stack([t[s].negative for t in per_image]))
        coords = torch.from_numpy(np.stack([t[s].coords for t in per_image])).to(dtype)
        batched.append((pos, neg, coords))
    return batched


def loss(raw: Sequence[torch.Tensor], targets) -> torch.Tensor:
    """Objectness BCE plus squared coordinate error, averaged over the batch.

    ``raw`` are the ``(B, A, H, W, 5)`` head outputs; ``targets`` comes from
    :func:`stack_targets`.
    """
    total = raw[0].new_zeros(())
    batch = raw[0].shape[0]
    for r, (pos, neg, coords) in zip(raw, targets):
        obj = r[..., 4]
        total = total + F.binary_cross_entropy_with_logits(obj[pos], torch.ones_like(obj[pos]), reduction="sum")
        total = total + F.binary_cross_entropy_with_logits(obj[neg], torch.zeros_like(obj[neg]), reduction="sum")
        p = r[pos]
        if p.shape[0]:
            t = coords[pos]
            total = total + ((torch.sigmoid(p[:, :2]) - t[:, :2]) ** 2).sum()
            total = total + ((p[:, 2:4] - t[:, 2:4]) ** 2).sum()
    return total / batch


def image_loss(model: TinyYolo, images, truths: Sequence[Sequence[BoundingBox]]) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    raw, _ = model(images_to_tensor(images, dtype))
    return loss(raw, stack_targets([build_targets(t, model.cfg) for t in truths], dtype))


# ---------------------------------------------------------------- training


def hflip_sample(image: np.ndarray, boxes: Sequence[BoundingBox], mask: Optional[np.ndarray] = None):
    w = image.shape[1]
    flipped = [BoundingBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max) for b in boxes]
    return image[:, ::-1], flipped, (None if mask is None else mask[:, ::-1])


def build_model(cfg: DetectorConfig, seed: int) -> TinyYolo:
    seed_everything(seed)
    return TinyYolo(cfg)


def train(
    samples,
    cfg: DetectorConfig,
    epochs: int,
    seed: int,
    tcfg: TrainConfig = TrainConfig(),
    state: Optional[TrainState] = None,
) -> TrainState:
    """Train (or continue training) the detector.

    ``samples`` is a sequence of ``(image, boxes)`` pairs at input size.
    """
    if state is None:
        state = make_state(build_model(cfg, seed), seed, tcfg)
    model = state.model
    for image, _ in samples:
        check_input(image, cfg.input_size)

    def batch_loss(idx, rng):
        images, truths = [], []
        for i in idx:
            image, boxes = samples[i][0], samples[i][1]
            if tcfg.hflip and rng.random() < 0.5:
                image, boxes, _ = hflip_sample(image, boxes)
            images.append(image)
            truths.append(boxes)
        return image_loss(model, images, truths)

    return run_epochs(state, len(samples), epochs, tcfg.batch_size, batch_loss)


class Detector:
    """Trained detector bundled with its config; implements ``RegionDetector``."""

    def __init__(self, model: TinyYolo):
        self.model = model.eval()
        self.cfg = model.cfg

    def detect(self, image: np.ndarray) -> list[Detection]:
        grids, _ = forward(self.model, image)
        return nms(decode(grids, self.cfg), self.cfg.nms_iou_threshold)
