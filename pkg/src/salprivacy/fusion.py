"""End-to-end hybrid: saliency added into the detector's three latent maps.

The saliency map is bilinearly rescaled to each latent resolution, lifted
from one channel to ``C_s`` channels (by a learned 1x1 convolution, or by
plain broadcasting) and added to the latent before the prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import detector as det
from . import saliency as sal
from .core import Detection, SaliencyMap
from .errors import MissingMasks, ShapeMismatch
from .layers import images_to_tensor
from .training import TrainConfig, TrainState, make_state, run_epochs

PROJECTIONS = ("learned_1x1", "broadcast_add")


@dataclass(frozen=True)
class FusionConfig:
    projection: str = "learned_1x1"
    detector_weight: float = 1.0
    saliency_weight: float = 1.0
    freeze_saliency: bool = False
    # keeps the zero-initialized projections at zero, reducing the hybrid to the detector
    freeze_projection: bool = False

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.detector_weight < 0 or self.saliency_weight < 0:
            raise ValueError("loss weights must be non-negative")


def rescale_tensor(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if tuple(x.shape[-2:]) == (h, w):
        return x
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


def rescale_map(m: SaliencyMap, target_h: int, target_w: int) -> SaliencyMap:
    """Bilinear resampling with half-pixel centers (corners not aligned)."""
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dimensions must be positive")
    src = torch.from_numpy(np.array(m.values))[None, None]
    out = rescale_tensor(src, target_h, target_w)[0, 0].numpy()
    return SaliencyMap(np.clip(out, m.values.min(), m.values.max()))


class Projection(nn.Module):
    """Lifts a ``(B, 1, h, w)`` map to ``channels`` feature channels."""

    def __init__(self, channels: int, mode: str):
        super().__init__()
        self.mode = mode
        self.channels = channels
        self.conv = nn.Conv2d(1, channels, 1) if mode == "learned_1x1" else None
        if self.conv is not None:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if self.conv is None:
            return m.expand(-1, self.channels, -1, -1)
        return self.conv(m)


def fuse(latents: Sequence[torch.Tensor], saliency: torch.Tensor, projections: Sequence[Projection]) -> list[torch.Tensor]:
    """Add the projected, rescaled saliency map into each latent map.

    ``saliency`` is ``(B, 1, H, W)`` at input resolution, values in [0, 1].
    """
    if len(latents) != len(projections):
        raise ShapeMismatch(f"{len(latents)} latents but {len(projections)} projections")
    out = []
    for lat, proj in zip(latents, projections):
        if lat.shape[1] != proj.channels or lat.shape[0] != saliency.shape[0]:
            raise ShapeMismatch(f"latent {tuple(lat.shape)} does not fit projection to {proj.channels} channels")
        out.append(lat + proj(rescale_tensor(saliency, lat.shape[-2], lat.shape[-1])))
    return out


class HybridModel(nn.Module):
    """Detector weights equal ``detector.build_model(det_cfg, seed)``."""

    def __init__(self, det_cfg: det.DetectorConfig, sal_cfg: sal.SaliencyNetConfig, fus_cfg: FusionConfig, seed: int = 0):
        super().__init__()
        if det_cfg.input_size != sal_cfg.input_size:
            raise ValueError("detector and saliency input sizes differ")
        self.det_cfg, self.sal_cfg, self.fus_cfg = det_cfg, sal_cfg, fus_cfg
        self.detector = det.build_model(det_cfg, seed)
        self.saliency = sal.build_model(sal_cfg, seed + 1)
        self.projections = nn.ModuleList(Projection(c, fus_cfg.projection) for c in det_cfg.latent_channels)

    @property
    def cfg(self) -> det.DetectorConfig:
        return self.det_cfg

    def forward(self, x: torch.Tensor):
        """Returns ``(raw_grids, fused_latents, saliency_logits)``."""
        sal_logits = self.saliency(x)
        smap = torch.sigmoid(sal_logits[0])
        fused = fuse(self.detector.latents(x), smap, self.projections)
        return self.detector.predict(fused), fused, sal_logits


def hybrid_forward(model: HybridModel, image: np.ndarray) -> tuple[list[Detection], SaliencyMap]:
    det.check_input(image, model.det_cfg.input_size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        raw, _, sal_logits = model(images_to_tensor(image, dtype))
    cfg = model.det_cfg
    dets = det.nms(det.decode(det.to_grids(raw, cfg), cfg), cfg.nms_iou_threshold)
    return dets, SaliencyMap(torch.sigmoid(sal_logits[0])[0, 0].double().numpy())


def joint_loss(model: HybridModel, images, truths, masks) -> torch.Tensor:
    fc = model.fus_cfg
    dtype = next(model.parameters()).dtype
    raw, _, sal_logits = model(images_to_tensor(images, dtype))
    total = fc.detector_weight * det.loss(raw, det.stack_targets([det.build_targets(t, model.det_cfg) for t in truths], dtype))
    if fc.saliency_weight > 0:
        if not model.sal_cfg.deep_supervision:
            sal_logits = sal_logits[:1]
        total = total + fc.saliency_weight * sal.saliency_loss(sal_logits, sal.masks_to_tensor(masks, dtype), logits=True)
    return total


def trainable_parameters(model: HybridModel) -> list[nn.Parameter]:
    fc = model.fus_cfg
    params = list(model.detector.parameters())
    if not fc.freeze_projection:
        params += list(model.projections.parameters())
    if not fc.freeze_saliency:
        params += list(model.saliency.parameters())
    return params


def train(
    samples,
    det_cfg: det.DetectorConfig,
    sal_cfg: sal.SaliencyNetConfig,
    fus_cfg: FusionConfig,
    epochs: int,
    seed: int,
    tcfg: TrainConfig = TrainConfig(),
    state: Optional[TrainState] = None,
) -> TrainState:
    """Joint training on ``(image, boxes, mask)`` triples with one optimizer."""
    if fus_cfg.saliency_weight > 0 and any(s[2] is None for s in samples):
        raise MissingMasks("saliency_weight > 0 needs a saliency mask for every sample")
    if state is None:
        model = HybridModel(det_cfg, sal_cfg, fus_cfg, seed)
        state = make_state(model, seed, tcfg, trainable_parameters(model))
    model = state.model
    for p in model.saliency.parameters():
        p.requires_grad_(not fus_cfg.freeze_saliency)
    for p in model.projections.parameters():
        p.requires_grad_(not fus_cfg.freeze_projection)
    for s in samples:
        det.check_input(s[0], det_cfg.input_size)

    def batch_loss(idx, rng):
        images, truths, masks = [], [], []
        for i in idx:
            image, boxes, mask = samples[i]
            if tcfg.hflip and rng.random() < 0.5:
                image, boxes, mask = det.hflip_sample(image, boxes, mask)
            images.append(image)
            truths.append(boxes)
            masks.append(mask)
        return joint_loss(model, images, truths, masks)

    return run_epochs(state, len(samples), epochs, tcfg.batch_size, batch_loss)


class HybridDetector:
    def __init__(self, model: HybridModel):
        self.model = model.eval()
        self.cfg = model.det_cfg

    def detect(self, image: np.ndarray) -> list[Detection]:
        return hybrid_forward(self.model, image)[0]

    def detect_with_saliency(self, image: np.ndarray) -> tuple[list[Detection], SaliencyMap]:
        return hybrid_forward(self.model, image)
