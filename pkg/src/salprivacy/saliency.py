"""Tiny nested-U saliency network with deep supervision.

A plain U-structure with one residual block per level: a toy-scale
simplification of U^2-Net's residual U-blocks. The final map and every
side output are per-pixel sigmoids at the full input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import SaliencyMap
from .detector import check_input, hflip_sample
from .errors import ShapeMismatch
from .layers import ConvAct, ResidualBlock, images_to_tensor
from .training import TrainConfig, TrainState, make_state, run_epochs, seed_everything


@dataclass(frozen=True)
class SaliencyNetConfig:
    input_size: int = 256
    depth: int = 3
    base_channels: int = 16
    deep_supervision: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.input_size % (2**self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{self.depth}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** min(level, self.depth - 1)


class SaliencyNet(nn.Module):
    def __init__(self, cfg: SaliencyNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.channels(i) for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList([nn.Sequential(ConvAct(3, ch[0]), ResidualBlock(ch[0]))])
        for i in range(1, cfg.depth + 1):
            self.encoders.append(nn.Sequential(ConvAct(ch[i - 1], ch[i], 3, 2), ResidualBlock(ch[i])))
        # decoders[i] produces level i from level i + 1
        self.decoders = nn.ModuleList(
            nn.Sequential(ConvAct(ch[i] + ch[i + 1], ch[i]), ResidualBlock(ch[i])) for i in range(cfg.depth)
        )
        self.out = nn.Conv2d(ch[0], 1, 1)
        self.sides = nn.ModuleList(nn.Conv2d(ch[i], 1, 1) for i in range(1, cfg.depth + 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Logits at full resolution: the final map first, then side outputs."""
        size = x.shape[-2:]
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        levels = {self.cfg.depth: x}
        for i in reversed(range(self.cfg.depth)):
            up = F.interpolate(x, size=skips[i].shape[-2:], mode="bilinear", align_corners=False)
            x = self.decoders[i](torch.cat([skips[i], up], 1))
            levels[i] = x
        outputs = [self.out(x)]
        if self.cfg.deep_supervision:
            for i, side in enumerate(self.sides, start=1):
                outputs.append(F.interpolate(side(levels[i]), size=size, mode="bilinear", align_corners=False))
        return outputs


def build_model(cfg: SaliencyNetConfig, seed: int) -> SaliencyNet:
    seed_everything(seed)
    return SaliencyNet(cfg)


def saliency_forward(model: SaliencyNet, image: np.ndarray) -> SaliencyMap:
    check_input(image, model.cfg.input_size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits = model(images_to_tensor(image, dtype))[0]
    return SaliencyMap(torch.sigmoid(logits)[0, 0].double().numpy())


def side_outputs(model: SaliencyNet, image: np.ndarray) -> list[np.ndarray]:
    """All supervised outputs as probability maps, final map first."""
    check_input(image, model.cfg.input_size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return [torch.sigmoid(o)[0, 0].double().numpy() for o in model(images_to_tensor(image, dtype))]


def saliency_loss(outputs: Sequence, truth, logits: bool = False) -> torch.Tensor:
    """Mean per-pixel BCE, averaged over the supervised outputs.

    ``outputs`` holds probability maps (or logits when ``logits`` is set),
    each shaped like ``truth``; a single map is accepted too.
    """
    if isinstance(outputs, (torch.Tensor, np.ndarray, SaliencyMap)):
        outputs = [outputs]
    truth = torch.as_tensor(np.asarray(truth) if not isinstance(truth, torch.Tensor) else truth)
    terms = []
    for out in outputs:
        if isinstance(out, SaliencyMap):
            out = np.array(out.values)
        out = torch.as_tensor(out)
        if out.shape != truth.shape:
            raise ShapeMismatch(f"prediction {tuple(out.shape)} vs truth {tuple(truth.shape)}")
        t = truth.to(out.dtype)
        if logits:
            terms.append(F.binary_cross_entropy_with_logits(out, t))
        else:
            terms.append(F.binary_cross_entropy(out, t))
    return torch.stack(terms).mean()


def masks_to_tensor(masks, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, None]).to(dtype)


def image_loss(model: SaliencyNet, images, masks) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    outputs = model(images_to_tensor(images, dtype))
    return saliency_loss(outputs, masks_to_tensor(masks, dtype), logits=True)


def train(
    samples,
    cfg: SaliencyNetConfig,
    epochs: int,
    seed: int,
    tcfg: TrainConfig = TrainConfig(),
    state: Optional[TrainState] = None,
) -> TrainState:
    """Train on ``(image, mask)`` pairs; masks are binary ``(H, W)`` arrays."""
    if state is None:
        state = make_state(build_model(cfg, seed), seed, tcfg)
    model = state.model
    for image, _ in samples:
        check_input(image, cfg.input_size)

    def batch_loss(idx, rng):
        images, masks = [], []
        for i in idx:
            image, mask = samples[i]
            if tcfg.hflip and rng.random() < 0.5:
                image, _, mask = hflip_sample(image, [], mask)
            images.append(image)
            masks.append(mask)
        return image_loss(model, images, masks)

    return run_epochs(state, len(samples), epochs, tcfg.batch_size, batch_loss)
