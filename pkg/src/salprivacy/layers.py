"""Small building blocks shared by the detector and saliency networks.

SiLU is used throughout instead of leaky ReLU and strided convolutions
instead of max-pooling: both keep the losses smooth, which the
finite-difference gradient checks rely on.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def norm(channels: int) -> nn.GroupNorm:
    # GroupNorm: same behaviour in train and eval, independent of batch size.
    # At least two channels per group so a 1x1 map is not normalised to zero.
    return nn.GroupNorm(max(1, math.gcd(channels, 8) // (2 if channels <= 8 else 1)), channels)


class ConvAct(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
            norm(c_out),
            nn.SiLU(),
        )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            ConvAct(channels, channels), nn.Conv2d(channels, channels, 3, padding=1, bias=False), norm(channels)
        )
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(x + self.body(x))


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(H, W, 3)`` uint8 images into a ``(B, 3, H, W)`` tensor in [0, 1]."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous().to(dtype)


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
