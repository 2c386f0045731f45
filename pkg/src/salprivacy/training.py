"""Seeded mini-batch training loop shared by all three trainable models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptyDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 8
    weight_decay: float = 0.0
    # random horizontal flips; off keeps overfit smoke runs exact
    hflip: bool = True


@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    seed: int
    epoch: int = 0
    loss_log: list[float] = field(default_factory=list)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def make_state(model: nn.Module, seed: int, tcfg: TrainConfig, params=None) -> TrainState:
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    return TrainState(model=model, optimizer=opt, seed=seed)


def run_epochs(
    state: TrainState,
    n_samples: int,
    epochs: int,
    batch_size: int,
    batch_loss: Callable[[Sequence[int], np.random.Generator], torch.Tensor],
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run ``epochs`` passes over ``n_samples`` items.

    ``batch_loss(indices, rng)`` returns the scalar loss of one mini-batch.
    The shuffling stream is derived from ``(seed, epoch)`` so a run resumed
    from a checkpoint continues exactly as an uninterrupted one would.
    """
    if n_samples <= 0:
        raise EmptyDataset("cannot train on an empty dataset")
    state.model.train()
    for _ in range(epochs):
        rng = np.random.default_rng([state.seed, state.epoch])
        order = rng.permutation(n_samples)
        total, count = 0.0, 0
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            loss = batch_loss(idx, rng)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        state.epoch += 1
        state.loss_log.append(total / count)
        log.info("epoch %d loss %.5f", state.epoch, state.loss_log[-1])
        if on_epoch is not None:
            on_epoch(state)
    state.model.eval()
    return state
