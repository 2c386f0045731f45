"""Single-file checkpoints for the three trainable models.

A checkpoint is a ``torch.save`` archive of a plain dict:

``format_version``  int, currently 1
``kind``            "detector" | "saliency" | "hybrid"
``configs``         dict of config dicts ("detector", "saliency", "fusion", "train" as relevant)
``state_dict``      model parameters; hybrid keys are prefixed ``detector.``,
                    ``saliency.`` and ``projections.``
``optimizer``       optimizer state, so training resumes exactly
``epoch``, ``seed``, ``loss_log``
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict
from pathlib import Path

import torch

from . import detector as det
from . import fusion as fus
from . import saliency as sal
from .training import TrainConfig, TrainState, make_state

FORMAT_VERSION = 1
KINDS = ("detector", "saliency", "hybrid")


def model_kind(model) -> str:
    if isinstance(model, fus.HybridModel):
        return "hybrid"
    if isinstance(model, sal.SaliencyNet):
        return "saliency"
    if isinstance(model, det.TinyYolo):
        return "detector"
    raise TypeError(f"not a trainable model: {type(model).__name__}")


def model_configs(model) -> dict:
    kind = model_kind(model)
    if kind == "hybrid":
        return {"detector": asdict(model.det_cfg), "saliency": asdict(model.sal_cfg), "fusion": asdict(model.fus_cfg)}
    return {kind: asdict(model.cfg)}


def save_checkpoint(path, state: TrainState, tcfg: TrainConfig) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": model_kind(state.model),
        "configs": {**model_configs(state.model), "train": asdict(tcfg)},
        "state_dict": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "seed": state.seed,
        "loss_log": list(state.loss_log),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def _det_cfg(d: dict) -> det.DetectorConfig:
    return det.DetectorConfig(**d)


def build_from_configs(kind: str, configs: dict, seed: int = 0):
    if kind == "detector":
        return det.build_model(_det_cfg(configs["detector"]), seed)
    if kind == "saliency":
        return sal.build_model(sal.SaliencyNetConfig(**configs["saliency"]), seed)
    if kind == "hybrid":
        return fus.HybridModel(
            _det_cfg(configs["detector"]),
            sal.SaliencyNetConfig(**configs["saliency"]),
            fus.FusionConfig(**configs["fusion"]),
            seed,
        )
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    """Rebuild the model and optimizer; returns ``(state, train_config, raw_payload)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    kind = payload["kind"]
    model = build_from_configs(kind, payload["configs"], payload["seed"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    tcfg = TrainConfig(**payload["configs"]["train"])
    params = fus.trainable_parameters(model) if kind == "hybrid" else None
    state = make_state(model, payload["seed"], tcfg, params)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = payload["epoch"]
    state.loss_log = list(payload["loss_log"])
    return state, tcfg, payload
