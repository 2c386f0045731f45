"""Merged run configuration: defaults, then a JSON file, then command-line flags.

The file holds one object per section, each optional::

    {"detector": {"input_size": 128}, "saliency": {"base_channels": 8},
     "fusion": {}, "gate": {"threshold": 0.5}, "eval": {}, "data": {"canvas": 128},
     "obfuscation": {"mode": "blur"}, "train": {"lr": 0.002}, "replay": {"epochs": 12}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .data import SyntheticSceneConfig
from .detector import DetectorConfig
from .evaluation import EvalConfig
from .fusion import FusionConfig
from .gate import GateConfig
from .obfuscate import ObfuscationConfig
from .saliency import SaliencyNetConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ReplayConfig:
    n_train: int = 400
    n_test: int = 100
    epochs: int = 12
    # scarce distractors in training, present in every test scene
    train_decoy_rate: float = 0.1
    test_decoy_rate: float = 1.0


SECTIONS = {
    "detector": DetectorConfig,
    "saliency": SaliencyNetConfig,
    "fusion": FusionConfig,
    "gate": GateConfig,
    "eval": EvalConfig,
    "data": SyntheticSceneConfig,
    "obfuscation": ObfuscationConfig,
    "train": TrainConfig,
    "replay": ReplayConfig,
}


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    saliency: SaliencyNetConfig = field(default_factory=SaliencyNetConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    obfuscation: ObfuscationConfig = field(default_factory=ObfuscationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)

    def __post_init__(self):
        if self.detector.input_size != self.saliency.input_size:
            raise ValueError(
                f"detector.input_size ({self.detector.input_size}) and "
                f"saliency.input_size ({self.saliency.input_size}) must agree"
            )

    def merged(self, overrides: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        """Return a copy with ``{section: {field: value}}`` applied; None values are skipped."""
        changes = {}
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise ValueError(f"unknown config section {section!r}")
            current = getattr(self, section)
            known = {f.name for f in fields(current)}
            values = {k: v for k, v in values.items() if v is not None}
            unknown = set(values) - known
            if unknown:
                raise ValueError(f"unknown fields in [{section}]: {sorted(unknown)}")
            if values:
                changes[section] = replace(current, **values)
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        cfg = cfg.merged(raw)
    if overrides:
        cfg = cfg.merged(overrides)
    return cfg
