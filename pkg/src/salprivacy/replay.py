"""End-to-end replay of the six-method comparison at desk scale.

gen -> train (detector, saliency, hybrid) -> predict -> gate -> eval, all
through the same file formats as the CLI. The two external-detector rows
(meant for a second backend such as a two-stage detector) are only filled
when a predictions file from that backend is supplied.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from . import detector as det
from . import fusion as fus
from . import saliency as sal
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import atomic_write_text, generate_synthetic, load_dataset, write_synthetic
from .pipeline import (
    detector_samples,
    evaluate_predictions,
    gate_predictions,
    hybrid_samples,
    predict_records,
    read_predictions,
    saliency_loader,
    saliency_samples,
    write_predictions,
)

log = logging.getLogger(__name__)

ROWS = (
    "detector",
    "external detector",
    "detector w/ MT",
    "external detector w/ MT",
    "hybrid",
    "hybrid w/ MT",
)


@dataclass
class ReplayResult:
    table: dict[str, Optional[float]]
    out_dir: Path

    def format_table(self) -> str:
        lines = ["| method | mAP (%) |", "|---|---|"]
        for row in ROWS:
            v = self.table.get(row)
            lines.append(f"| {row} | {'n/a' if v is None else f'{100 * v:.1f}'} |")
        return "\n".join(lines) + "\n"


def write_loss_log(path, loss_log) -> None:
    atomic_write_text(path, "epoch,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(loss_log, start=1)))


def generate_split_sets(cfg: RunConfig, out_dir: Path, seed: int):
    """Training scenes with scarce salient distractors, test scenes with them everywhere."""
    rc = cfg.replay
    train_cfg = replace(cfg.data, seed=seed, decoy_rate=rc.train_decoy_rate)
    test_cfg = replace(cfg.data, seed=seed + 1, decoy_rate=rc.test_decoy_rate)
    train_manifest = write_synthetic(generate_synthetic(train_cfg, rc.n_train), out_dir / "train")
    test_manifest = write_synthetic(generate_synthetic(test_cfg, rc.n_test), out_dir / "test")
    return train_manifest, test_manifest


def run_replay(
    cfg: RunConfig,
    out_dir,
    seed: int,
    external_predictions: Optional[Path] = None,
    external_saliency_dir: Optional[Path] = None,
) -> ReplayResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.json", json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    train_manifest, test_manifest = generate_split_sets(cfg, out_dir / "data", seed)
    train_records = load_dataset(train_manifest)
    test_records = load_dataset(test_manifest)
    test_root = test_manifest.parent
    size = cfg.detector.input_size
    epochs = cfg.replay.epochs

    log.info("training detector")
    det_state = det.train(detector_samples(train_records, size), cfg.detector, epochs, seed, cfg.train)
    save_checkpoint(out_dir / "detector.pt", det_state, cfg.train)
    write_loss_log(out_dir / "detector.loss.csv", det_state.loss_log)

    log.info("training saliency network")
    sal_state = sal.train(saliency_samples(train_records, size), cfg.saliency, epochs, seed, cfg.train)
    save_checkpoint(out_dir / "saliency.pt", sal_state, cfg.train)
    write_loss_log(out_dir / "saliency.loss.csv", sal_state.loss_log)

    log.info("training hybrid")
    hyb_state = fus.train(
        hybrid_samples(train_records, size), cfg.detector, cfg.saliency, cfg.fusion, epochs, seed, cfg.train
    )
    save_checkpoint(out_dir / "hybrid.pt", hyb_state, cfg.train)
    write_loss_log(out_dir / "hybrid.loss.csv", hyb_state.loss_log)

    runs = {
        "detector": predict_records(
            det_state.model, test_records, test_root, sal_state.model, out_dir / "detector_saliency", out_dir
        ),
        "hybrid": predict_records(hyb_state.model, test_records, test_root, None, out_dir / "hybrid_saliency", out_dir),
    }
    loaders = {name: saliency_loader(predictions_root=out_dir) for name in runs}
    if external_predictions is not None:
        runs["external detector"] = read_predictions(external_predictions)
        loaders["external detector"] = (
            saliency_loader(saliency_dir=external_saliency_dir)
            if external_saliency_dir is not None
            else saliency_loader(saliency_dir=out_dir / "detector_saliency")
        )

    table: dict[str, Optional[float]] = {row: None for row in ROWS}
    for name, preds in runs.items():
        slug = name.replace(" ", "_")
        write_predictions(out_dir / f"{slug}.predictions.jsonl", preds)
        gated, _ = gate_predictions(preds, loaders[name], cfg.gate)
        write_predictions(out_dir / f"{slug}_mt.predictions.jsonl", gated)
        for row, p in ((name, preds), (f"{name} w/ MT", gated)):
            report = evaluate_predictions(p, test_records, test_root, cfg.eval)
            atomic_write_text(out_dir / f"{row.replace(' ', '_').replace('/', '')}.report.json", report.dumps())
            table[row] = report.ap
    result = ReplayResult(table, out_dir)
    atomic_write_text(out_dir / "table.md", result.format_table())
    atomic_write_text(out_dir / "table.json", json.dumps(table, indent=1) + "\n")
    return result
