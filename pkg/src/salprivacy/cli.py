"""Command-line entry point: ``salprivacy <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import detector as det
from . import fusion as fus
from . import saliency as sal
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    atomic_write_text,
    generate_synthetic,
    image_id,
    load_dataset,
    read_rgb,
    split,
    write_manifest,
    write_png,
    write_synthetic,
)
from .errors import SalPrivacyError
from .obfuscate import obfuscate
from .pipeline import (
    decision_log_lines,
    detector_samples,
    evaluate_predictions,
    gate_predictions,
    hybrid_samples,
    predict_records,
    read_predictions,
    saliency_loader,
    saliency_samples,
    set_threads,
    write_predictions,
)
from .replay import run_replay, write_loss_log

log = logging.getLogger("salprivacy")

DEFAULT_EPOCHS = 100


class UsageError(Exception):
    pass


def _config(args, overrides=None) -> RunConfig:
    overrides = dict(overrides or {})
    size = getattr(args, "input_size", None)
    if size is not None:
        overrides.setdefault("detector", {})["input_size"] = size
        overrides.setdefault("saliency", {})["input_size"] = size
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    cfg = _config(args, {"data": {"seed": args.seed, "canvas": args.canvas, "decoy_rate": args.decoy_rate}})
    manifest = write_synthetic(generate_synthetic(cfg.data, args.n), args.out)
    print(manifest)
    return 0


def cmd_split(args) -> int:
    records = load_dataset(args.manifest)
    train, test = split(records, args.train_fraction, args.seed)
    root = Path(args.manifest).parent
    write_manifest(train, root / f"{args.prefix}train.jsonl")
    write_manifest(test, root / f"{args.prefix}test.jsonl")
    print(f"{len(train)} train / {len(test)} test")
    return 0


def cmd_train(args) -> int:
    if args.resume is None and args.seed is None:
        raise UsageError("--seed is required unless resuming")
    epochs = DEFAULT_EPOCHS if args.epochs is None else args.epochs
    if epochs < 0:
        raise UsageError("--epochs must be non-negative")
    records = load_dataset(args.manifest)
    if args.resume is not None:
        state, tcfg, payload = load_checkpoint(args.resume)
        if payload["kind"] != args.mode:
            raise UsageError(f"--resume checkpoint is a {payload['kind']} checkpoint, not {args.mode}")
        seed = state.seed
        model = state.model
        cfg = RunConfig(train=tcfg)
        if args.mode == "hybrid":
            cfg = replace(cfg, detector=model.det_cfg, saliency=model.sal_cfg, fusion=model.fus_cfg)
        elif args.mode == "detector":
            cfg = replace(cfg, detector=model.cfg, saliency=replace(cfg.saliency, input_size=model.cfg.input_size))
        else:
            cfg = replace(cfg, saliency=model.cfg, detector=replace(cfg.detector, input_size=model.cfg.input_size))
    else:
        state, seed = None, args.seed
        cfg = _config(args, {"train": {"lr": args.lr, "batch_size": args.batch_size}})
    size = cfg.detector.input_size
    if args.mode == "detector":
        state = det.train(detector_samples(records, size), cfg.detector, epochs, seed, cfg.train, state)
    elif args.mode == "saliency":
        state = sal.train(saliency_samples(records, size), cfg.saliency, epochs, seed, cfg.train, state)
    else:
        state = fus.train(
            hybrid_samples(records, size), cfg.detector, cfg.saliency, cfg.fusion, epochs, seed, cfg.train, state
        )
    save_checkpoint(args.out, state, cfg.train)
    write_loss_log(Path(str(args.out) + ".loss.csv"), state.loss_log)
    print(args.out)
    return 0


def cmd_predict(args) -> int:
    state, _, payload = load_checkpoint(args.checkpoint)
    if payload["kind"] == "saliency":
        raise UsageError("predict needs a detector or hybrid checkpoint")
    saliency_model = None
    if args.saliency_checkpoint is not None:
        s_state, _, s_payload = load_checkpoint(args.saliency_checkpoint)
        if s_payload["kind"] != "saliency":
            raise UsageError("--saliency-checkpoint must be a saliency checkpoint")
        saliency_model = s_state.model
    if args.with_saliency and payload["kind"] == "detector" and saliency_model is None:
        raise UsageError("--with-saliency on a detector checkpoint needs --saliency-checkpoint")
    out = Path(args.out)
    saliency_dir = None
    if args.with_saliency:
        saliency_dir = Path(args.saliency_dir) if args.saliency_dir else out.with_name(out.stem + "_saliency")
    records = load_dataset(args.manifest)
    preds = predict_records(
        state.model, records, Path(args.manifest).parent, saliency_model, saliency_dir, out.parent.resolve()
    )
    write_predictions(out, preds)
    print(out)
    return 0


def cmd_gate(args) -> int:
    cfg = _config(args, {"gate": {"threshold": args.threshold, "reject_on_equal": args.reject_on_equal or None}})
    preds = read_predictions(args.predictions)
    loader = saliency_loader(
        Path(args.saliency_dir) if args.saliency_dir else None, Path(args.predictions).parent
    )
    kept, decisions = gate_predictions(preds, loader, cfg.gate)
    write_predictions(args.out, kept)
    atomic_write_text(Path(str(args.out) + ".decisions.jsonl"), decision_log_lines(decisions))
    n_in = sum(len(p.detections) for p in preds)
    n_out = sum(len(p.detections) for p in kept)
    print(f"kept {n_out} of {n_in} detections")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, {"eval": {"iou_threshold": args.iou, "interpolation": args.interpolation}})
    preds = read_predictions(args.predictions)
    records = load_dataset(args.manifest)
    report = evaluate_predictions(preds, records, Path(args.manifest).parent, cfg.eval)
    atomic_write_text(args.out, report.dumps())
    print(f"mAP {report.ap:.4f}")
    return 0


def cmd_obfuscate(args) -> int:
    cfg = _config(args, {"obfuscation": {"mode": args.mode, "blur_sigma": args.sigma}})
    records = load_dataset(args.manifest)
    root = Path(args.manifest).parent
    by_id = {image_id(r, root): r for r in records}
    preds = read_predictions(args.predictions)
    missing = [p.image for p in preds if p.image not in by_id]
    if missing:
        raise SalPrivacyError(f"predictions for images not in the manifest: {missing[:5]}")
    out_dir = Path(args.out_dir)

    def work(p):
        image = read_rgb(by_id[p.image].image_path)
        write_png(out_dir / p.image, obfuscate(image, [d.box for d in p.detections], cfg.obfuscation))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        list(pool.map(work, preds))
    print(f"wrote {len(preds)} images to {out_dir}")
    return 0


def cmd_replay(args) -> int:
    overrides = {"replay": {"epochs": args.epochs, "n_train": args.n_train, "n_test": args.n_test}}
    cfg = _config(args, overrides)
    result = run_replay(cfg, args.out_dir, args.seed, args.external_predictions, args.external_saliency_dir)
    print(result.format_table(), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="salprivacy", description="Saliency-gated privacy-region detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1, for reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, size=False):
        sp.add_argument("--config", type=Path, help="JSON config file with per-module sections")
        if size:
            sp.add_argument("--input-size", type=int, help="network input size (detector and saliency)")
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--canvas", type=int, default=None)
    g.add_argument("--decoy-rate", type=float, default=None)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="deterministic train/test split of a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="")
    s.set_defaults(func=cmd_split)

    t = common(sub.add_parser("train", help="train a detector, saliency or hybrid model"), size=True)
    t.add_argument("--mode", choices=("detector", "saliency", "hybrid"), required=True)
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None, help=f"default {DEFAULT_EPOCHS}")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--resume", type=Path, default=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="detect privacy regions")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--manifest", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--with-saliency", action="store_true")
    pr.add_argument("--saliency-checkpoint", type=Path, default=None)
    pr.add_argument("--saliency-dir", type=Path, default=None)
    pr.set_defaults(func=cmd_predict)

    ga = common(sub.add_parser("gate", help="manual saliency threshold on predictions"))
    ga.add_argument("--predictions", type=Path, required=True)
    ga.add_argument("--saliency-dir", type=Path, default=None)
    ga.add_argument("--out", type=Path, required=True)
    ga.add_argument("--threshold", type=float, default=None)
    ga.add_argument("--reject-on-equal", action="store_true")
    ga.set_defaults(func=cmd_gate)

    e = common(sub.add_parser("eval", help="mAP of predictions against a manifest"))
    e.add_argument("--predictions", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--iou", type=float, default=None)
    e.add_argument("--interpolation", choices=("all_point", "eleven_point"), default=None)
    e.set_defaults(func=cmd_eval)

    o = common(sub.add_parser("obfuscate", help="blur or black out predicted regions"))
    o.add_argument("--predictions", type=Path, required=True)
    o.add_argument("--manifest", type=Path, required=True)
    o.add_argument("--out-dir", type=Path, required=True)
    o.add_argument("--mode", choices=("blur", "blackout"), default=None)
    o.add_argument("--sigma", type=float, default=None)
    o.add_argument("--jobs", type=int, default=1)
    o.set_defaults(func=cmd_obfuscate)

    r = common(sub.add_parser("replay", help="gen, train, predict, gate and eval all six methods"), size=True)
    r.add_argument("--out-dir", type=Path, required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--n-train", type=int, default=None)
    r.add_argument("--n-test", type=int, default=None)
    r.add_argument("--external-predictions", type=Path, default=None)
    r.add_argument("--external-saliency-dir", type=Path, default=None)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (SalPrivacyError, ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
