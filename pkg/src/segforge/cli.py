"""``segforge`` command line: gen-data, train, eval, model-info, augment-preview.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import augment as A
from . import data as D
from . import metrics as M
from . import train as TR
from . import unet as U
from .config import ConfigError, RunConfig, from_dict, load_run_config, run_config_from_meta

SEED_ENV = "SEGFORGE_SEED"

log = logging.getLogger("segforge")


class UsageError(Exception):
    pass


def _load_manifest(path) -> D.DatasetManifest:
    try:
        return D.load_manifest(path)
    except D.ManifestError as exc:
        raise UsageError(str(exc)) from exc


def _resolve_seed(cfg: RunConfig, flag: Optional[int]) -> None:
    """Flag beats environment beats config file."""
    if flag is not None:
        cfg.train.seed = flag
    elif os.environ.get(SEED_ENV):
        try:
            cfg.train.seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from exc
    spec = from_dict(D.SyntheticSpec, doc)
    try:
        spec.validate()
    except D.SpecError as exc:
        raise UsageError(str(exc)) from exc
    manifest = D.generate(spec, args.out)
    counts = {s: len(manifest.split(s)) for s in D.SPLITS}
    print(f"wrote {sum(counts.values())} samples to {args.out} ({counts})")
    return 0


def _load_split_or_fail(manifest: D.DatasetManifest, split: str, num_classes: int) -> List[D.ImageSample]:
    if manifest.num_classes != num_classes:
        raise UsageError(f"dataset has {manifest.num_classes} classes but the model expects {num_classes}")
    try:
        return D.load_split(manifest, split)
    except D.DatasetError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.workers is not None:
        cfg.train.workers = args.workers
    if args.emit_plot_data:
        cfg.report.emit_plot_data = True
    if args.data is not None:
        cfg.paths.data = args.data
    _resolve_seed(cfg, args.seed)
    cfg.validate()

    manifest = _load_manifest(cfg.paths.data)
    train_set = _load_split_or_fail(manifest, "train", cfg.unet.num_classes)
    val_set = _load_split_or_fail(manifest, "val", cfg.unet.num_classes)
    if not train_set or not val_set:
        raise UsageError("dataset needs non-empty train and val splits")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    model = U.build(cfg.unet, cfg.train.seed)
    result = TR.fit(model, train_set, val_set, cfg.loss, cfg.train, cfg.augment, out_dir=out,
                    meta={"run": cfg.to_dict()}, resume_from=args.resume,
                    emit_plot_data=cfg.report.emit_plot_data)
    best = "n/a" if result.best_miou is None else f"{result.best_miou:.4f} (epoch {result.best_epoch})"
    print(f"best mIoU {best}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    try:
        model, meta, _ = U.load_checkpoint(args.checkpoint)
    except (OSError, U.CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    cfg = run_config_from_meta(meta)
    manifest = _load_manifest(args.data)
    samples = _load_split_or_fail(manifest, args.split, model.cfg.num_classes)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    ev = TR.validate(model, samples, cfg.augment, cfg.train.eval_batch)
    side = samples[0].mask.shape
    report = M.render_report(ev.iou, ev.dice, {
        "method": "UNet CNN",
        "params": U.count_params(model),
        "flops": U.estimate_flops(model.cfg, side) if all(s % 16 == 0 for s in side) else None,
        "class_names": manifest.class_names[1:] if len(manifest.class_names) == model.cfg.num_classes else None,
    })
    rep = Path(args.report)
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "report.csv").write_text(report["csv"], encoding="utf-8")
    (rep / "report.txt").write_text(report["text"], encoding="utf-8")
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"mIoU {fmt(ev.miou)}")
    print(f"mDice {fmt(ev.mdice)}")
    return 0


def cmd_model_info(args) -> int:
    if args.config:
        cfg = load_run_config(args.config).unet
    elif args.preset == "paper":
        cfg = dataclasses.replace(U.PAPER_SCALE)
    else:
        cfg = dataclasses.replace(U.SMOKE_SCALE)
    if args.checkpoint:
        model, _, _ = U.load_checkpoint(args.checkpoint)
        cfg = model.cfg
    else:
        model = U.build(cfg, 0)
    params = U.count_params(model)
    flops = U.estimate_flops(cfg, args.input)
    latency = None
    if args.time:
        rng = np.random.default_rng(0)
        images = rng.standard_normal((args.images, cfg.in_channels, args.input, args.input))
        latency = TR.measure_inference(model, images, args.repetitions).mean_seconds
    cols = ["Model Name", "# of Parameters", "FLOPS", "Inference Time*"]
    row = ["UNet CNN", f"{params:,} ({params / 1e6:.2f}M)", f"{flops / 1e9:.2f} G",
           "-" if latency is None else f"{latency:.3f}s"]
    width = [max(len(a), len(b)) for a, b in zip(cols, row)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, width)).rstrip())
    print("  ".join(c.ljust(w) for c, w in zip(row, width)).rstrip())
    print(f"* FLOPS per {args.input}x{args.input} image; inference time per batch of {args.images} images")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(args.data or cfg.paths.data)
    try:
        entry = manifest.entry(args.sample)
    except D.ManifestError as exc:
        raise UsageError(str(exc)) from exc
    sample = D.load_sample(manifest.root / entry.image, manifest.root / entry.mask, manifest.num_classes, entry.id)
    aug = A.augment_pair(sample, args.epoch, cfg.augment)
    view = D.ImageSample(np.clip(A.denormalize(aug.image, cfg.augment), 0.0, 1.0), aug.mask, aug.id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{entry.id}_e{args.epoch}"
    D.save_sample(view, out / f"{stem}.ppm", out / f"{stem}_mask.pgm")
    params = {k: v for k, v in aug.params.items()}
    (out / f"{stem}.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / stem}.ppm")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--spec", required=True, help="synthetic dataset spec (JSON)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a UNet")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (overrides paths.data)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config seed")
    t.add_argument("--workers", type=int, help="augmentation worker threads")
    t.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    t.add_argument("--emit-plot-data", action="store_true", help="also write per-class IoU/Dice series")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=D.SPLITS)
    e.add_argument("--report", required=True, help="output directory for report.csv / report.txt")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("model-info", help="parameter count, FLOPs and latency")
    m.add_argument("--config")
    m.add_argument("--preset", choices=["smoke", "paper"], default="smoke")
    m.add_argument("--input", type=int, default=512)
    m.add_argument("--time", action="store_true")
    m.add_argument("--checkpoint")
    m.add_argument("--images", type=int, default=6)
    m.add_argument("--repetitions", type=int, default=3)
    m.set_defaults(func=cmd_model_info)

    a = sub.add_parser("augment-preview", help="write one augmented sample for inspection")
    a.add_argument("--config", required=True)
    a.add_argument("--sample", required=True)
    a.add_argument("--epoch", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--data", help="dataset directory (overrides paths.data)")
    a.set_defaults(func=cmd_augment_preview)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, U.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TR.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except (OSError, D.DatasetError, U.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
