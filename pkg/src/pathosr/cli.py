"""Operator surface: prepare, train, infer, evaluate, grid.

Every subcommand is deterministic given identical inputs and seeds. Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure. The
environment variable PATHOSR_SEED, when set, overrides --seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from . import dataset as ds
from . import trainer as tr
from .errors import DataError, NumericalDivergenceError, UsageError
from .imaging import (
    MagLevel,
    MetricReport,
    SR_LEVELS,
    bicubic_resize,
    load_image,
    psnr,
    save_image,
    ssim,
)
from .inference import StitchPlan, super_resolve_multi

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
MANIFEST_NAME = "manifest.jsonl"

# Reference means reported for the full-scale corpus; embedded in evaluation
# reports as annotations only, never as pass/fail targets. A desk-scale model
# trained on a toy corpus is not expected to reach them.
PAPER_REFERENCE = {
    "psnr": {"10X": 24.167, "20X": 22.272, "40X": 20.436},
    "ssim": {"10X": 0.845, "20X": 0.680, "40X": 0.512},
    "note": "full-scale (100k-image, GPU-trained) reference means; annotation only",
}

_CONFIG_KEYS = {
    "profile",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "optimizer",
    "learning_rate",
    "decay_factor",
    "decay_frequency",
    "min_flatness",
    "max_flatness",
    "increase_factor",
    "increase_frequency",
    "generator_loss_weight",
    "perceptual_loss_weight",
    "discriminator_loss_weight",
    "patches_per_image",
    "patch_size",
    "val_fraction",
    "seed",
    "extractor_backend",
    "vgg19_weights",
}


def load_train_config(path: str | Path, seed_override: int | None = None) -> tr.TrainConfig:
    """Parse the flat key-value training config file.

    Unknown keys are rejected by name; omitted keys take the profile's
    defaults.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise UsageError("config must be a flat JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    if raw.get("optimizer", "adam").lower() != "adam":
        raise UsageError(f"unsupported optimizer {raw['optimizer']!r}; only 'adam' is implemented")

    profile = raw.get("profile", "paper")
    base = tr.TrainConfig.tiny() if profile == "tiny" else tr.TrainConfig.paper()
    flatness = ds.FlatnessSchedule(
        start=float(raw.get("min_flatness", base.flatness.start)),
        increment=float(raw.get("increase_factor", base.flatness.increment)),
        period_epochs=int(raw.get("increase_frequency", base.flatness.period_epochs)),
        max_value=float(raw.get("max_flatness", base.flatness.max_value)),
    )
    weights = type(base.weights)(
        w_gl=float(raw.get("generator_loss_weight", base.weights.w_gl)),
        w_pl=float(raw.get("perceptual_loss_weight", base.weights.w_pl)),
        w_dl=float(raw.get("discriminator_loss_weight", base.weights.w_dl)),
    )
    seed = int(raw.get("seed", base.seed))
    if seed_override is not None:
        seed = seed_override
    try:
        return type(base)(
            profile=profile,
            epochs=int(raw.get("epochs", base.epochs)),
            steps_per_epoch=int(raw.get("steps_per_epoch", base.steps_per_epoch)),
            batch_size=int(raw.get("batch_size", base.batch_size)),
            lr0=float(raw.get("learning_rate", base.lr0)),
            decay_factor=float(raw.get("decay_factor", base.decay_factor)),
            decay_every_epochs=int(raw.get("decay_frequency", base.decay_every_epochs)),
            patches_per_image=int(raw.get("patches_per_image", base.patches_per_image)),
            patch_size=int(raw.get("patch_size", base.patch_size)),
            flatness=flatness,
            val_fraction=float(raw.get("val_fraction", base.val_fraction)),
            seed=seed,
            weights=weights,
            generator=base.generator,
            discriminator=base.discriminator,
            extractor_backend=raw.get("extractor_backend", base.extractor_backend),
            vgg19_weights=raw.get("vgg19_weights", base.vgg19_weights),
        )
    except ValueError as exc:
        raise UsageError(f"invalid config value: {exc}")


def effective_config_dict(cfg: tr.TrainConfig) -> dict:
    """Flat view of the effective config (defaults filled in)."""
    return {
        "profile": cfg.profile,
        "epochs": cfg.epochs,
        "steps_per_epoch": cfg.steps_per_epoch,
        "batch_size": cfg.batch_size,
        "optimizer": "adam",
        "learning_rate": cfg.lr0,
        "decay_factor": cfg.decay_factor,
        "decay_frequency": cfg.decay_every_epochs,
        "min_flatness": cfg.flatness.start,
        "max_flatness": cfg.flatness.max_value,
        "increase_factor": cfg.flatness.increment,
        "increase_frequency": cfg.flatness.period_epochs,
        "generator_loss_weight": cfg.weights.w_gl,
        "perceptual_loss_weight": cfg.weights.w_pl,
        "discriminator_loss_weight": cfg.weights.w_dl,
        "patches_per_image": cfg.patches_per_image,
        "patch_size": cfg.patch_size,
        "val_fraction": cfg.val_fraction,
        "seed": cfg.seed,
        "extractor_backend": cfg.extractor_backend,
        "vgg19_weights": cfg.vgg19_weights,
    }


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


def _parse_splits(spec: str) -> dict[str, float]:
    fractions = {}
    try:
        for part in spec.split(","):
            name, frac = part.split(":")
            fractions[name.strip()] = float(frac)
    except ValueError:
        raise UsageError(f"bad --splits value {spec!r}; expected name:frac,name:frac")
    if any(f < 0 for f in fractions.values()) or sum(fractions.values()) <= 0:
        raise UsageError("split fractions must be non-negative and sum to > 0")
    return fractions


def cmd_prepare(args) -> int:
    input_dir = Path(args.input_dir)
    out_dir = Path(args.output_dir)
    sources = sorted(
        p for p in input_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    ) if input_dir.is_dir() else []
    if not sources:
        raise DataError(f"no decodable images found in {input_dir}")
    fractions = _parse_splits(args.splits)
    assignment = ds.assign_splits([p.name for p in sources], fractions, args.seed)

    records = []
    for src in sources:
        try:
            source = load_image(src)
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"cannot decode {src}: {exc}")
        split = assignment[src.name]
        tiles = ds.tile_image(source, args.tile_size, source_name=src.stem, split=split)
        for record in tiles:
            r, c = record.origin
            levels = ds.build_pyramid(
                source[r : r + args.tile_size, c : c + args.tile_size], args.tile_size
            )
            for level, image in levels.items():
                path = out_dir / split / level.value / f"{record.tile_id}.png"
                save_image(image, path)
                record.paths[level] = str(path)
            records.append(record)
        logger.info("prepared %d tiles from %s (%s)", len(tiles), src.name, split)
    manifest = out_dir / MANIFEST_NAME
    ds.write_manifest(records, manifest)
    print(f"wrote {len(records)} tiles to {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, seed_override=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(effective_config_dict(cfg), indent=2, sort_keys=True)
    )
    final = tr.train(cfg, args.manifest, out_dir, resume=args.resume)
    records = ds.read_manifest(args.manifest)
    train_records = [r for r in records if r.split == "train"]
    _, val_part = tr.split_train_val(train_records, cfg.val_fraction)
    if val_part:
        generator, _ = tr.load_generator(final)
        report = tr.validate(generator, val_part)
        (out_dir / "val_report.json").write_text(report.to_json())
        logger.info("validation report written for %d tiles", len(val_part))
    print(f"final checkpoint: {final}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _parse_levels(spec: str) -> list[MagLevel]:
    levels = []
    for name in spec.split(","):
        level = MagLevel.from_name(name.strip())
        if level not in SR_LEVELS:
            raise UsageError(f"cannot infer level {name!r}; choose from 10X,20X,40X")
        levels.append(level)
    return levels


def cmd_infer(args) -> int:
    ckpt = Path(args.ckpt)
    input_path = Path(args.input)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    if not input_path.exists():
        raise DataError(f"input image not found: {input_path}")
    try:
        levels = _parse_levels(args.levels)
    except ValueError as exc:
        raise UsageError(str(exc))
    generator, _ = tr.load_generator(ckpt)
    img = load_image(input_path)
    outputs = super_resolve_multi(img, levels, generator, StitchPlan())
    out_dir = Path(args.out)
    for level in levels:
        path = out_dir / level.value / f"{input_path.stem}.png"
        save_image(outputs[level], path)
        print(f"{level.value}: {path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _finite_or_none(x: float):
    return None if math.isinf(x) else x


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    records = [r for r in ds.read_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise DataError(f"manifest has no tiles in split {args.split!r}")
    generator, cfg = tr.load_generator(ckpt)
    report, rows = tr.evaluate_tiles(generator, records)

    baseline_samples = {level: [] for level in SR_LEVELS}
    baseline_rows = []
    for record in sorted(records, key=lambda r: r.tile_id):
        images = ds.load_tile_images(record)
        lr = images[MagLevel.X5]
        for level in SR_LEVELS:
            size = lr.shape[0] * level.scale_from_5x
            up = bicubic_resize(lr, size, lr.shape[1] * level.scale_from_5x)
            p = psnr(up, images[level])
            s = ssim(up, images[level])
            baseline_samples[level].append((p, s))
            baseline_rows.append(
                {"tile_id": record.tile_id, "level": level.value, "psnr": p, "ssim": s}
            )
    baseline_report = MetricReport.from_samples(baseline_samples)

    def _rows_json(rs):
        return [
            {**row, "psnr": _finite_or_none(row["psnr"])}
            for row in rs
        ]

    payload = {
        "schema": REPORT_SCHEMA,
        "checkpoint": str(ckpt),
        "config_hash": cfg.config_hash(),
        "split": args.split,
        "paper_reference": PAPER_REFERENCE,
        "levels": report.to_records(),
        "tiles": _rows_json(rows),
        "baseline_levels": baseline_report.to_records(),
        "baseline_tiles": _rows_json(baseline_rows),
    }
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"evaluation report: {report_path}")
    return 0


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

GRID_GUTTER = 8
GRID_LABEL_BAND = 20


def cmd_grid(args) -> int:
    paths = [Path(p) for p in args.images]
    if len(paths) < 2:
        raise UsageError("grid needs at least 2 images")
    labels = args.labels.split(",") if args.labels else [p.stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError(f"got {len(labels)} labels for {len(paths)} images")
    images = []
    for p in paths:
        if not p.exists():
            raise DataError(f"image not found: {p}")
        images.append(load_image(p))
    shape = images[0].shape
    for p, im in zip(paths, images):
        if im.shape != shape:
            raise DataError(f"size mismatch: {p} is {im.shape[:2]}, expected {shape[:2]}")

    h, w = shape[:2]
    total_w = w * len(images) + GRID_GUTTER * (len(images) - 1)
    panel = Image.new("RGB", (total_w, h + GRID_LABEL_BAND), (255, 255, 255))
    draw = ImageDraw.Draw(panel)
    x = 0
    for im, label in zip(images, labels):
        tile = Image.fromarray(np.rint(im * 255.0).astype(np.uint8), mode="RGB")
        panel.paste(tile, (x, GRID_LABEL_BAND))
        draw.text((x + 2, 4), label.strip(), fill=(0, 0, 0))
        x += w + GRID_GUTTER
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    panel.save(out, format="PNG")
    print(f"comparison grid: {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathosr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tile sources, build pyramids, write the manifest")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--tile-size", type=int, default=1024)
    p.add_argument("--splits", default="train:0.8,test:0.2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the training protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve a 5X image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--levels", default="10X,20X,40X")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report on a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="side-by-side labeled comparison panel")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        env_seed = os.environ.get("PATHOSR_SEED")
        if env_seed is not None and hasattr(args, "seed"):
            try:
                args.seed = int(env_seed)
            except ValueError:
                raise UsageError(f"PATHOSR_SEED must be an integer, got {env_seed!r}")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalDivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
