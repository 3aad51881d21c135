"""``gemseg`` command line: synth, train, eval, predict, metrics and ablate.

Exit codes: 0 success, 1 domain error (bad data, leakage, unreadable checkpoint),
2 usage error. Every output file is written to a temporary sibling and renamed
into place, so a failing command leaves no partial files behind.

``GEM_SEED`` sets the default seed for ``synth`` and overrides the config seed
of ``train``/``ablate`` when no ``--seed`` flag is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ._io import atomic_path, atomic_write_text
from .datamodel import (
    IMAGE_SUFFIXES, DatasetError, GroundTruthMask, ImageSample, Split, load_config, load_dataset, read_image_file,
    read_mask_file, standardize, write_mask_file,
)
from .encoder import FeatureFileError
from .metrics import evaluate
from .model import CheckpointError, load_checkpoint
from .synth import LeakageError, Tier, build_manifests, export_jobs, render_procedural
from .trainer import NonFiniteLossError, ablation_records, ablation_sweep, format_ablation, parse_axes, predict, train

log = logging.getLogger("gemseg")

SEED_ENV = "GEM_SEED"
DOMAIN_ERRORS = (DatasetError, LeakageError, CheckpointError, FeatureFileError, NonFiniteLossError, ValueError,
                 OSError)


class UsageError(Exception):
    pass


def _env_seed() -> Optional[int]:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def _existing(path: str, what: str, directory: bool = False) -> Path:
    p = Path(path)
    if not (p.is_dir() if directory else p.is_file()):
        raise UsageError(f"{what} {path!r} does not exist")
    return p


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _save_png(array: np.ndarray, path: Path) -> None:
    with atomic_path(path) as tmp:
        Image.fromarray(array).save(tmp, format="PNG")


def _infer_split(path: Path) -> Split:
    """Masks under any directory named ``val`` count as validation masks."""
    return Split.VAL if Split.VAL.value in path.resolve().parts else Split.TRAIN


def _resolve_seed(config, flag: Optional[int]):
    seed = flag if flag is not None else _env_seed()
    return config if seed is None else config.replace(seed=seed)


# --- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    mask_dir = _existing(args.masks, "mask directory", directory=True)
    split = _infer_split(mask_dir)
    files = sorted(p for p in mask_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
    if not files:
        raise DatasetError(f"no .png masks in {mask_dir}")
    try:
        tiers = [Tier(t.strip()) for t in args.tiers.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pool = [GroundTruthMask(read_mask_file(p, args.size), split, id=p.stem) for p in files]
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    manifests = build_manifests(pool, base_seed=seed, tiers=tiers)
    out = Path(args.out)
    n = export_jobs(manifests, out / "jobs.jsonl")
    print(f"{n} jobs over tiers {','.join(t.value for t in manifests)} -> {out / 'jobs.jsonl'}")
    if not args.render:
        return 0
    by_id = {gt.id: gt for gt in pool}
    jobs = [job for m in manifests.values() for job in m.jobs]

    def render(job):
        sample, gt = render_procedural(job, by_id[job.conditioning_mask_id], args.size)
        _save_png(sample.rgb, out / "images" / f"{job.job_id}.png")
        with atomic_path(out / "masks" / f"{job.job_id}.png") as tmp:
            write_mask_file(gt.mask, tmp)

    _map(render, jobs, args.workers)
    print(f"rendered {len(jobs)} image/mask pairs into {out}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_seed(load_config(_existing(args.config, "config file")), args.seed)
    data = _existing(args.data, "data directory", directory=True)
    train_set = load_dataset(data, Split.TRAIN, config.image_size)
    val_set = load_dataset(data, Split.VAL, config.image_size) if (data / Split.VAL.value).is_dir() else None
    init = _existing(args.init, "init checkpoint") if args.init else None
    result = train(config, train_set, val_set, init_checkpoint=init, out_dir=args.out)
    msg = f"trained {len(result.history)} iterations -> {Path(args.out) / 'checkpoint.pt'}"
    if result.best_iou is not None:
        msg += f" (best val IoU {result.best_iou:.4f})"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    dataset = load_dataset(_existing(args.data, "data directory", directory=True), args.split,
                           model.config.image_size)
    if not dataset:
        raise DatasetError(f"no images found under {args.data}")
    maps = predict(model, [s for s, _ in dataset])
    report = evaluate([(s.id, m, gt.mask) for (s, gt), m in zip(dataset, maps)],
                      threshold=model.config.threshold, beta_squared=model.config.beta_squared)
    report.write(args.report)
    print(report.to_text().split("\n\n", 1)[1].rstrip())
    return 0


def _resize_map(prob: np.ndarray, size_hw: tuple[int, int]) -> np.ndarray:
    h, w = size_hw
    if prob.shape == (h, w):
        return prob
    img = Image.fromarray(prob.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    image_path = _existing(args.image, "image")
    rgb, original = read_image_file(image_path, model.config.image_size)
    sample = ImageSample(image_path.stem, standardize(rgb), original, rgb=rgb)
    prob = _resize_map(predict(model, [sample])[0], original)
    out = Path(args.out)
    _save_png(np.round(prob * 255).astype(np.uint8), out / f"{image_path.stem}_prob.png")
    binary = (prob >= model.config.threshold).astype(np.uint8) * 255
    _save_png(binary, out / f"{image_path.stem}_mask.png")
    print(f"wrote {out / (image_path.stem + '_prob.png')} and {out / (image_path.stem + '_mask.png')}")
    return 0


def _read_prediction(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def cmd_metrics(args) -> int:
    pred_dir = _existing(args.pred, "prediction directory", directory=True)
    gt_dir = _existing(args.gt, "ground-truth directory", directory=True)
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}
    orphans = sorted(set(preds) ^ set(gts))
    if orphans:
        raise DatasetError(f"basenames without a counterpart: {', '.join(orphans)}")
    if not preds:
        raise DatasetError(f"no images in {pred_dir}")

    def load(key):
        pred, gt = _read_prediction(preds[key]), read_mask_file(gts[key])
        if pred.shape != gt.shape:
            raise DatasetError(f"{key}: prediction {pred.shape} and ground truth {gt.shape} differ in size")
        return key, pred, gt

    report = evaluate(_map(load, sorted(preds), args.workers))
    report.write(args.report)
    print(report.to_text().split("\n\n", 1)[1].rstrip())
    return 0


def cmd_ablate(args) -> int:
    config = _resolve_seed(load_config(_existing(args.config, "config file")), args.seed)
    data = _existing(args.data, "data directory", directory=True)
    try:
        axes = parse_axes(args.axes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_set = load_dataset(data, Split.TRAIN, config.image_size)
    val_set = load_dataset(data, Split.VAL, config.image_size) if (data / Split.VAL.value).is_dir() else None
    rows = ablation_sweep(config, train_set, val_set, axes)
    table = format_ablation(rows)
    out = Path(args.out)
    atomic_write_text(out.with_suffix(".json"), json.dumps(ablation_records(rows), indent=2, default=float) + "\n")
    atomic_write_text(out, table)
    print(table, end="")
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gemseg", description="Glass segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build generation manifests and optionally render procedural images")
    p.add_argument("--masks", required=True, help="directory of conditioning mask PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--tiers", default="x1,x5,x10,x20")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=384, help="render size (multiple of 32)")
    p.add_argument("--workers", type=int, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--render", dest="render", action="store_true", default=True)
    mode.add_argument("--manifest-only", dest="render", action="store_false")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory with train/ (and optionally val/) splits")
    p.add_argument("--init", default=None, help="checkpoint to fine-tune from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="val", choices=[s.value for s in Split])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="glass probability map and binary mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="score prediction images against ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="selection-source / query-selection ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--axes", default="selection_source=c3c4c5,c3,c4,dqs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gemseg {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        message = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"gemseg {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
