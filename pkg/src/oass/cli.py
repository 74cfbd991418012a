"""Command-line entry point: ``oass {synth,train,eval,stats,viz}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .cam import ImageSizeError
from .config import Config, ConfigError, load_config
from .data import (SHAPE_NAMES, VOC_CLASSES, AnnotationError, PlacementError, VocDataset,
                   load_voc_annotations, plot_shift_stats, prepare_eval, read_dataset,
                   shift_statistics, synth_dataset, write_dataset, write_shift_csv)
from .evaluation import evaluate, export_cam_visualization, sample_cams
from .training import NumericalError, fit, model_from_checkpoint

log = logging.getLogger("oass")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SPLIT_SEED = {"train": 0, "val": 1, "eval": 1, "test": 2}


def class_names(cfg: Config) -> list[str]:
    if cfg.data.kind == "voc":
        return list(VOC_CLASSES)
    return [SHAPE_NAMES[c % len(SHAPE_NAMES)] for c in range(cfg.data.synth.num_classes)]


def num_classes(cfg: Config) -> int:
    return len(VOC_CLASSES) if cfg.data.kind == "voc" else cfg.data.synth.num_classes


def synth_split(cfg: Config, split: str, seed: int):
    n = cfg.data.synth.num_images if split == "train" else cfg.data.eval_images
    scfg = replace(cfg.data.synth, num_images=n)
    return synth_dataset(scfg, [seed, SPLIT_SEED.get(split, 3)], prefix=split)


def load_split(cfg: Config, split: str, seed: int):
    if cfg.data.kind == "voc":
        if not cfg.data.root:
            raise ConfigError("data.root must point at a VOC directory when data.kind is 'voc'")
        return VocDataset(cfg.data.root, split, cfg.data.include_difficult)
    if cfg.data.kind != "synth":
        raise ConfigError(f"unknown data.kind {cfg.data.kind!r}")
    if cfg.data.root:
        return read_dataset(Path(cfg.data.root) / split)
    return synth_split(cfg, split, seed)


def _eval_samples(cfg: Config, split: str, seed: int):
    data = load_split(cfg, split, seed)
    size = cfg.data.input_size
    return [prepare_eval(data[i], size) if cfg.data.kind == "voc" else data[i] for i in range(len(data))]


def cmd_synth(args, cfg: Config) -> int:
    out = Path(args.out)
    for split in ("train", "val"):
        samples = synth_split(cfg, split, args.seed)
        write_dataset(samples, out / split, cfg.data.synth.num_classes)
        print(f"wrote {len(samples)} samples to {out / split}")
    return 0


def cmd_train(args, cfg: Config) -> int:
    train = load_split(cfg, cfg.data.train_split, cfg.train.seed)
    result = fit(cfg, train, num_classes(cfg), out_dir=args.out, device=args.device, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"epochs": result.epoch, "last": last}))
    return 0


def cmd_eval(args, cfg: Config) -> int:
    model, ckpt_cfg, _ = model_from_checkpoint(args.checkpoint, args.device)
    if args.config is None:
        cfg = ckpt_cfg
    if num_classes(cfg) != model.num_classes:
        raise ConfigError(f"config describes {num_classes(cfg)} classes, checkpoint {model.num_classes}")
    samples = _eval_samples(cfg, args.split, cfg.train.seed)
    report = evaluate(model, samples, digest=ckpt_cfg.digest(), device=args.device)
    names = class_names(cfg)
    print(report.table(names))
    if args.out:
        Path(args.out).write_text(report.to_csv(names))
    return 0


def cmd_stats(args, cfg: Config) -> int:
    if cfg.data.kind == "voc":
        records = load_voc_annotations(cfg.data.root, args.split, cfg.data.include_difficult)
        box_lists = [boxes for _, _, boxes in records]
    else:
        box_lists = [s.boxes for s in load_split(cfg, args.split, cfg.train.seed)]
    stats = shift_statistics(box_lists, args.target_size)
    names = class_names(cfg)
    write_shift_csv(stats, args.out_csv, names)
    if args.plot:
        plot_shift_stats(stats, args.plot, names)
    print(f"wrote shift statistics for {len(stats.per_class)} classes to {args.out_csv}")
    return 0


def cmd_viz(args, cfg: Config) -> int:
    model, ckpt_cfg, _ = model_from_checkpoint(args.checkpoint, args.device)
    if args.config is None:
        cfg = ckpt_cfg
    samples = _eval_samples(cfg, args.split, cfg.train.seed)
    by_id = {s.id: s for s in samples}
    ids = args.ids or [s.id for s in samples[: args.limit]]
    names = class_names(cfg)
    out = Path(args.out_dir)
    for sid in ids:
        if sid not in by_id:
            raise AnnotationError(f"unknown image id {sid!r} in split {args.split}")
        s = by_id[sid]
        path = export_cam_visualization(s.image, sample_cams(model, s), s.labels, out / f"{sid}.png", names)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    common.add_argument("--device", default="cpu")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set keypoint.strategy=ctopkw")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oass", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--out", required=True, help="run directory for metrics and checkpoints")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="mAP of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--out", help="CSV report path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="object location-shift statistics")
    s.add_argument("--split", default="train")
    s.add_argument("--target-size", type=int, default=512)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--plot", help="bar/variance plot image path")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("viz", parents=[common], help="CAM overlays for selected images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--ids", nargs="*")
    s.add_argument("--limit", type=int, default=8)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.train.seed = args.seed
        else:
            args.seed = cfg.train.seed
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AnnotationError, PlacementError, ImageSizeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
