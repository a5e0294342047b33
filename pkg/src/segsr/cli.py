"""Command-line entry point: ``segsr {split,degrade,train,eval,infer,export-maps}``.

Exit codes: 0 success, 2 non-finite loss during training, 3 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, describe_keys, load_config
from .data import IMAGE_SUFFIXES, DatasetManifest, degrade_tree, load_image, save_image, split_dataset
from .trainer import (
    EXIT_CONFIG,
    EXIT_NAN,
    EXIT_OK,
    NanLossError,
    ResumeMismatchError,
    evaluate,
    load_model,
    super_resolve,
    train,
)

log = logging.getLogger("segsr")


def _config_epilog():
    return "config keys (YAML file, or --set key=value):\n" + "\n".join(f"  {k}" for k in describe_keys())


def _add_config_args(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable), e.g. --set trainer.total_iters=500")


def _input_images(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        return [(p, p.relative_to(path)) for p in files]
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return [(path, Path(path.name))]


def cmd_split(args):
    manifest = split_dataset(args.root, (args.train, args.test), args.seed, args.scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    total_train = total_test = 0
    for name, (n_train, n_test) in manifest.counts().items():
        print(f"{name}\t{n_train}\t{n_test}")
        total_train += n_train
        total_test += n_test
    print(f"total\t{total_train}\t{total_test}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_degrade(args):
    n = degrade_tree(args.root, args.out, args.scale)
    print(f"wrote {n} LR images (x{args.scale}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    result = train(cfg, resume=args.resume)
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    model, cfg = load_model(args.checkpoint)
    if args.y_channel:
        cfg.metrics.y_channel = True
    if args.lpips:
        cfg.metrics.lpips = True
    if args.clipscore:
        cfg.metrics.clipscore = True
    manifest = DatasetManifest.load(args.manifest)
    report = evaluate(model, manifest, args.split, classes=args.classes or None,
                      metrics_cfg=cfg.metrics, model_cfg=cfg.model, max_images=args.max_images)
    report.write(args.out, args.stem)
    overall = report.overall()
    print(json.dumps({k: v for k, v in overall.items()}, sort_keys=True))
    return EXIT_OK


def cmd_infer(args):
    model, _ = load_model(args.checkpoint)
    model.eval()
    out = Path(args.out)
    for src, rel in _input_images(args.input):
        sr = super_resolve(model, load_image(src))
        dst = out / rel.with_suffix(".png")
        save_image(dst, sr.clamp(0.0, 1.0))
        print(f"{src} -> {dst} {tuple(sr.shape[-2:])}")
    return EXIT_OK


def cmd_export_maps(args):
    model, _ = load_model(args.checkpoint)
    model.eval()
    out = Path(args.out)
    for src, rel in _input_images(args.input):
        lr = torch.from_numpy(np.array(load_image(src)))[None]
        with torch.no_grad():
            guidance = model.guidance(lr)
        maps = guidance.maps[0]
        d = out / rel.with_suffix("")
        d.mkdir(parents=True, exist_ok=True)
        meta = {"source": str(src), "grid": list(guidance.grid), "maps": []}
        for i, m in enumerate(maps):
            name = f"unit_{i + 1:02d}.png"
            save_image(d / name, (m + 1.0) / 2.0)
            meta["maps"].append({"file": name, "unit": i + 1, "min": float(m.min()), "max": float(m.max())})
        (d / "maps.json").write_text(json.dumps(meta, indent=2) + "\n")
        print(f"{src} -> {d} ({len(maps)} maps)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="segsr", description="Semantic-guided super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    keys = _config_epilog()

    p = sub.add_parser("split", help="class-stratified train/test manifest", formatter_class=fmt,
                       epilog="Writes a JSON manifest (format segsr-manifest/1).\n\n" + keys)
    p.add_argument("--root", required=True, help="directory of class subfolders")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.add_argument("--train", type=int, default=3, help="train part of the ratio (default 3)")
    p.add_argument("--test", type=int, default=1, help="test part of the ratio (default 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=None, help="record the SR scale in the manifest")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("degrade", help="write a bicubic LR mirror tree", formatter_class=fmt, epilog=keys)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt, epilog=keys)
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split", formatter_class=fmt,
                       epilog="Writes <out>/<stem>.csv (per image) and <out>/<stem>.json (per class + overall).\n"
                              "Model and metric settings come from the checkpoint's config.\n\n" + keys)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--classes", nargs="*", help="restrict to these classes")
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="report")
    p.add_argument("--max-images", type=int, default=None)
    p.add_argument("--y-channel", action="store_true", help="PSNR/SSIM on BT.601 luma")
    p.add_argument("--lpips", action="store_true", help="add LPIPS (stub feature net)")
    p.add_argument("--clipscore", action="store_true", help="add CLIPScore (adapter-free encoder)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve images to PNG", formatter_class=fmt, epilog=keys)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-maps", help="write per-unit guidance maps as images + JSON",
                       formatter_class=fmt, epilog=keys)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="LR image file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ResumeMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except ValueError as exc:  # bad inputs: unknown classes, undersized images, unreadable weights
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
