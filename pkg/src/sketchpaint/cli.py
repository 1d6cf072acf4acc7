"""Command line entry point: ``sketchpaint <subcommand> ...``.

The default torch device comes from ``SKETCHPAINT_DEVICE`` (``cpu`` when unset).
Training flags are generated from TrainConfig, so ``--learning-rate``, ``--mask-mix``
and ``--unet.base-width`` map to the fields of the same name. Values are parsed as JSON
when possible (``--mask-mix "[0.6, 0.3, 0.1]"``). A ``--config`` file is read first and
flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

DEVICE_ENV = "SKETCHPAINT_DEVICE"
log = logging.getLogger("sketchpaint")


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def setup_device():
    import torch

    device = os.environ.get(DEVICE_ENV, "cpu")
    if device != "cpu":
        torch.set_default_device(device)
    return device


def add_train_flags(p):
    from .config import TrainConfig

    for key in TrainConfig().to_dict():
        p.add_argument(_flag(key), dest=f"cfg:{key}", type=_value, default=None, metavar="VALUE")


def train_config_from_args(args):
    from .config import TrainConfig

    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            base[k[4:]] = v
    return TrainConfig.from_dict(base)


def cmd_synth_corpus(args):
    from .datagen import synth_corpus, write_corpus

    samples = synth_corpus(args.n, args.size, np.random.default_rng(args.seed))
    write_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_datagen(args):
    from .datagen import DatagenConfig, generate, read_corpus, write_dataset

    cfg = DatagenConfig(D=args.D, S=args.S, coverage_range=tuple(args.coverage),
                        sketch_types=tuple(args.sketch_type))
    samples = read_corpus(args.corpus)
    manifest = write_dataset(generate(samples, cfg, args.seed), args.out)
    print(f"wrote {len(samples)} four-tuples, manifest {manifest}")


def cmd_train(args):
    from .plotting import plot_loss_curve
    from .train import train

    config = train_config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    result = train(config, args.manifest, out, log_fn=print, limit=args.limit)
    (out / "losses.json").write_text(json.dumps(result.losses))
    if result.losses:
        plot_loss_curve(result.losses, out / "loss.png")
    print(f"eval loss {result.eval_initial:.5f} -> {result.eval_final:.5f}; checkpoint {result.checkpoint}")


def _load_gray(path):
    from .datagen.corpus import load_png

    return load_png(Path(path))[..., 0]


def cmd_infer(args):
    from .checkpoint import load_checkpoint
    from .datagen.corpus import load_png, save_png
    from .evaluate import schedule_for
    from .infer import infer

    ckpt = load_checkpoint(args.checkpoint)
    image = load_png(Path(args.masked_image))
    pm = load_png(Path(args.mask), mask=True).astype(np.float32)
    sketch = _load_gray(args.sketch) if args.sketch else np.zeros(pm.shape, np.float32)
    size = ckpt.config.image_size if ckpt.config else None
    out = infer(ckpt.model, ckpt.vae, image * pm[..., None], pm, sketch, args.caption, args.steps, args.cfg,
                args.seed, schedule_for(ckpt), size)
    save_png(Path(args.out), out)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    from .checkpoint import load_checkpoint
    from .evaluate import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    reports, summary = evaluate(ckpt, args.manifest, args.mode, args.out, args.steps, args.cfg, args.seed,
                                args.limit, args.black_sketch)
    print(json.dumps(summary, sort_keys=True))
    if args.panels:
        render_panels(ckpt, args.manifest, args.panels, args.steps, args.cfg, args.seed, args.panel_rows)


def render_panels(ckpt, manifest, path, steps, cfg, seed, rows=4):
    from .datagen.pipeline import read_manifest
    from .evaluate import schedule_for
    from .infer import infer
    from .plotting import plot_panels

    sched = schedule_for(ckpt)
    table = []
    for rec in read_manifest(manifest)[:rows]:
        target, pm = rec.load("image"), rec.load("partial_mask").astype(np.float32)
        sketch = rec.load("partial_sketch")
        masked = target * pm[..., None]
        run = lambda s: infer(ckpt.model, ckpt.vae, masked, pm, s, rec.caption, steps, cfg, seed, sched)
        table.append((masked, sketch, run(sketch), run(np.zeros_like(sketch)), target))
    plot_panels(table, path)
    print(f"wrote {path}")


def cmd_dump_features(args):
    from .checkpoint import load_checkpoint
    from .datagen.pipeline import read_manifest
    from .evaluate import schedule_for
    from .features import dump_features

    ckpt = load_checkpoint(args.checkpoint)
    records = {r.id: r for r in read_manifest(args.manifest)}
    rec = records[args.id] if args.id else next(iter(records.values()))
    dump_features(ckpt.model, ckpt.vae, rec.load("image"), rec.load("partial_mask"), rec.load("partial_sketch"),
                  rec.caption, args.out, args.scale, args.t, args.seed, schedule_for(ckpt))
    print(f"wrote feature maps for {rec.id} to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchpaint", description="Sketch-guided latent inpainting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-corpus", help="draw a synthetic instance corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("datagen", help="build four-tuples and a manifest from a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--D", type=int, default=5)
    s.add_argument("--S", type=int, default=4)
    s.add_argument("--coverage", type=float, nargs=2, default=(0.5, 0.6))
    s.add_argument("--sketch-type", nargs="+", default=["canny"])
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", help="train the adapters")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--limit", type=int, help="use only the first N samples")
    add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="inpaint one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--masked-image", required=True)
    s.add_argument("--mask", required=True, help="visible-pixel mask, white = keep")
    s.add_argument("--sketch", help="omit for a black sketch (text only)")
    s.add_argument("--caption", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg", type=float, default=7.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="metrics over a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="JSON-lines report path")
    s.add_argument("--mode", choices=("masked", "whole"), default="masked")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg", type=float, default=7.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int)
    s.add_argument("--black-sketch", action="store_true")
    s.add_argument("--panels", help="also render a comparison figure to this path")
    s.add_argument("--panel-rows", type=int, default=4)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("dump-features", help="export SBFI feature maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--id")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=1)
    s.add_argument("--t", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    setup_device()
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
