"""Command-line surface: ingest, degrade, training stages, inference, eval,
and the full comparison experiment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

OUTPUT_ROOT_ENV = "DESKSR_OUT"


def _out_path(args, default: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    target = Path(getattr(args, "out", None) or default)
    return target if target.is_absolute() else root / target


def _load_manifest(path):
    from .manifest import DatasetManifest

    if not Path(path).exists():
        raise SystemExit(f"stage input missing: manifest {path} "
                         f"(run `desksr ingest` first)")
    return DatasetManifest.load(path)


def _require(path, stage: str):
    if not Path(path).exists():
        raise SystemExit(f"stage input missing: {path} (run `desksr {stage}` first)")
    return path


def cmd_make_data(args):
    from .toydata import generate_toy_dataset

    out = _out_path(args, "toydata")
    paths = generate_toy_dataset(out, count=args.count, seed=args.seed, size=args.size)
    print(f"wrote {len(paths)} images under {out}")


def cmd_ingest(args):
    from .manifest import ingest

    manifest = ingest(args.data, seed=args.seed, variance_threshold=args.threshold)
    out = _out_path(args, "manifest.json")
    manifest.save(out)
    counts = {s: len(manifest.files(s)) for s in ("train", "val", "test")}
    print(f"manifest {out}: {counts}, rejected {manifest.rejected}")


def cmd_degrade(args):
    from ..degradation import (DegradationConfig, degrade, recipe_from_json,
                               recipe_to_json, sample_recipe)
    from ..imgio import IMAGE_EXTENSIONS, load_image, save_image

    in_dir = Path(args.infile)
    files = sorted(p for p in in_dir.rglob("*")
                   if p.suffix.lower() in IMAGE_EXTENSIONS) if in_dir.is_dir() else [in_dir]
    out = _out_path(args, "degraded")
    config = DegradationConfig(scale_factor=args.scale)
    fixed = (recipe_from_json(Path(args.recipe).read_text()) if args.recipe else None)
    for i, path in enumerate(files):
        recipe = fixed if fixed is not None else sample_recipe(args.seed + i, config)
        img = load_image(path)
        h, w = img.shape[:2]
        img = img[:h - h % args.scale, :w - w % args.scale]
        save_image(out / path.name, degrade(img, recipe))
        if fixed is None:
            (out / (path.stem + ".recipe.json")).write_text(recipe_to_json(recipe))
    print(f"degraded {len(files)} images into {out}")


def cmd_train_codec(args):
    from ..codec import train_codec

    manifest = _load_manifest(args.data)
    out = _out_path(args, "codec")
    _, history = train_codec(manifest, out_dir=out, steps=args.steps,
                             batch=args.batch, lr=args.lr, seed=args.seed)
    print(f"codec -> {out / 'codec.ckpt'} (final loss {history[-1]['loss']:.4f})")


def cmd_train_features(args):
    from ..features import train_feature_net

    manifest = _load_manifest(args.data)
    out = _out_path(args, "features")
    _, history = train_feature_net(manifest, out_dir=out, steps=args.steps,
                                   batch=args.batch, lr=args.lr, seed=args.seed)
    print(f"features -> {out / 'features.ckpt'} (final loss {history[-1]['loss']:.4f})")


def cmd_extract(args):
    from ..features import extract_tokens, load_feature_net
    from ..imgio import IMAGE_EXTENSIONS, load_image
    from .checkpoint import save_checkpoint

    net = load_feature_net(_require(args.features, "train-features"))
    in_dir = Path(args.infile)
    files = sorted(p for p in in_dir.rglob("*")
                   if p.suffix.lower() in IMAGE_EXTENSIONS) if in_dir.is_dir() else [in_dir]
    tensors = {str(p.name): extract_tokens(load_image(p), net).tokens for p in files}
    out = _out_path(args, "tokens.bin")
    save_checkpoint(tensors, out, meta={"kind": "tokens", "count": len(tensors)})
    print(f"extracted tokens for {len(tensors)} images -> {out}")


def cmd_train_fm(args):
    from ..codec import load_codec
    from ..diffusion import FMTrainConfig, UNetConfig, train_fm
    from ..features import load_feature_net

    manifest = _load_manifest(args.data)
    codec = load_codec(_require(args.codec, "train-codec"))
    featnet = (load_feature_net(_require(args.features, "train-features"))
               if args.conditioning == "feature" else None)
    config = FMTrainConfig(lr=args.lr, batch=args.batch, steps=args.steps,
                           cond_dropout_p=args.cond_dropout, seed=args.seed)
    unet_config = UNetConfig.eff() if args.variant == "eff" else UNetConfig()
    out = _out_path(args, f"fm_{args.conditioning}")
    train_fm(manifest, codec, featnet, args.conditioning, config, unet_config,
             out_dir=out)
    print(f"fm[{args.conditioning}] -> {out / 'fm.ckpt'}")


def cmd_train_sr(args):
    from ..codec import load_codec
    from ..diffusion import load_fm
    from ..features import load_feature_net
    from ..sr import SRConfig, train_sr

    manifest = _load_manifest(args.data)
    codec = load_codec(_require(args.codec, "train-codec"))
    fm, _, fm_cond = load_fm(_require(args.fm, "train-fm"))
    featnet = load_feature_net(_require(args.features, "train-features"))
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        config = SRConfig(**raw)
    else:
        config = SRConfig(lr=args.lr, batch=args.batch, seed=args.seed)
    cond = args.conditioning or ("feature" if fm_cond != "label" else "label")
    out = _out_path(args, f"sr_{cond}")
    train_sr(manifest, fm, codec, featnet, config, cond_source=cond,
             out_dir=out, steps=args.steps)
    print(f"sr[{cond}] -> {out / 'sr.ckpt'}")


def _build_generator(args):
    from ..codec import load_codec
    from ..diffusion import load_fm, make_schedule
    from ..features import load_feature_net
    from ..harness.checkpoint import load_checkpoint
    from ..sr import SRConfig, SRGenerator, load_sr_adapters

    codec = load_codec(_require(args.codec, "train-codec"))
    fm, _, _ = load_fm(_require(args.fm, "train-fm"))
    featnet = load_feature_net(_require(args.features, "train-features"))
    _, meta = load_checkpoint(_require(args.sr, "train-sr"))
    sr_cfg = SRConfig(**meta["config"])
    generator = SRGenerator(codec, fm, featnet, make_schedule(1000), sr_cfg,
                            meta.get("cond_source", "feature"))
    load_sr_adapters(generator, args.sr)
    return generator


def cmd_infer(args):
    from ..imgio import IMAGE_EXTENSIONS, load_image, save_image
    from ..sr import sr_generate
    from ..tiler import plan_tiles, tiled_apply

    generator = _build_generator(args)
    in_path = Path(args.lr)
    files = sorted(p for p in in_path.rglob("*")
                   if p.suffix.lower() in IMAGE_EXTENSIONS) if in_path.is_dir() else [in_path]
    out = _out_path(args, "sr_out")
    profile = "hann" if args.blend == "hann" else "linear_ramp"
    for path in files:
        img = load_image(path)
        if max(img.shape[:2]) <= args.tile:
            result = sr_generate(img, generator)
        else:
            plan = plan_tiles(img.shape[0], img.shape[1], args.tile, args.overlap,
                              weight_profile=profile)
            result = tiled_apply(lambda t: sr_generate(t, generator), img, plan,
                                 k=generator.config.scale_factor)
        save_image(out / path.name, result)
    print(f"super-resolved {len(files)} images -> {out}")


def cmd_eval(args):
    from ..features import load_feature_net
    from ..metrics import evaluate_set
    from .report import write_metrics_csv, write_metrics_json

    featnet = load_feature_net(_require(args.features, "train-features"))
    report = evaluate_set(args.sr, args.hr, featnet, border=args.border)
    out = _out_path(args, "report")
    base = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    write_metrics_csv(report, base.with_suffix(".csv"))
    write_metrics_json(report, base.with_suffix(".json"))
    agg = report.aggregate
    print(f"evaluated {report.counts['evaluated']} pairs: "
          f"psnr={agg.get('mean_psnr_db', float('nan')):.3f} "
          f"ssim={agg.get('mean_ssim', float('nan')):.4f} "
          f"percep={agg.get('mean_percep', float('nan')):.5f} "
          f"fid={agg.get('fid', float('nan')):.3f}")
    print(f"report -> {base.with_suffix('.csv')} / {base.with_suffix('.json')}")


def cmd_experiment(args):
    from .config import ExperimentConfig, load_config
    from .experiment import run_experiment

    if args.config:
        config = load_config(args.config)
    else:
        if not args.data:
            raise SystemExit("experiment needs --config or --data")
        config = ExperimentConfig(data_dir=args.data,
                                  out_dir=str(_out_path(args, "experiment")),
                                  seed=args.seed, variant=args.variant)
    out = run_experiment(config)
    print(f"experiment artifacts -> {out}")
    print((out / "summary.txt").read_text())


def cmd_report(args):
    from .report import write_comparison_table, write_run_summary

    run = Path(args.run)
    eval_dir = run / "eval"
    rows = {}
    for path in sorted(eval_dir.glob("metrics_*.json")):
        payload = json.loads(path.read_text())
        method = payload.get("method", path.stem.replace("metrics_", ""))
        rows[method] = {"aggregate": payload["aggregate"], "unet_params": ""}
    if not rows:
        raise SystemExit(f"no metric reports under {eval_dir}")
    chash = "unknown"
    cfg_path = run / "config.json"
    if cfg_path.exists():
        from .config import config_from_json, config_hash

        chash = config_hash(config_from_json(cfg_path.read_text()))
    write_comparison_table(rows, run / "comparison.csv")
    write_run_summary(run / "summary.txt", chash, args.seed, rows)
    print(f"re-emitted comparison.csv and summary.txt under {run}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desksr",
        description="desk-scale feature-conditioned one-step super-resolution")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a labeled procedural toy dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=240)
    p.add_argument("--size", type=int, default=96)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("ingest", help="scan an image folder into a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threshold", type=float, default=0.02)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("degrade", help="synthesize LR images from HR inputs")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--recipe", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-codec", help="train the latent autoencoder")
    p.add_argument("--data", required=True, help="manifest JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-features", help="train the feature extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.set_defaults(func=cmd_train_features)

    p = sub.add_parser("extract", help="extract conditioning tokens for images")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-fm", help="train a conditioned diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--conditioning", choices=("feature", "label", "null"),
                   default="feature")
    p.add_argument("--variant", choices=("full", "eff"), default="full")
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.set_defaults(func=cmd_train_fm)

    p = sub.add_parser("train-sr", help="train the one-step SR adapters")
    p.add_argument("--fm", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="SRConfig JSON")
    p.add_argument("--conditioning", choices=("feature", "label", "null"),
                   default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-5)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("infer", help="super-resolve images (tiled when large)")
    p.add_argument("--lr", required=True, help="LR image or directory")
    p.add_argument("--out", default=None)
    p.add_argument("--sr", required=True, help="SR adapter checkpoint")
    p.add_argument("--fm", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--blend", choices=("linear", "hann"), default="linear")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="full-reference metrics over two folders")
    p.add_argument("--sr", required=True)
    p.add_argument("--hr", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--features", required=True)
    p.add_argument("--border", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="full conditioning comparison")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--variant", choices=("full", "eff"), default="full")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-emit tables from stored eval results")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.random.seed(args.seed)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
