"""End-to-end experiment: codec -> features -> FMs -> SR variants -> eval.

The comparison protocol trains one diffusion model per conditioning
source on identical data and seeds, builds a one-step SR generator on
each, and evaluates all of them (plus the bicubic baseline) on a shared
held-out split with shared degradations.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .. import codec as codec_mod
from .. import diffusion, features, sr
from ..degradation import DegradationConfig, degrade, sample_recipe
from ..imgio import save_image
from ..metrics import evaluate_set
from ..resize import resize
from .config import ExperimentConfig, config_hash, config_to_json
from .manifest import extract_patches, ingest
from .report import (comparison_grid, write_comparison_table, write_metrics_csv,
                     write_metrics_json, write_run_summary)


class StageError(RuntimeError):
    pass


def _fm_source_for(conditioning: str) -> str:
    # the null-conditioned generator reuses the feature-conditioned FM so
    # the comparison isolates what the conditioning tokens contribute
    return "label" if conditioning == "label" else "feature"


def held_out_patches(manifest, size: int, count: int, seed: int) -> list:
    """Up to ``count`` crops drawn only from val/test images."""
    rng = np.random.default_rng(seed)
    patches = []
    entries = manifest.files("val") + manifest.files("test")
    if not entries:
        raise StageError("no held-out images in the manifest")
    from ..imgio import load_image

    images = [(load_image(Path(manifest.root) / e.file), e.label) for e in entries]
    images = [(im, lab) for im, lab in images if min(im.shape[:2]) >= size]
    if not images:
        raise StageError(f"no held-out image is at least {size}px")
    while len(patches) < count:
        img, label = images[len(patches) % len(images)]
        top = int(rng.integers(img.shape[0] - size + 1))
        left = int(rng.integers(img.shape[1] - size + 1))
        patches.append((img[top:top + size, left:left + size], label))
    return patches


def evaluate_generator(generator, patches, featnet, out_root, method: str,
                       seed: int, deg_config: DegradationConfig,
                       border: int = 4, save_baseline: bool = False):
    """Degrade, super-resolve and score a patch list; returns the report."""
    out_root = Path(out_root)
    sr_dir = out_root / f"sr_{method}"
    hr_dir = out_root / "hr"
    bic_dir = out_root / "bicubic"
    for i, (hr, label) in enumerate(patches):
        name = f"{i:05d}.png"
        lr = degrade(hr, sample_recipe(seed + 7919 * i, deg_config))
        if save_baseline:
            save_image(hr_dir / name, hr)
            save_image(bic_dir / name, resize(lr, float(deg_config.scale_factor), "bicubic"))
        save_image(sr_dir / name, sr.sr_generate(lr, generator, label))
    return evaluate_set(sr_dir, hr_dir, featnet, border=border)


def run_experiment(config: ExperimentConfig) -> Path:
    """Execute every stage in dependency order; returns the artifact dir."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    (out / "config.json").write_text(config_to_json(config))

    manifest = ingest(config.data_dir, seed=config.seed)
    manifest.save(out / "manifest.json")
    deg_config = DegradationConfig(scale_factor=config.scale_factor)
    sched = diffusion.make_schedule(1000)

    codec, _ = codec_mod.train_codec(
        manifest, out_dir=out / "codec", steps=config.codec.steps,
        batch=config.codec.batch, lr=config.codec.lr, seed=config.seed,
        patch_count=config.codec.patch_count)

    featnet, _ = features.train_feature_net(
        manifest, out_dir=out / "features", steps=config.features.steps,
        batch=config.features.batch, lr=config.features.lr, seed=config.seed,
        min_patches=1, patch_count=max(1000, config.features.steps * 2))

    unet_config = (diffusion.UNetConfig.eff() if config.variant == "eff"
                   else diffusion.UNetConfig())

    fm_models = {}
    for source in sorted({_fm_source_for(c) for c in config.conditionings}):
        fm_cfg = diffusion.FMTrainConfig(
            lr=config.fm.lr, batch=config.fm.batch, steps=config.fm.steps,
            patch=config.patch, cond_dropout_p=config.fm.cond_dropout_p,
            ema_decay=config.fm.ema_decay, seed=config.seed)
        _, ema_model, _ = diffusion.train_fm(
            manifest, codec, featnet, source, fm_cfg, unet_config, sched,
            out_dir=out / f"fm_{source}", pool_size=config.fm.pool_size)
        fm_models[source] = ema_model

    generators = {}
    for cond in config.conditionings:
        fm = fm_models[_fm_source_for(cond)]
        sr_cfg = sr.SRConfig(
            t_star=config.sr.t_star, lora_rank=config.sr.lora_rank,
            lora_alpha=config.sr.lora_alpha, lambda_mse=config.sr.lambda_mse,
            lambda_percep=config.sr.lambda_percep, lambda_vsd=config.sr.lambda_vsd,
            lr=config.sr.lr, batch=config.sr.batch, patch=config.patch,
            seed=config.seed, scale_factor=config.scale_factor)
        generators[cond], _ = sr.train_sr(
            manifest, fm, codec, featnet, sr_cfg, sched, cond_source=cond,
            out_dir=out / f"sr_{cond}", steps=config.sr.steps,
            pool_size=config.sr.pool_size, deg_config=deg_config)

    patches = held_out_patches(manifest, config.patch, config.eval.max_images,
                               seed=config.seed + 1)
    eval_dir = out / "eval"
    rows = {}
    for i, cond in enumerate(config.conditionings):
        report = evaluate_generator(generators[cond], patches, featnet, eval_dir,
                                    cond, seed=config.seed + 2,
                                    deg_config=deg_config,
                                    border=config.eval.border,
                                    save_baseline=(i == 0))
        write_metrics_csv(report, eval_dir / f"metrics_{cond}.csv")
        write_metrics_json(report, eval_dir / f"metrics_{cond}.json",
                           extra={"config_hash": chash, "method": cond})
        rows[cond] = {"aggregate": report.aggregate,
                      "unet_params": diffusion.parameter_count(
                          generators[cond].base_unet)}

    bicubic_report = evaluate_set(eval_dir / "bicubic", eval_dir / "hr", featnet,
                                  border=config.eval.border)
    write_metrics_csv(bicubic_report, eval_dir / "metrics_bicubic.csv")
    write_metrics_json(bicubic_report, eval_dir / "metrics_bicubic.json",
                       extra={"config_hash": chash, "method": "bicubic"})
    rows["bicubic"] = {"aggregate": bicubic_report.aggregate, "unet_params": 0}

    notes = [f"unet variant: {config.variant}"]
    if config.variant == "eff":
        full_params = diffusion.parameter_count(
            diffusion.CondUNet(diffusion.UNetConfig()))
        eff_params = rows[config.conditionings[0]]["unet_params"]
        notes.append(f"eff/full parameter ratio: {eff_params / full_params:.4f}")

    write_comparison_table(rows, out / "comparison.csv")
    write_run_summary(out / "summary.txt", chash, config.seed, rows, notes=notes)

    from ..imgio import load_image

    for cond in config.conditionings:
        grid_rows = []
        for i in range(min(5, len(patches))):
            name = f"{i:05d}.png"
            grid_rows.append([load_image(eval_dir / "bicubic" / name),
                              load_image(eval_dir / f"sr_{cond}" / name),
                              load_image(eval_dir / "hr" / name)])
        comparison_grid(grid_rows, out / f"grid_{cond}.png")
    return out
