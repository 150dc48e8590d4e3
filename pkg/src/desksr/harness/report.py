"""Metric tables, comparison grids and run summaries."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..imgio import save_image
from ..metrics import MetricReport

CSV_COLUMNS = ("id", "psnr_db", "ssim", "percep")

# Full-scale reference row (DRealSR benchmark, production training budget);
# kept for context in run summaries, never an acceptance target here.
REFERENCE_ROW = {"dataset": "DRealSR", "psnr_db": 29.71, "ssim": 0.820,
                 "lpips": 0.240, "dists": 0.190, "fid": 125.06}


def write_metrics_csv(report: MetricReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.per_image:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})


def write_metrics_json(report: MetricReport, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"aggregate": report.aggregate, "counts": report.counts,
               "skipped": report.skipped, "per_image": report.per_image}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def comparison_grid(triplets: list, path, pad: int = 2) -> None:
    """One PNG: a row per image, columns LR-bicubic | SR | HR."""
    rows = []
    for imgs in triplets:
        h = max(im.shape[0] for im in imgs)
        w = max(im.shape[1] for im in imgs)
        cells = []
        for im in imgs:
            cell = np.ones((h + 2 * pad, w + 2 * pad, 3), dtype=np.float32)
            cell[pad:pad + im.shape[0], pad:pad + im.shape[1]] = im
            cells.append(cell)
        rows.append(np.concatenate(cells, axis=1))
    save_image(path, np.concatenate(rows, axis=0))


def write_comparison_table(rows: dict, path) -> None:
    """Aggregate table: one line per method, reference-metric columns.

    Column order mirrors the reference-based block: PSNR up, SSIM up,
    perceptual distance down, FID down.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "psnr_db", "ssim", "percep", "fid", "unet_params"])
        for method, payload in rows.items():
            agg = payload["aggregate"]
            writer.writerow([method,
                             agg.get("mean_psnr_db", ""), agg.get("mean_ssim", ""),
                             agg.get("mean_percep", ""), agg.get("fid", ""),
                             payload.get("unet_params", "")])


def write_run_summary(path, config_hash: str, seed: int, rows: dict,
                      notes: list | None = None) -> None:
    lines = [
        "run summary",
        "===========",
        f"config hash : {config_hash}",
        f"seed        : {seed}",
        "",
        "results (reference-based metrics; higher PSNR/SSIM, lower percep/FID):",
    ]
    for method, payload in rows.items():
        agg = payload["aggregate"]
        lines.append(
            f"  {method:<10} psnr={agg.get('mean_psnr_db', float('nan')):.3f} "
            f"ssim={agg.get('mean_ssim', float('nan')):.4f} "
            f"percep={agg.get('mean_percep', float('nan')):.5f} "
            f"fid={agg.get('fid', float('nan')):.3f}")
    lines += [
        "",
        "context: a production-scale run of this recipe reports "
        f"PSNR {REFERENCE_ROW['psnr_db']} / SSIM {REFERENCE_ROW['ssim']} / "
        f"LPIPS {REFERENCE_ROW['lpips']} / DISTS {REFERENCE_ROW['dists']} / "
        f"FID {REFERENCE_ROW['fid']} on {REFERENCE_ROW['dataset']};",
        "those numbers are NOT reproduced at desk scale and are not targets",
        "for this run.",
    ]
    if notes:
        lines += [""] + list(notes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
