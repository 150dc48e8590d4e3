"""Full-reference IQA: Y-channel PSNR/SSIM, feature-space perceptual
distance, and Fréchet feature distance over global-token statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0
COV_EPS = 1e-6


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing (16-235) luma from an RGB buffer in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB image, got {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB on the 255 peak convention; identical planes cap at 100."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(ax**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w1d: np.ndarray) -> np.ndarray:
    half = len(w1d) // 2
    out = ndimage.convolve1d(x, w1d, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, w1d, axis=1, mode="nearest")
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over the valid region, 255-scale constants."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image {a.shape} smaller than SSIM window {window}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    w = _gaussian_window(window, sigma)
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def perceptual_distance(a: np.ndarray, b: np.ndarray, feature_net) -> float:
    """Mean squared difference of unit-normalized per-layer token maps.

    ``feature_net`` is a trained (or any) features.FeatureNet; inputs are
    RGB buffers of equal size, resampled to the net's canonical input.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    from . import features  # local import to keep metrics usable standalone

    maps_a = features.layer_token_maps(a, feature_net)
    maps_b = features.layer_token_maps(b, feature_net)
    dists = [float(np.mean((ta - tb) ** 2)) for ta, tb in zip(maps_a, maps_b)]
    return float(np.mean(dists))


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # (D,)
    cov: np.ndarray   # (D, D)


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Fréchet distance between two Gaussian feature fits.

    Matrix square root via symmetric eigendecomposition with negative
    eigenvalues clipped at 0.
    """
    if stats_a.mean.shape != stats_b.mean.shape:
        raise ValueError("feature dimension mismatch")
    mu_a = stats_a.mean.astype(np.float64)
    mu_b = stats_b.mean.astype(np.float64)
    ca = stats_a.cov.astype(np.float64)
    cb = stats_b.cov.astype(np.float64)

    def _sqrtm_sym(m):
        vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T

    sa = _sqrtm_sym(ca)
    covmean = _sqrtm_sym(sa @ cb @ sa)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean))
    return max(val, 0.0)


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)  # {id, psnr_db, ssim, percep}
    aggregate: dict = field(default_factory=dict)  # mean psnr/ssim/percep (+ fid)
    counts: dict = field(default_factory=dict)     # evaluated / skipped
    skipped: list = field(default_factory=list)    # unmatched filenames


def evaluate_pair(sr: np.ndarray, hr: np.ndarray, feature_net, border: int = 4) -> dict:
    """PSNR/SSIM on border-cropped Y planes, perceptual distance on RGB."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    ys = rgb_to_y(sr)
    yh = rgb_to_y(hr)
    if border > 0 and min(ys.shape) > 2 * border + 11:
        ys = ys[border:-border, border:-border]
        yh = yh[border:-border, border:-border]
    return {
        "psnr_db": float(psnr(ys, yh)),
        "ssim": float(ssim(ys, yh)),
        "percep": float(perceptual_distance(sr, hr, feature_net)),
    }


def evaluate_set(sr_dir, hr_dir, feature_net, border: int = 4) -> MetricReport:
    """Per-image PSNR/SSIM/percep plus set-level FID over matched files."""
    from . import features
    from .imgio import IMAGE_EXTENSIONS, load_image

    sr_dir, hr_dir = Path(sr_dir), Path(hr_dir)
    sr_names = {p.name for p in sr_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS}
    hr_names = {p.name for p in hr_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS}
    matched = sorted(sr_names & hr_names)
    report = MetricReport()
    report.skipped = sorted(sr_names ^ hr_names)

    sr_images, hr_images = [], []
    for name in matched:
        sr_img = load_image(sr_dir / name)
        hr_img = load_image(hr_dir / name)
        if sr_img.shape != hr_img.shape:
            report.skipped.append(name)
            continue
        row = {"id": name}
        row.update(evaluate_pair(sr_img, hr_img, feature_net, border=border))
        report.per_image.append(row)
        sr_images.append(sr_img)
        hr_images.append(hr_img)

    report.counts = {"evaluated": len(report.per_image), "skipped": len(report.skipped)}
    if report.per_image:
        for key in ("psnr_db", "ssim", "percep"):
            report.aggregate[f"mean_{key}"] = float(
                np.mean([row[key] for row in report.per_image])
            )
    if len(sr_images) >= 2:
        report.aggregate["fid"] = fid(
            features.feature_stats(sr_images, feature_net),
            features.feature_stats(hr_images, feature_net),
        )
    return report
