"""Procedural toy image generator.

Renders small labeled images (one subdirectory per pattern class) so the
whole pipeline can train and evaluate without any external dataset. The
patterns mix hard edges, smooth gradients and quasi-periodic texture,
which keeps both the autoencoder and the SR task non-trivial.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..imgio import save_image

CLASS_NAMES = ("stripes", "checker", "rects", "blobs", "waves", "strokes")


def _palette(rng):
    dark = rng.random(3) * 0.35 + 0.02
    bright = rng.random(3) * 0.35 + 0.6
    if rng.random() < 0.5:
        dark, bright = bright, dark
    return dark.astype(np.float32), bright.astype(np.float32)


def _coords(size):
    ax = np.linspace(0.0, 1.0, size, dtype=np.float32)
    return np.meshgrid(ax, ax, indexing="ij")


def render_class(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    name = CLASS_NAMES[label % len(CLASS_NAMES)]
    yy, xx = _coords(size)
    a, b = _palette(rng)
    img = np.empty((size, size, 3), dtype=np.float32)

    if name == "stripes":
        freq = rng.uniform(3, 9)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.cos(angle) * xx + np.sin(angle) * yy
        mask = (np.sin(2 * np.pi * freq * t + phase) > rng.uniform(-0.4, 0.4))
        img[:] = np.where(mask[..., None], a, b)
    elif name == "checker":
        n = int(rng.integers(4, 10))
        mask = ((xx * n).astype(int) + (yy * n).astype(int)) % 2 == 0
        img[:] = np.where(mask[..., None], a, b)
    elif name == "rects":
        img[:] = a * (0.6 + 0.4 * xx[..., None])
        for _ in range(int(rng.integers(3, 7))):
            c = (rng.random(3) * 0.9 + 0.05).astype(np.float32)
            y0, x0 = rng.integers(0, size - 8, size=2)
            h = int(rng.integers(6, size // 2))
            w = int(rng.integers(6, size // 2))
            img[y0:y0 + h, x0:x0 + w] = c
    elif name == "blobs":
        img[:] = b * (0.5 + 0.5 * yy[..., None])
        for _ in range(int(rng.integers(3, 8))):
            c = (rng.random(3) * 0.9 + 0.05).astype(np.float32)
            cy, cx = rng.random(2)
            ry, rx = rng.uniform(0.05, 0.3, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
            img[mask] = c
    elif name == "waves":
        f1, f2 = rng.uniform(2, 7, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        field = 0.5 + 0.25 * np.sin(2 * np.pi * f1 * xx + p1) \
            + 0.25 * np.sin(2 * np.pi * f2 * yy + p2)
        img[:] = a[None, None, :] * field[..., None] + b[None, None, :] * (1 - field[..., None])
    else:  # strokes
        img[:] = a * 0.9
        for _ in range(int(rng.integers(6, 14))):
            c = (rng.random(3) * 0.9 + 0.05).astype(np.float32)
            y0, x0 = rng.random(2)
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.2, 0.9)
            width = rng.uniform(0.01, 0.05)
            dy, dx = np.sin(ang), np.cos(ang)
            t = (yy - y0) * dy + (xx - x0) * dx
            d = np.abs((yy - y0) * dx - (xx - x0) * dy)
            mask = (d < width) & (t > 0) & (t < length)
            img[mask] = c

    # a diagonal luminance ramp keeps sparse or isoluminant patterns
    # comfortably above the curation variance threshold
    amp = rng.uniform(0.8, 1.0) * (1 if rng.random() < 0.5 else -1)
    ramp = ((yy + xx) / 2.0 - 0.5) * amp
    img = 0.5 + (img - img.mean()) * 0.9 + ramp[..., None]
    img += rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    for _ in range(3):
        luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        if float(luma.var()) >= 0.035:
            break
        img = np.clip(0.5 + (img - luma.mean()) * 1.5, 0.0, 1.0)
    return img.astype(np.float32)


def generate_toy_dataset(directory, count: int, seed: int = 0, size: int = 96) -> list:
    """Render ``count`` images under ``directory``/<class>/NNNN.png.

    Patterns are rendered at 2x and box-downsampled, so edges are
    antialiased the way real photographs are.
    """
    from ..resize import resize

    directory = Path(directory)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        label = i % len(CLASS_NAMES)
        img = resize(render_class(label, 2 * size, rng), 0.5, "area")
        path = directory / CLASS_NAMES[label] / f"{i:05d}.png"
        save_image(path, img)
        paths.append(path)
    return paths
