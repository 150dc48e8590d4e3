"""Overlap-blended tiled application of an image-to-image upscaler.

Tiles are planned with a fixed stride, blended with separable ramp (or
Hann) profiles, and normalized per pixel so the weights form an exact
partition of unity. Accumulation order is row-major and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_PROFILES = ("linear_ramp", "hann")


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile: int
    overlap: int
    row_anchors: tuple
    col_anchors: tuple
    weight_profile: str = "linear_ramp"

    @property
    def positions(self):
        return [(r, c) for r in self.row_anchors for c in self.col_anchors]


def _axis_anchors(dim: int, tile: int, stride: int) -> tuple:
    if dim <= tile:
        return (0,)
    anchors = list(range(0, dim - tile, stride))
    anchors.append(dim - tile)
    return tuple(dict.fromkeys(anchors))


def plan_tiles(h: int, w: int, tile: int, overlap: int,
               weight_profile: str = "linear_ramp") -> TilePlan:
    """Anchor grid of ``tile``-sized tiles with the given overlap."""
    if overlap < 0 or tile <= overlap:
        raise ValueError(f"need tile > overlap >= 0, got tile={tile} overlap={overlap}")
    if weight_profile not in WEIGHT_PROFILES:
        raise ValueError(f"unknown weight profile {weight_profile!r}")
    stride = tile - overlap
    return TilePlan(height=h, width=w, tile=tile, overlap=overlap,
                    row_anchors=_axis_anchors(h, tile, stride),
                    col_anchors=_axis_anchors(w, tile, stride),
                    weight_profile=weight_profile)


def _tile_extent(anchor: int, tile: int, dim: int) -> int:
    return min(tile, dim - anchor)


def _axis_profile(size: int, overlap: int, at_start: bool, at_end: bool, profile: str) -> np.ndarray:
    w = np.ones(size, dtype=np.float64)
    ramp_len = min(overlap, size)
    if ramp_len > 0:
        if profile == "linear_ramp":
            ramp = (np.arange(ramp_len, dtype=np.float64) + 0.5) / ramp_len
        else:  # hann
            ramp = np.sin(0.5 * np.pi * (np.arange(ramp_len, dtype=np.float64) + 0.5) / ramp_len) ** 2
        if not at_start:
            w[:ramp_len] = np.minimum(w[:ramp_len], ramp)
        if not at_end:
            w[size - ramp_len:] = np.minimum(w[size - ramp_len:], ramp[::-1])
    return w


def _raw_weight(plan: TilePlan, anchor_r: int, anchor_c: int) -> np.ndarray:
    th = _tile_extent(anchor_r, plan.tile, plan.height)
    tw = _tile_extent(anchor_c, plan.tile, plan.width)
    wr = _axis_profile(th, plan.overlap, anchor_r == 0, anchor_r + th >= plan.height,
                       plan.weight_profile)
    wc = _axis_profile(tw, plan.overlap, anchor_c == 0, anchor_c + tw >= plan.width,
                       plan.weight_profile)
    return wr[:, None] * wc[None, :]


def blend_weights(plan: TilePlan) -> list:
    """Per-tile weight maps normalized so they sum to 1 at every pixel."""
    total = np.zeros((plan.height, plan.width), dtype=np.float64)
    raws = []
    for r, c in plan.positions:
        raw = _raw_weight(plan, r, c)
        raws.append(raw)
        total[r:r + raw.shape[0], c:c + raw.shape[1]] += raw
    out = []
    for (r, c), raw in zip(plan.positions, raws):
        out.append(raw / total[r:r + raw.shape[0], c:c + raw.shape[1]])
    return out


def tiled_apply(fn, img: np.ndarray, plan: TilePlan, k: int) -> np.ndarray:
    """Apply ``fn`` (tile -> k*tile image) per tile and blend the results."""
    if img.shape[0] != plan.height or img.shape[1] != plan.width:
        raise ValueError(f"image {img.shape[:2]} does not match plan "
                         f"{(plan.height, plan.width)}")
    out_shape = (plan.height * k, plan.width * k) + img.shape[2:]
    out = np.zeros(out_shape, dtype=np.float64)
    weights = blend_weights(plan)
    for (r, c), w in zip(plan.positions, weights):
        th, tw = w.shape
        tile_img = img[r:r + th, c:c + tw]
        result = np.asarray(fn(tile_img))
        if result.shape[:2] != (th * k, tw * k):
            raise ValueError(
                f"tile at ({r}, {c}): fn returned {result.shape[:2]}, "
                f"expected {(th * k, tw * k)}")
        w_up = np.repeat(np.repeat(w, k, axis=0), k, axis=1)
        if img.ndim == 3:
            w_up = w_up[..., None]
        out[r * k:(r + th) * k, c * k:(c + tw) * k] += w_up * result
    return out.astype(img.dtype if img.dtype == np.float64 else np.float32)
