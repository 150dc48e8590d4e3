"""Separable image resampling with explicit weight tables.

Three modes: ``area`` (box averaging), ``bilinear`` (triangle filter) and
``bicubic`` (Catmull-Rom cubic, a=-0.5). Sample positions follow the
half-pixel convention, out-of-range taps are reflected at the border, and
each output pixel's weights are normalized to sum to 1, so constant
images are preserved exactly and scale 1.0 is the identity.

The same weight tables drive a numpy path (arbitrary image sizes) and a
dense-matrix torch path (small training-time tensors, differentiable).
"""

from functools import lru_cache

import numpy as np
import torch

MODES = ("area", "bilinear", "bicubic")


def _cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    w = np.where(
        x <= 1.0,
        (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0,
        np.where(x < 2.0, a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a, 0.0),
    )
    return w


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the border pixel."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@lru_cache(maxsize=256)
def resample_taps(n_in: int, n_out: int, mode: str):
    """Tap indices and weights for one axis.

    Returns (idx, w): int arrays of shape (n_out, taps) and float64
    weights normalized to sum to 1 per output sample.
    """
    if mode not in MODES:
        raise ValueError(f"unknown resize mode {mode!r}, expected one of {MODES}")
    if n_out < 1:
        raise ValueError("output dimension must be >= 1")
    scale = n_out / n_in

    if mode == "area":
        lo = np.arange(n_out, dtype=np.float64) / scale
        hi = (np.arange(n_out, dtype=np.float64) + 1.0) / scale
        taps = int(np.ceil(hi - lo).max()) + 1
        first = np.floor(lo).astype(np.int64)
        idx = first[:, None] + np.arange(taps)[None, :]
        cover_lo = np.maximum(lo[:, None], idx.astype(np.float64))
        cover_hi = np.minimum(hi[:, None], idx.astype(np.float64) + 1.0)
        w = np.clip(cover_hi - cover_lo, 0.0, None)
    else:
        centers = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
        if mode == "bilinear":
            first = np.floor(centers).astype(np.int64)
            idx = first[:, None] + np.arange(2)[None, :]
            frac = centers - first
            w = np.stack([1.0 - frac, frac], axis=1)
        else:  # bicubic
            first = np.floor(centers).astype(np.int64) - 1
            idx = first[:, None] + np.arange(4)[None, :]
            w = _cubic_weight(idx.astype(np.float64) - centers[:, None])

    w = w / w.sum(axis=1, keepdims=True)
    idx = _reflect_indices(idx, n_in)
    idx.setflags(write=False)
    w.setflags(write=False)
    return idx, w


@lru_cache(maxsize=256)
def resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis."""
    idx, w = resample_taps(n_in, n_out, mode)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.repeat(np.arange(n_out), idx.shape[1])
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def _apply_axis0(img: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros((idx.shape[0],) + img.shape[1:], dtype=np.float64)
    for k in range(idx.shape[1]):
        wk = w[:, k].reshape((-1,) + (1,) * (img.ndim - 1))
        out += wk * img[idx[:, k]]
    return out


def resize_to(img: np.ndarray, out_hw, mode: str = "bicubic") -> np.ndarray:
    """Resample an HxW or HxWxC array to an exact (height, width)."""
    h_out, w_out = int(out_hw[0]), int(out_hw[1])
    if h_out < 1 or w_out < 1:
        raise ValueError(f"output dimensions must be >= 1, got {(h_out, w_out)}")
    dtype = img.dtype if img.dtype == np.float64 else np.float32
    out = _apply_axis0(np.asarray(img, dtype=np.float64), *resample_taps(img.shape[0], h_out, mode))
    out = np.swapaxes(out, 0, 1)
    out = _apply_axis0(out, *resample_taps(img.shape[1], w_out, mode))
    return np.swapaxes(out, 0, 1).astype(dtype)


def resize(img: np.ndarray, scale: float, mode: str = "bicubic") -> np.ndarray:
    """Resample by a scale factor; output dims = round(dim * scale)."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out_hw = (int(round(img.shape[0] * scale)), int(round(img.shape[1] * scale)))
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise ValueError(f"scale {scale} collapses {img.shape[:2]} to {out_hw}")
    return resize_to(img, out_hw, mode)


def resize_torch(x: torch.Tensor, out_hw, mode: str = "bicubic") -> torch.Tensor:
    """Differentiable resample of a (..., H, W) tensor via dense matrices.

    Uses the same weight tables as the numpy path; intended for small
    training-time tensors (the matrices are dense).
    """
    h_out, w_out = int(out_hw[0]), int(out_hw[1])
    mh = torch.from_numpy(resample_matrix(x.shape[-2], h_out, mode).copy()).to(x.dtype)
    mw = torch.from_numpy(resample_matrix(x.shape[-1], w_out, mode).copy()).to(x.dtype)
    return torch.matmul(torch.matmul(mh, x), mw.transpose(0, 1))
