"""Seeded second-order degradation pipeline: HR patch -> realistic LR.

Each stage runs blur -> resize -> noise -> JPEG; two stages are followed
by an optional sinc filter and a final resize to exactly HR/scale. A
DegradationRecipe freezes every sampled parameter, so replaying it on the
same HR input is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import cv2
import numpy as np
from scipy import special

from .imgio import check_image, from_uint8, luminance, to_uint8
from .resize import MODES, resize, resize_to

KERNEL_KINDS = ("iso_gaussian", "aniso_gaussian", "generalized_gaussian", "plateau", "sinc")
NOISE_KINDS = ("gaussian", "poisson")


@dataclass(frozen=True)
class BlurKernel:
    kind: str
    size: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.size}")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    sigma: float = 0.0
    scale: float = 1.0
    gray: bool = False

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "poisson" and self.scale <= 0:
            raise ValueError("poisson scale must be > 0")


@dataclass(frozen=True)
class StageSpec:
    blur: BlurKernel
    resize_scale: float
    resize_mode: str
    noise: NoiseSpec
    jpeg_quality: int

    def __post_init__(self):
        if self.resize_scale <= 0:
            raise ValueError("resize_scale must be > 0")
        if self.resize_mode not in MODES:
            raise ValueError(f"unknown resize mode {self.resize_mode!r}")
        if not 30 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality out of range [30, 100]")


@dataclass(frozen=True)
class DegradationRecipe:
    seed: int
    stages: tuple
    final_sinc: Optional[BlurKernel]
    final_resize_mode: str
    scale_factor: int

    def __post_init__(self):
        if len(self.stages) != 2:
            raise ValueError("a recipe has exactly two stages")
        if self.scale_factor not in (2, 4):
            raise ValueError("scale_factor must be 2 or 4")


@dataclass(frozen=True)
class DegradationConfig:
    """Sampling ranges for recipe generation (lo <= hi everywhere)."""

    scale_factor: int = 4
    kernel_sizes: tuple = (7, 9, 11, 13, 15, 17, 19, 21)
    kind_probs: tuple = (0.45, 0.25, 0.12, 0.03, 0.15)  # order: KERNEL_KINDS
    sigma_range: tuple = (0.2, 3.0)
    gg_beta_range: tuple = (0.5, 4.0)
    plateau_beta_range: tuple = (1.0, 2.0)
    sinc_cutoff_range: tuple = (np.pi / 3, np.pi)
    stage1_scale_range: tuple = (0.15, 1.5)
    stage2_scale_range: tuple = (0.3, 1.2)
    gaussian_sigma_range: tuple = (1.0 / 255, 30.0 / 255)
    poisson_scale_range: tuple = (0.05, 3.0)
    gaussian_prob: float = 0.5
    gray_noise_prob: float = 0.4
    jpeg_range: tuple = (30, 95)
    final_sinc_prob: float = 0.8

    def __post_init__(self):
        for name in ("sigma_range", "gg_beta_range", "plateau_beta_range", "sinc_cutoff_range",
                     "stage1_scale_range", "stage2_scale_range", "gaussian_sigma_range",
                     "poisson_scale_range", "jpeg_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"invalid range {name}: lo {lo} > hi {hi}")
        if abs(sum(self.kind_probs) - 1.0) > 1e-9 or len(self.kind_probs) != len(KERNEL_KINDS):
            raise ValueError("kind_probs must match KERNEL_KINDS and sum to 1")


def _radial_grids(size: int, rotation: float = 0.0):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax)
    if rotation != 0.0:
        c, s = np.cos(rotation), np.sin(rotation)
        xx, yy = c * xx + s * yy, -s * xx + c * yy
    return xx, yy


def kernel_weights(k: BlurKernel) -> np.ndarray:
    """Materialize the normalized 2-D weight array for a kernel spec."""
    p = k.params
    if k.kind == "iso_gaussian":
        xx, yy = _radial_grids(k.size)
        w = np.exp(-(xx**2 + yy**2) / (2.0 * p["sigma_x"] ** 2))
    elif k.kind == "aniso_gaussian":
        xx, yy = _radial_grids(k.size, p.get("rotation_rad", 0.0))
        w = np.exp(-(xx**2 / (2.0 * p["sigma_x"] ** 2) + yy**2 / (2.0 * p["sigma_y"] ** 2)))
    elif k.kind == "generalized_gaussian":
        xx, yy = _radial_grids(k.size)
        d2 = (xx**2 + yy**2) / (2.0 * p["sigma_x"] ** 2)
        w = np.exp(-np.power(d2, p["beta"]))
    elif k.kind == "plateau":
        xx, yy = _radial_grids(k.size)
        d2 = (xx**2 + yy**2) / (2.0 * p["sigma_x"] ** 2)
        w = 1.0 / (1.0 + np.power(d2, p["beta"]))
    elif k.kind == "sinc":
        cutoff = p["cutoff_rad"]
        xx, yy = _radial_grids(k.size)
        r = np.sqrt(xx**2 + yy**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = cutoff * special.j1(cutoff * r) / (2.0 * np.pi * r)
        w[r == 0] = cutoff**2 / (4.0 * np.pi)
    else:  # pragma: no cover - guarded by BlurKernel
        raise ValueError(k.kind)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError(f"degenerate kernel: {k}")
    return w / total


def delta_kernel(size: int = 3) -> BlurKernel:
    return BlurKernel(kind="iso_gaussian", size=size, params={"sigma_x": 1e-8})


def sample_blur_kernel(rng: np.random.Generator, config: DegradationConfig,
                       allow_sinc: bool = True) -> BlurKernel:
    """Draw a kernel spec from the configured families and ranges."""
    probs = np.asarray(config.kind_probs, dtype=np.float64)
    if not allow_sinc:
        probs = probs.copy()
        probs[KERNEL_KINDS.index("sinc")] = 0.0
        probs /= probs.sum()
    kind = KERNEL_KINDS[rng.choice(len(KERNEL_KINDS), p=probs)]
    size = int(rng.choice(config.kernel_sizes))
    params: dict = {}
    if kind == "iso_gaussian":
        params["sigma_x"] = float(rng.uniform(*config.sigma_range))
    elif kind == "aniso_gaussian":
        sx = float(rng.uniform(*config.sigma_range))
        sy = float(rng.uniform(*config.sigma_range))
        while sy == sx:  # enforce genuine anisotropy
            sy = float(rng.uniform(*config.sigma_range))
        params.update(sigma_x=sx, sigma_y=sy, rotation_rad=float(rng.uniform(-np.pi, np.pi)))
    elif kind == "generalized_gaussian":
        params["sigma_x"] = float(rng.uniform(*config.sigma_range))
        params["beta"] = float(rng.uniform(*config.gg_beta_range))
    elif kind == "plateau":
        params["sigma_x"] = float(rng.uniform(*config.sigma_range))
        params["beta"] = float(rng.uniform(*config.plateau_beta_range))
    else:  # sinc
        params["cutoff_rad"] = float(rng.uniform(*config.sinc_cutoff_range))
    return BlurKernel(kind=kind, size=size, params=params)


def apply_kernel(img: np.ndarray, k: BlurKernel) -> np.ndarray:
    """2-D convolution with reflect padding; output clamped to [0, 1].

    All kernel families here are centrally symmetric, so cv2's
    correlation is the same operation as convolution.
    """
    if img.ndim == 3:
        check_image(img)
    if k.size > min(img.shape[0], img.shape[1]):
        raise ValueError(f"kernel size {k.size} exceeds image dims {img.shape[:2]}")
    w = kernel_weights(k).astype(np.float32)
    out = cv2.filter2D(img.astype(np.float32), -1, w, borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def add_noise(img: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian or Poisson shot noise, optionally channel-correlated (gray)."""
    if spec.kind == "gaussian":
        if spec.sigma == 0.0:
            return img
        if spec.gray and img.ndim == 3:
            n = rng.normal(0.0, spec.sigma, size=img.shape[:2]).astype(np.float32)[..., None]
        else:
            n = rng.normal(0.0, spec.sigma, size=img.shape).astype(np.float32)
        return np.clip(img + n, 0.0, 1.0).astype(np.float32)
    # poisson: photon count inversely proportional to the noise scale
    lam = 255.0 / spec.scale
    base = np.clip(img, 0.0, 1.0)
    if spec.gray and img.ndim == 3:
        y = luminance(base)
        n = (rng.poisson(y * lam) / lam - y).astype(np.float32)[..., None]
        return np.clip(img + n, 0.0, 1.0).astype(np.float32)
    shot = rng.poisson(base * lam) / lam
    return np.clip(shot, 0.0, 1.0).astype(np.float32)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode to baseline JPEG at the given quality and decode back."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality out of range [1, 100]: {quality}")
    bgr = cv2.cvtColor(to_uint8(img), cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".jpg", bgr, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise RuntimeError("JPEG encode failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if dec is None:
        raise RuntimeError("JPEG decode failed")
    return from_uint8(cv2.cvtColor(dec, cv2.COLOR_BGR2RGB))


def sample_recipe(seed: int, config: DegradationConfig = DegradationConfig()) -> DegradationRecipe:
    """Draw a fully-determined recipe; all randomness comes from the seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    stages = []
    for scale_range in (config.stage1_scale_range, config.stage2_scale_range):
        blur = sample_blur_kernel(rng, config)
        rscale = float(rng.uniform(*scale_range))
        rmode = MODES[rng.choice(len(MODES))]
        if rng.random() < config.gaussian_prob:
            noise = NoiseSpec(kind="gaussian", sigma=float(rng.uniform(*config.gaussian_sigma_range)),
                              gray=bool(rng.random() < config.gray_noise_prob))
        else:
            noise = NoiseSpec(kind="poisson", scale=float(rng.uniform(*config.poisson_scale_range)),
                              gray=bool(rng.random() < config.gray_noise_prob))
        quality = int(rng.integers(config.jpeg_range[0], config.jpeg_range[1] + 1))
        stages.append(StageSpec(blur=blur, resize_scale=rscale, resize_mode=rmode,
                                noise=noise, jpeg_quality=quality))
    final_sinc = None
    if rng.random() < config.final_sinc_prob:
        size = int(rng.choice(config.kernel_sizes))
        final_sinc = BlurKernel(kind="sinc", size=size,
                                params={"cutoff_rad": float(rng.uniform(*config.sinc_cutoff_range))})
    final_mode = MODES[rng.choice(len(MODES))]
    return DegradationRecipe(seed=int(seed), stages=tuple(stages), final_sinc=final_sinc,
                             final_resize_mode=final_mode, scale_factor=config.scale_factor)


def identity_recipe(scale_factor: int = 4) -> DegradationRecipe:
    """Degenerate recipe whose pipeline collapses to the final area resize."""
    stage = StageSpec(blur=delta_kernel(), resize_scale=1.0, resize_mode="bicubic",
                      noise=NoiseSpec(kind="gaussian", sigma=0.0), jpeg_quality=100)
    return DegradationRecipe(seed=0, stages=(stage, stage), final_sinc=None,
                             final_resize_mode="area", scale_factor=scale_factor)


# intermediate images may never shrink below the largest kernel footprint
_MIN_STAGE_PX = 24


def degrade(hr: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    """Run the full pipeline; LR dims are exactly HR dims / scale_factor.

    Stage resize scales are clamped so the intermediate image keeps a
    short side of at least 24 px; the HR input must therefore be at
    least 32 px on its short side.
    """
    check_image(hr)
    sf = recipe.scale_factor
    if hr.shape[0] % sf or hr.shape[1] % sf:
        raise ValueError(f"HR dims {hr.shape[:2]} not divisible by scale_factor {sf}")
    if min(hr.shape[:2]) < 32:
        raise ValueError(f"HR short side {min(hr.shape[:2])} below the 32 px minimum")
    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(recipe.seed, spawn_key=(1,))))
    out = hr.astype(np.float32)
    for stage in recipe.stages:
        out = apply_kernel(out, stage.blur)
        scale = max(stage.resize_scale, _MIN_STAGE_PX / min(out.shape[:2]))
        out = np.clip(resize(out, scale, stage.resize_mode), 0.0, 1.0)
        out = add_noise(out, stage.noise, noise_rng)
        if stage.jpeg_quality < 100:  # quality 100 denotes the lossless identity limit
            out = jpeg_roundtrip(out, stage.jpeg_quality)
    if recipe.final_sinc is not None:
        out = apply_kernel(out, recipe.final_sinc)
    out = resize_to(out, (hr.shape[0] // sf, hr.shape[1] // sf), recipe.final_resize_mode)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def recipe_to_json(recipe: DegradationRecipe) -> str:
    """Serialize a recipe to JSON; round-trips losslessly."""
    payload = asdict(recipe)
    payload["stages"] = [asdict(s) for s in recipe.stages]
    if recipe.final_sinc is not None:
        payload["final_sinc"] = asdict(recipe.final_sinc)
    return json.dumps(payload, indent=2)


def recipe_from_json(text: str) -> DegradationRecipe:
    raw = json.loads(text)
    stages = tuple(
        StageSpec(blur=BlurKernel(**s["blur"]), resize_scale=s["resize_scale"],
                  resize_mode=s["resize_mode"], noise=NoiseSpec(**s["noise"]),
                  jpeg_quality=s["jpeg_quality"])
        for s in raw["stages"]
    )
    sinc = BlurKernel(**raw["final_sinc"]) if raw.get("final_sinc") else None
    return DegradationRecipe(seed=raw["seed"], stages=stages, final_sinc=sinc,
                             final_resize_mode=raw["final_resize_mode"],
                             scale_factor=raw["scale_factor"])
