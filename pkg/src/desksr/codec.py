"""Latent autoencoder: spatial factor 8, 4 latent channels.

A small KL-regularized encoder/decoder pair trained from scratch; the
rest of the stack treats it as a frozen pixel<->latent codec.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imgio import check_image

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
PERCEP_NET_SEED = 0x5EED


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 4
    down_factor: int = 8
    channel_widths: tuple = (32, 64, 128, 128)
    kl_weight: float = 1e-6
    perceptual_weight: float = 0.1

    def __post_init__(self):
        if self.down_factor != 2 ** (len(self.channel_widths) - 1):
            raise ValueError("down_factor must equal 2^(len(channel_widths)-1)")
        if self.latent_channels != 4:
            raise ValueError("latent_channels is fixed at 4")


@dataclass
class LatentDistribution:
    mean: np.ndarray          # (C, h, w)
    log_variance: np.ndarray  # same shape, clamped to [-30, 20]

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance shapes differ")
        if not np.isfinite(self.log_variance).all():
            raise ValueError("log_variance contains non-finite values")


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.norm1 = _norm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = _norm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        widths = config.channel_widths
        layers = [nn.Conv2d(3, widths[0], 3, padding=1)]
        for i in range(len(widths) - 1):
            layers.append(ResBlock(widths[i], widths[i]))
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        layers.append(ResBlock(widths[-1], widths[-1]))
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(_norm(widths[-1]), nn.SiLU(),
                                  nn.Conv2d(widths[-1], 2 * config.latent_channels, 3, padding=1))

    def forward(self, x):
        h = self.head(self.body(x))
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class Decoder(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        widths = config.channel_widths
        layers = [nn.Conv2d(config.latent_channels, widths[-1], 3, padding=1),
                  ResBlock(widths[-1], widths[-1])]
        for i in range(len(widths) - 1, 0, -1):
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
            layers.append(ResBlock(widths[i - 1], widths[i - 1]))
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(_norm(widths[0]), nn.SiLU(),
                                  nn.Conv2d(widths[0], 3, 3, padding=1))

    def forward(self, z):
        return self.head(self.body(z))


class Codec(nn.Module):
    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def encode_t(self, x: torch.Tensor):
        return self.encoder(x)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    check_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def encode(img: np.ndarray, codec: Codec) -> LatentDistribution:
    """Encode an HxWx3 buffer; H and W must be divisible by the down factor."""
    f = codec.config.down_factor
    if img.shape[0] % f or img.shape[1] % f:
        raise ValueError(f"image dims {img.shape[:2]} not divisible by {f}")
    with torch.no_grad():
        mean, logvar = codec.encode_t(_to_tensor(img))
    return LatentDistribution(mean=mean[0].numpy(), log_variance=logvar[0].numpy())


def reparameterize(dist: LatentDistribution, rng: np.random.Generator) -> np.ndarray:
    """z = mean + exp(log_variance / 2) * n with n ~ N(0, I)."""
    n = rng.standard_normal(dist.mean.shape)
    return (dist.mean + np.exp(dist.log_variance / 2.0) * n).astype(np.float32)


def decode(z: np.ndarray, codec: Codec) -> np.ndarray:
    """Decode a (4, h, w) latent to an 8h x 8w x 3 buffer clamped to [0, 1]."""
    if z.ndim != 3 or z.shape[0] != codec.config.latent_channels:
        raise ValueError(f"expected ({codec.config.latent_channels}, h, w) latent, "
                         f"got {z.shape}")
    with torch.no_grad():
        out = codec.decode_t(torch.from_numpy(np.ascontiguousarray(z)).float().unsqueeze(0))
    return np.clip(out[0].numpy().transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-element KL(N(mean, exp(logvar)) || N(0, 1)), averaged."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def perceptual_reference_net():
    """Frozen random-init feature net used as the codec's perceptual metric.

    The trained feature extractor does not exist yet when the codec
    trains, so a fixed-seed random net provides the feature space.
    """
    from .features import FeatureNet

    torch.manual_seed(PERCEP_NET_SEED)
    net = FeatureNet()
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def codec_loss(img: torch.Tensor, recon: torch.Tensor, mean: torch.Tensor,
               logvar: torch.Tensor, percep_net=None,
               kl_weight: float = 1e-6, perceptual_weight: float = 0.1):
    """L1 + kl_weight * KL + perceptual_weight * feature distance.

    Returns (total, components dict). ``percep_net`` may be None when
    perceptual_weight is 0.
    """
    if img.shape != recon.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {recon.shape}")
    from .features import perceptual_loss_torch

    l1 = (img - recon).abs().mean()
    kl = kl_divergence(mean, logvar)
    components = {"l1": l1, "kl": kl}
    total = l1 + kl_weight * kl
    if perceptual_weight > 0.0:
        if percep_net is None:
            raise ValueError("perceptual_weight > 0 requires a feature net")
        percep = perceptual_loss_torch(img, recon, percep_net)
        components["percep"] = percep
        total = total + perceptual_weight * percep
    return total, components


def train_codec(manifest, config: CodecConfig = CodecConfig(), out_dir=None,
                steps: int = 500, batch: int = 8, lr: float = 1e-3, seed: int = 0,
                patch_count: int = 2000, patch_size: int = 64):
    """Train the autoencoder on random crops; returns (codec, history).

    The learning rate follows a cosine decay from ``lr`` to ``lr / 10``.
    """
    from .harness.manifest import extract_patches

    rng = np.random.default_rng(seed)
    patches = [p for p, _ in extract_patches(manifest, patch_size, patch_count, rng)]
    if not patches:
        raise ValueError("empty patch stream")
    data = torch.from_numpy(np.stack([p.transpose(2, 0, 1) for p in patches])).float()

    torch.manual_seed(seed)
    codec = Codec(config)
    percep_net = perceptual_reference_net() if config.perceptual_weight > 0 else None
    opt = torch.optim.AdamW(codec.parameters(), lr=lr, weight_decay=1e-5)
    gen = torch.Generator().manual_seed(seed)
    history = []

    for step in range(steps):
        decay = 0.5 * (1.0 + np.cos(np.pi * step / max(steps - 1, 1)))
        for group in opt.param_groups:
            group["lr"] = lr * (0.1 + 0.9 * decay)
        idx = torch.from_numpy(rng.integers(len(patches), size=batch))
        x = data[idx]
        mean, logvar = codec.encode_t(x)
        noise = torch.randn(mean.shape, generator=gen)
        z = mean + (0.5 * logvar).exp() * noise
        recon = codec.decode_t(z)
        loss, parts = codec_loss(x, recon, mean, logvar, percep_net,
                                 config.kl_weight, config.perceptual_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": float(loss.detach()),
                        **{k: float(v.detach()) for k, v in parts.items()}})

    codec.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_codec(codec, out_dir / "codec.ckpt")
        fields = list(history[0].keys())
        with open(out_dir / "codec_loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(history)
    return codec, history


def reconstruction_psnr(codec: Codec, images: list) -> float:
    """Mean Y-channel PSNR of decode(encode(x).mean) over an image list."""
    from .metrics import psnr, rgb_to_y

    vals = []
    for img in images:
        recon = decode(encode(img, codec).mean, codec)
        vals.append(psnr(rgb_to_y(recon), rgb_to_y(img)))
    return float(np.mean(vals))


def save_codec(codec: Codec, path) -> None:
    from .harness.checkpoint import save_checkpoint, state_dict_to_tensors

    save_checkpoint(state_dict_to_tensors(codec.state_dict()), path,
                    meta={"kind": "codec", "config": asdict(codec.config)})


def load_codec(path) -> Codec:
    from .harness.checkpoint import load_checkpoint, tensors_to_state_dict

    tensors, meta = load_checkpoint(path)
    cfg_raw = dict(meta["config"])
    cfg_raw["channel_widths"] = tuple(cfg_raw["channel_widths"])
    codec = Codec(CodecConfig(**cfg_raw))
    codec.load_state_dict(tensors_to_state_dict(tensors))
    codec.eval()
    return codec
