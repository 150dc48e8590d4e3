"""Latent diffusion core: schedule, forward process, conditioned U-Net,
from-scratch training loop and deterministic multi-step sampling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import (ConditioningBank, ConditioningTokens, TOKEN_DIM,
                       extract_tokens, label_tokens, null_tokens)

CANONICAL_LATENT_RES = 8  # latent grid of the 64px training patch


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray       # (T,)
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # cumulative product


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                         f"({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _alpha_bar_at(sched: NoiseSchedule, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= sched.T).any():
        raise ValueError(f"timestep out of range [0, {sched.T})")
    return torch.from_numpy(sched.alpha_bar)[t]


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is an int or a per-sample 1-D tensor. Arithmetic runs in float64
    and is cast back to the input dtype.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    ab = _alpha_bar_at(sched, t)
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    out = torch.sqrt(ab) * x0.double() + torch.sqrt(1.0 - ab) * eps.double()
    return out.to(x0.dtype)


# ---------------------------------------------------------------------------
# conditioned U-Net


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 4)
    attn_resolutions: tuple = (4, 2)  # on the canonical 8x8 latent grid
    head_dim: int = 32
    token_dim: int = TOKEN_DIM
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in ("full", "eff"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "eff":
            full = UNetConfig()
            if (self.base_channels * 2 != full.base_channels
                    or self.head_dim * 2 != full.head_dim):
                raise ValueError("eff variant must halve base_channels and head_dim")

    @staticmethod
    def eff() -> "UNetConfig":
        full = UNetConfig()
        return UNetConfig(base_channels=full.base_channels // 2,
                          head_dim=full.head_dim // 2, variant="eff")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch, head_dim):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, ch), ch)
        self.heads = max(1, ch // head_dim)
        self.to_qkv = nn.Linear(ch, 3 * ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.to_qkv(seq).chunk(3, dim=-1)

        def split(z):
            return z.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = out.transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).view(b, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, ch, token_dim, head_dim):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, ch), ch)
        self.heads = max(1, ch // head_dim)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(token_dim, ch)
        self.to_v = nn.Linear(token_dim, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(tokens)
        v = self.to_v(tokens)

        def split(z):
            return z.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = out.transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).view(b, c, h, w)


class UNetLevel(nn.Module):
    def __init__(self, ch_in, ch_out, time_dim, attend, config):
        super().__init__()
        self.res = TimeResBlock(ch_in, ch_out, time_dim)
        self.self_attn = SelfAttention(ch_out, config.head_dim) if attend else None
        self.cross_attn = (CrossAttention(ch_out, config.token_dim, config.head_dim)
                           if attend else None)

    def forward(self, x, temb, tokens):
        x = self.res(x, temb)
        if self.self_attn is not None:
            x = self.self_attn(x)
            x = self.cross_attn(x, tokens)
        return x


class CondUNet(nn.Module):
    """Epsilon-prediction U-Net with cross-attention conditioning.

    Attention lives at the levels whose canonical-grid resolution appears
    in ``attn_resolutions``; the structure is static, so the net runs on
    any latent size divisible by 2^(levels-1).
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        chans = [config.base_channels * m for m in config.channel_mults]
        time_dim = config.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, time_dim), nn.SiLU(),
            nn.Linear(time_dim, time_dim))

        def attend(level):
            return (CANONICAL_LATENT_RES // 2**level) in config.attn_resolutions

        self.stem = nn.Conv2d(4, chans[0], 3, padding=1)
        self.down_levels = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, ch in enumerate(chans):
            ch_in = chans[max(i - 1, 0)]
            self.down_levels.append(UNetLevel(ch_in, ch, time_dim, attend(i), config))
            if i < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid1 = TimeResBlock(chans[-1], chans[-1], time_dim)
        self.mid_self = SelfAttention(chans[-1], config.head_dim)
        self.mid_cross = CrossAttention(chans[-1], config.token_dim, config.head_dim)
        self.mid2 = TimeResBlock(chans[-1], chans[-1], time_dim)

        self.up_levels = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch_out = chans[max(i - 1, 0)] if i > 0 else chans[0]
            self.up_levels.append(
                UNetLevel(chans[i] + chans[i], ch_out, time_dim, attend(i), config))
            if i > 0:
                self.upsamples.append(nn.Conv2d(ch_out, ch_out, 3, padding=1))
        self.head = nn.Sequential(nn.GroupNorm(min(8, chans[0]), chans[0]), nn.SiLU(),
                                  nn.Conv2d(chans[0], 4, 3, padding=1))

    def forward(self, x, t, tokens):
        if x.shape[1] != 4:
            raise ValueError(f"expected 4 latent channels, got {x.shape[1]}")
        if tokens.shape[-1] != self.config.token_dim:
            raise ValueError(f"token dim {tokens.shape[-1]} != {self.config.token_dim}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(x.dtype))

        h = self.stem(x)
        skips = []
        for i, level in enumerate(self.down_levels):
            h = level(h, temb, tokens)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid1(h, temb)
        h = self.mid_cross(self.mid_self(h), tokens)
        h = self.mid2(h, temb)

        for i, level in enumerate(self.up_levels):
            skip = skips[len(skips) - 1 - i]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = level(torch.cat([h, skip], dim=1), temb, tokens)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
        return self.head(h)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def tokens_to_tensor(cond: ConditioningTokens) -> torch.Tensor:
    return torch.from_numpy(cond.tokens).float().unsqueeze(0)


def unet_predict(model, x_t: torch.Tensor, t, cond) -> torch.Tensor:
    """Epsilon prediction for one conditioning; shapes are preserved."""
    tokens = tokens_to_tensor(cond) if isinstance(cond, ConditioningTokens) else cond
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    if x_t.dim() == 3:
        return model(x_t.unsqueeze(0), t, tokens)[0]
    if tokens.shape[0] == 1 and x_t.shape[0] > 1:
        tokens = tokens.expand(x_t.shape[0], -1, -1)
    return model(x_t, t, tokens)


# ---------------------------------------------------------------------------
# foundation-model wrapper and training


@dataclass(frozen=True)
class FMTrainConfig:
    lr: float = 1e-4
    batch: int = 16
    steps: int = 2000
    patch: int = 64
    cond_dropout_p: float = 0.1
    ema_decay: float = 0.999
    seed: int = 0
    # Reference regime at production scale (recorded, not defaults):
    # batch 120, patch 512, lr 1e-4, 700k iterations.

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")


class FMModel(nn.Module):
    """U-Net plus the learned conditioning bank and latent normalization."""

    def __init__(self, unet_config: UNetConfig, num_labels: int = 1, seed: int = 0):
        super().__init__()
        self.unet = CondUNet(unet_config)
        self.bank = ConditioningBank(num_labels=max(num_labels, 1), seed=seed)
        self.register_buffer("latent_scale", torch.ones(()))

    def forward(self, x, t, tokens):
        return self.unet(x, t, tokens)

    def null_token_batch(self, batch: int, seq_len: int) -> torch.Tensor:
        return self.bank.null_token[None, None, :].expand(batch, seq_len, -1)


def fm_train_step(model: FMModel, batch, sched: NoiseSchedule, opt, ema_model,
                  rng: np.random.Generator, gen: torch.Generator,
                  cond_dropout_p: float = 0.1, ema_decay: float = 0.999):
    """One epsilon-MSE step; returns (loss, dropped_count)."""
    latents, tokens = batch
    b = latents.shape[0]
    dropped = 0
    if cond_dropout_p > 0.0:
        mask = rng.random(b) < cond_dropout_p
        if mask.any():
            null = model.null_token_batch(b, tokens.shape[1])
            tokens = torch.where(torch.from_numpy(mask)[:, None, None], null, tokens)
            dropped = int(mask.sum())
    t = torch.from_numpy(rng.integers(sched.T, size=b))
    eps = torch.randn(latents.shape, generator=gen)
    x_t = q_sample(latents, t, eps, sched)
    pred = model(x_t, t, tokens)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite diffusion loss: {loss}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    if ema_model is not None:
        from .features import ema_update

        ema_update(ema_model, model, ema_decay)
    return float(loss.detach()), dropped


def build_conditioning(patch, label, source: str, feature_net, model: FMModel) -> torch.Tensor:
    """Token block for one training patch under the requested source."""
    if source == "feature":
        return torch.from_numpy(extract_tokens(patch, feature_net).tokens)
    if source == "label":
        if label is None:
            raise ValueError("label conditioning requires labeled data")
        return model.bank.label_table[label].detach()
    if source == "null":
        return model.bank.null_token.detach()[None, :].expand(65, -1)
    raise ValueError(f"unknown conditioning source {source!r}")


def train_fm(manifest, codec, feature_net, conditioning: str,
             config: FMTrainConfig = FMTrainConfig(),
             unet_config: UNetConfig = UNetConfig(),
             sched: NoiseSchedule | None = None, out_dir=None,
             pool_size: int = 400):
    """Train the conditioned diffusion model from scratch on latents.

    Returns (model, history). The latent pool is encoded once up front;
    the latent normalization scale is stored in the checkpointed model.
    """
    from .codec import encode
    from .harness.manifest import extract_patches

    if sched is None:
        sched = make_schedule(1000)
    rng = np.random.default_rng(config.seed)
    pairs = list(extract_patches(manifest, config.patch, pool_size, rng))
    labels = [lab for _, lab in pairs]
    num_labels = (max(lab for lab in labels if lab is not None) + 1
                  if any(lab is not None for lab in labels) else 1)

    torch.manual_seed(config.seed)
    model = FMModel(unet_config, num_labels=num_labels, seed=config.seed)
    latents = torch.stack([torch.from_numpy(encode(p, codec).mean) for p, _ in pairs])
    scale = 1.0 / max(float(latents.std()), 1e-6)
    model.latent_scale.fill_(scale)
    latents = latents * scale

    token_blocks = torch.stack([
        build_conditioning(p, lab, conditioning, feature_net, model)
        for p, lab in pairs])

    torch.manual_seed(config.seed + 1)
    ema_model = FMModel(unet_config, num_labels=num_labels, seed=config.seed)
    ema_model.load_state_dict(model.state_dict())
    for p in ema_model.parameters():
        p.requires_grad_(False)

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=1e-5)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        idx = torch.from_numpy(rng.integers(len(pairs), size=config.batch))
        batch = (latents[idx], token_blocks[idx])
        if conditioning == "label":
            # label tokens must stay trainable: index the live table
            batch = (latents[idx],
                     model.bank.label_table[[labels[int(i)] for i in idx]])
        loss, dropped = fm_train_step(model, batch, sched, opt, ema_model, rng, gen,
                                      config.cond_dropout_p, config.ema_decay)
        history.append({"step": step, "loss": loss, "lr": config.lr,
                        "dropped": dropped})

    model.eval()
    ema_model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_fm(ema_model, out_dir / "fm.ckpt", unet_config, conditioning)
        with open(out_dir / "fm_loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "lr", "dropped"])
            writer.writeheader()
            writer.writerows(history)
        _emit_sample_grid(ema_model, token_blocks, codec, sched, scale,
                          out_dir / "samples.png", seed=config.seed)
    return model, ema_model, history


def _emit_sample_grid(model, token_blocks, codec, sched, scale, path, seed=0,
                      n: int = 4, steps: int = 12):
    """Decode a few DDIM samples into a side-by-side PNG."""
    from .codec import decode
    from .imgio import save_image

    gen = torch.Generator().manual_seed(seed)

    def model_fn(x, t, cond):
        return model(x, t, cond.expand(x.shape[0], -1, -1))

    cells = []
    with torch.no_grad():
        for i in range(min(n, token_blocks.shape[0])):
            z = ddim_sample(model_fn, token_blocks[i:i + 1], steps, sched,
                            (1, 4, 8, 8), gen)
            cells.append(decode(z[0].numpy() / scale, codec))
    save_image(path, np.concatenate(cells, axis=1))


# ---------------------------------------------------------------------------
# sampling


def ddim_sample(model_fn, cond, steps: int, sched: NoiseSchedule, shape,
                gen: torch.Generator, guidance: float = 1.0,
                null_cond=None) -> torch.Tensor:
    """Deterministic (eta=0) DDIM from pure noise.

    ``model_fn(x, t, tokens)`` returns the epsilon prediction. With
    guidance != 1 the update uses eps_null + guidance * (eps_cond -
    eps_null), which requires ``null_cond``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > sched.T:
        raise ValueError(f"steps {steps} exceeds schedule length {sched.T}")
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    if guidance != 1.0 and null_cond is None:
        raise ValueError("guidance != 1 requires null conditioning tokens")

    timesteps = list(dict.fromkeys(
        np.linspace(sched.T - 1, 0, steps).round().astype(int).tolist()))
    x = torch.randn(shape, generator=gen)
    for i, t in enumerate(timesteps):
        t = int(t)
        eps = model_fn(x, t, cond)
        if guidance != 1.0:
            eps_null = model_fn(x, t, null_cond)
            eps = eps_null + guidance * (eps - eps_null)
        ab_t = float(sched.alpha_bar[t])
        x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        ab_prev = float(sched.alpha_bar[int(timesteps[i + 1])]) if i + 1 < len(timesteps) else 1.0
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return x


# ---------------------------------------------------------------------------
# persistence


def save_fm(model: FMModel, path, unet_config: UNetConfig, conditioning: str) -> None:
    from .harness.checkpoint import save_checkpoint, state_dict_to_tensors

    save_checkpoint(state_dict_to_tensors(model.state_dict()), path,
                    meta={"kind": "fm", "unet_config": asdict(unet_config),
                          "conditioning": conditioning,
                          "num_labels": int(model.bank.num_labels)})


def load_fm(path) -> tuple:
    from .harness.checkpoint import load_checkpoint, tensors_to_state_dict

    tensors, meta = load_checkpoint(path)
    cfg_raw = dict(meta["unet_config"])
    cfg_raw["channel_mults"] = tuple(cfg_raw["channel_mults"])
    cfg_raw["attn_resolutions"] = tuple(cfg_raw["attn_resolutions"])
    cfg = UNetConfig(**cfg_raw)
    model = FMModel(cfg, num_labels=meta.get("num_labels", 1))
    model.load_state_dict(tensors_to_state_dict(tensors))
    model.eval()
    return model, cfg, meta.get("conditioning", "feature")
