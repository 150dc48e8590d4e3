"""One-step x4 SR generator on a frozen diffusion model.

Low-rank adapters go on the U-Net attention projections, the first conv
of each U-Net block and the encoder convs. The generator applies the
closed-form x0 step to the *difference* between the adapted and the
frozen epsilon predictions, so with zero-initialized adapters it reduces
exactly to the codec-filtered bicubic upsampler. Training alternates a
generator step (reconstruction + perceptual + score-distillation) with a
fake-score step that fits a second adapter set to the generator outputs.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import Codec
from .degradation import DegradationConfig, degrade, sample_recipe
from .diffusion import FMModel, NoiseSchedule, TimeResBlock, TrainingDiverged, q_sample
from .features import extract_tokens, perceptual_loss_torch
from .imgio import check_image
from .resize import resize


class LoraTargetError(ValueError):
    pass


class LoraStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class SRConfig:
    t_star: int = 999
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lambda_mse: float = 1.0
    lambda_percep: float = 0.5
    lambda_vsd: float = 0.1
    lr: float = 5e-5
    batch: int = 8
    patch: int = 64
    seed: int = 0
    scale_factor: int = 4
    vsd_t_range: tuple = (20, 980)
    # Reference regime at production scale: batch 6, patch 256, lr 5e-5.

    def __post_init__(self):
        if self.t_star < 0:
            raise ValueError("t_star must be >= 0")
        for name in ("lambda_mse", "lambda_percep", "lambda_vsd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# low-rank adapters


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(
            torch.randn(rank, base.in_features, generator=gen) / math.sqrt(base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def delta_weight(self):
        return self.scale * (self.lora_B @ self.lora_A)

    def merged_base(self):
        merged = nn.Linear(self.base.in_features, self.base.out_features,
                           bias=self.base.bias is not None)
        with torch.no_grad():
            merged.weight.copy_(self.base.weight + self.delta_weight())
            if self.base.bias is not None:
                merged.bias.copy_(self.base.bias)
        return merged


class LoraConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
        self.lora_A = nn.Parameter(
            torch.randn(rank, base.in_channels, *base.kernel_size, generator=gen)
            / math.sqrt(fan_in))
        self.lora_B = nn.Parameter(torch.zeros(base.out_channels, rank))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x):
        down = F.conv2d(x, self.lora_A, stride=self.base.stride,
                        padding=self.base.padding)
        up = F.conv2d(down, self.lora_B[:, :, None, None])
        return self.base(x) + self.scale * up

    def delta_weight(self):
        flat = self.lora_A.flatten(1)  # (rank, in*kh*kw)
        return self.scale * (self.lora_B @ flat).view(self.base.weight.shape)

    def merged_base(self):
        merged = nn.Conv2d(self.base.in_channels, self.base.out_channels,
                           self.base.kernel_size, stride=self.base.stride,
                           padding=self.base.padding, bias=self.base.bias is not None)
        with torch.no_grad():
            merged.weight.copy_(self.base.weight + self.delta_weight())
            if self.base.bias is not None:
                merged.bias.copy_(self.base.bias)
        return merged


_LORA_TYPES = (LoraLinear, LoraConv2d)


def _resolve(root: nn.Module, path: str):
    parts = path.split(".")
    parent = root
    for part in parts[:-1]:
        if not hasattr(parent, part):
            raise LoraTargetError(f"unknown target path {path!r}")
        parent = getattr(parent, part)
    if not hasattr(parent, parts[-1]):
        raise LoraTargetError(f"unknown target path {path!r}")
    return parent, parts[-1]


def attach_lora(root: nn.Module, targets: list, rank: int = 4, alpha: float = 4.0,
                seed: int = 0) -> nn.Module:
    """Wrap the named linear/conv layers with zero-initialized adapters.

    The wrapped network's outputs are bit-identical to the base network
    until the B matrices move away from zero.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    for path in targets:
        parent, attr = _resolve(root, path)
        layer = getattr(parent, attr)
        if isinstance(layer, nn.Linear):
            setattr(parent, attr, LoraLinear(layer, rank, alpha, gen))
        elif isinstance(layer, nn.Conv2d):
            setattr(parent, attr, LoraConv2d(layer, rank, alpha, gen))
        else:
            raise LoraTargetError(
                f"target {path!r} is a {type(layer).__name__}, not a linear/conv layer")
    return root


def lora_modules(root: nn.Module):
    return [(name, m) for name, m in root.named_modules() if isinstance(m, _LORA_TYPES)]


def lora_parameters(root: nn.Module):
    params = []
    for _, m in lora_modules(root):
        params.extend([m.lora_A, m.lora_B])
    return params


def freeze_non_lora(root: nn.Module) -> nn.Module:
    """Make the adapters the only trainable parameters of the module."""
    for name, p in root.named_parameters():
        p.requires_grad_("lora_A" in name or "lora_B" in name)
    return root


def merge_lora(root: nn.Module) -> nn.Module:
    """Fold every adapter delta into its base weight and drop the adapters."""
    mods = lora_modules(root)
    if not mods:
        raise LoraStateError("no adapters attached (already merged?)")
    for name, m in mods:
        parent, attr = _resolve(root, name)
        setattr(parent, attr, m.merged_base())
    return root


def unet_lora_targets(unet) -> list:
    """All attention projections plus the first conv of each res block."""
    targets = []
    for name, m in unet.named_modules():
        if isinstance(m, nn.Linear) and name.rsplit(".", 1)[-1] in (
                "to_q", "to_k", "to_v", "to_out", "to_qkv"):
            targets.append(name)
        elif isinstance(m, TimeResBlock):
            targets.append(f"{name}.conv1" if name else "conv1")
    return targets


def encoder_lora_targets(encoder) -> list:
    return [name for name, m in encoder.named_modules() if isinstance(m, nn.Conv2d)]


# ---------------------------------------------------------------------------
# closed-form x0


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
               sched: NoiseSchedule) -> torch.Tensor:
    """x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)."""
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")
    ab = float(sched.alpha_bar[t])
    out = (x_t.double() - math.sqrt(1.0 - ab) * eps_hat.double()) / math.sqrt(ab)
    return out.to(x_t.dtype)


# ---------------------------------------------------------------------------
# generator


class SRGenerator(nn.Module):
    """Frozen FM + codec with trainable adapters; one U-Net step per image.

    The latent correction is kappa * (eps_adapted - eps_frozen) with
    kappa = sqrt(1 - alpha_bar) / sqrt(alpha_bar) at the fixed timestep,
    which is the closed-form x0 update applied to the prediction
    difference. The difference is identically zero at initialization.
    """

    def __init__(self, codec: Codec, fm: FMModel, feature_net, sched: NoiseSchedule,
                 config: SRConfig = SRConfig(), cond_source: str = "feature"):
        super().__init__()
        if not 0 <= config.t_star < sched.T:
            raise ValueError(f"t_star {config.t_star} outside schedule")
        self.config = config
        self.sched = sched
        self.cond_source = cond_source
        self.feature_net = feature_net
        self.latent_scale = float(fm.latent_scale)
        self.bank = fm.bank

        self.decoder = codec.decoder
        self.base_unet = fm.unet
        self.down_factor = codec.config.down_factor
        self.encoder = freeze_non_lora(attach_lora(
            copy.deepcopy(codec.encoder), encoder_lora_targets(codec.encoder),
            config.lora_rank, config.lora_alpha, seed=config.seed))
        self.unet = freeze_non_lora(attach_lora(
            copy.deepcopy(fm.unet), unet_lora_targets(fm.unet),
            config.lora_rank, config.lora_alpha, seed=config.seed + 1))
        for module in (self.decoder, self.base_unet, self.feature_net, self.bank):
            if module is not None:
                for p in module.parameters():
                    p.requires_grad_(False)

        ab = float(sched.alpha_bar[config.t_star])
        self.kappa = math.sqrt(1.0 - ab) / math.sqrt(ab)

    def trainable_parameters(self):
        return lora_parameters(self.encoder) + lora_parameters(self.unet)

    def forward_from_up(self, up: torch.Tensor, tokens: torch.Tensor) -> dict:
        """SR batch from bicubic-upsampled LR plus conditioning tokens.

        The correction is computed once and applied in both latent
        scalings, so a zero correction leaves the codec path untouched
        bit-for-bit.
        """
        mean, _ = self.encoder(up)
        z_fm = mean * self.latent_scale
        eps_adapted = self.unet(z_fm, self.config.t_star, tokens)
        with torch.no_grad():
            eps_frozen = self.base_unet(z_fm, self.config.t_star, tokens)
        delta = self.kappa * (eps_adapted - eps_frozen)
        sr = self.decoder(mean - delta / self.latent_scale)
        return {"sr": sr, "z0_fm": z_fm - delta, "z_fm": z_fm}

    def tokens_for(self, lr: np.ndarray, label: int | None = None) -> torch.Tensor:
        from .features import label_tokens, null_tokens

        if self.cond_source == "feature":
            return torch.from_numpy(extract_tokens(lr, self.feature_net).tokens)
        if self.cond_source == "label":
            if label is None:
                raise ValueError("label-conditioned SR needs a label")
            return torch.from_numpy(label_tokens(label, self.bank).tokens)
        return torch.from_numpy(null_tokens(self.bank).tokens)


def sr_generate(lr: np.ndarray, generator: SRGenerator, label: int | None = None) -> np.ndarray:
    """Upscale one LR buffer by the configured factor (numpy in/out)."""
    check_image(lr)
    sf = generator.config.scale_factor
    target = (lr.shape[0] * sf, lr.shape[1] * sf)
    if target[0] % generator.down_factor or target[1] % generator.down_factor:
        raise ValueError(f"target dims {target} not divisible by the codec factor "
                         f"{generator.down_factor}")
    up = resize(lr, float(sf), "bicubic")
    tokens = generator.tokens_for(lr, label)
    with torch.no_grad():
        out = generator.forward_from_up(
            torch.from_numpy(np.ascontiguousarray(up.transpose(2, 0, 1))).float().unsqueeze(0),
            tokens.unsqueeze(0))
    return np.clip(out["sr"][0].numpy().transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def rec_loss(sr: torch.Tensor, hr: torch.Tensor, feature_net,
             lambda_mse: float = 1.0, lambda_percep: float = 0.5):
    """lambda_mse * MSE + lambda_percep * perceptual feature distance."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    mse = F.mse_loss(sr, hr)
    total = lambda_mse * mse
    parts = {"mse": mse}
    if lambda_percep > 0.0:
        percep = perceptual_loss_torch(sr, hr, feature_net)
        parts["percep"] = percep
        total = total + lambda_percep * percep
    return total, parts


# ---------------------------------------------------------------------------
# variational score distillation


class VSDState(nn.Module):
    """Frozen real score net plus a concurrently trained fake copy."""

    def __init__(self, fm: FMModel, rank: int = 4, alpha: float = 4.0,
                 lr: float = 1e-4, seed: int = 0, t_range: tuple = (20, 980)):
        super().__init__()
        self.real_unet = fm.unet
        for p in self.real_unet.parameters():
            p.requires_grad_(False)
        self.fake_unet = freeze_non_lora(attach_lora(
            copy.deepcopy(fm.unet), unet_lora_targets(fm.unet), rank, alpha,
            seed=seed + 2))
        self.fake_opt = torch.optim.AdamW(lora_parameters(self.fake_unet), lr=lr)
        self.t_range = t_range

    def real_checksum(self) -> str:
        from .harness.checkpoint import module_checksum

        return module_checksum(self.real_unet)


def vsd_generator_grad(z_gen: torch.Tensor, tokens: torch.Tensor, state: VSDState,
                       sched: NoiseSchedule, rng: np.random.Generator,
                       gen: torch.Generator) -> torch.Tensor:
    """w(t) * (eps_real - eps_fake) at a random diffused point; constant
    w.r.t. both score networks (no gradient flows through either)."""
    with torch.no_grad():
        t = int(rng.integers(state.t_range[0], state.t_range[1] + 1))
        eps = torch.randn(z_gen.shape, generator=gen)
        x_t = q_sample(z_gen.detach(), t, eps, sched)
        e_real = state.real_unet(x_t, t, tokens)
        e_fake = state.fake_unet(x_t, t, tokens)
    return e_real - e_fake


def fake_score_update(z_gen: torch.Tensor, tokens: torch.Tensor, state: VSDState,
                      sched: NoiseSchedule, rng: np.random.Generator,
                      gen: torch.Generator) -> float:
    """One epsilon-MSE step fitting the fake adapters to the generator output."""
    if z_gen.requires_grad:
        raise ValueError("z_gen must be detached from the generator")
    t = torch.from_numpy(rng.integers(state.t_range[0], state.t_range[1] + 1,
                                      size=z_gen.shape[0]))
    eps = torch.randn(z_gen.shape, generator=gen)
    x_t = q_sample(z_gen, t, eps, sched)
    pred = state.fake_unet(x_t, t, tokens)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise TrainingDiverged("non-finite fake-score loss")
    state.fake_opt.zero_grad()
    loss.backward()
    state.fake_opt.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# training loop


def _batch_tensors(pairs, generator, rng, deg_config, step, seed):
    """Degrade a batch of HR patches and assemble torch inputs."""
    sf = generator.config.scale_factor
    ups, hrs, tokens = [], [], []
    for j, (hr, label) in enumerate(pairs):
        recipe = sample_recipe(seed * 1_000_003 + step * 131 + j, deg_config)
        lr = degrade(hr, recipe)
        up = resize(lr, float(sf), "bicubic")
        ups.append(up.transpose(2, 0, 1))
        hrs.append(hr.transpose(2, 0, 1))
        tokens.append(generator.tokens_for(lr, label))
    return (torch.from_numpy(np.stack(ups)).float(),
            torch.from_numpy(np.stack(hrs)).float(),
            torch.stack(tokens))


def train_sr(manifest, fm: FMModel, codec: Codec, feature_net,
             config: SRConfig = SRConfig(), sched: NoiseSchedule | None = None,
             cond_source: str = "feature", out_dir=None, steps: int = 1000,
             pool_size: int = 400, deg_config: DegradationConfig | None = None,
             checksum_every: int = 200):
    """Alternating generator / fake-score training of the adapters.

    Returns (generator, history). The frozen FM is checksummed before
    and periodically during training; any drift is a hard failure.
    """
    from .harness.checkpoint import module_checksum
    from .harness.manifest import extract_patches

    if sched is None:
        from .diffusion import make_schedule

        sched = make_schedule(1000)
    if deg_config is None:
        deg_config = DegradationConfig(scale_factor=config.scale_factor)

    rng = np.random.default_rng(config.seed)
    pool = list(extract_patches(manifest, config.patch, pool_size, rng))

    torch.manual_seed(config.seed)
    generator = SRGenerator(codec, fm, feature_net, sched, config, cond_source)
    vsd_state = VSDState(fm, config.lora_rank, config.lora_alpha,
                         lr=config.lr * 2, seed=config.seed,
                         t_range=config.vsd_t_range)
    base_checksum = module_checksum(fm.unet)
    opt = torch.optim.AdamW(generator.trainable_parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    history = []
    last_good = None
    for step in range(steps):
        idx = rng.integers(len(pool), size=config.batch)
        up, hr, tokens = _batch_tensors([pool[int(i)] for i in idx], generator,
                                        rng, deg_config, step, config.seed)
        out = generator.forward_from_up(up, tokens)
        loss, parts = rec_loss(out["sr"], hr, feature_net,
                               config.lambda_mse, config.lambda_percep)
        if config.lambda_vsd > 0.0:
            grad = vsd_generator_grad(out["z0_fm"], tokens, vsd_state, sched, rng, gen)
            vsd_term = (grad * out["z0_fm"]).mean()
            loss = loss + config.lambda_vsd * vsd_term
            parts["vsd"] = vsd_term
        if not torch.isfinite(loss):
            if last_good is not None and out_dir is not None:
                save_sr_adapters(generator, Path(out_dir) / "sr_lastgood.ckpt")
            raise TrainingDiverged(f"non-finite SR loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        fake_loss = float("nan")
        if config.lambda_vsd > 0.0:
            fake_loss = fake_score_update(out["z0_fm"].detach(), tokens, vsd_state,
                                          sched, rng, gen)
        if checksum_every and step % checksum_every == 0:
            if module_checksum(fm.unet) != base_checksum:
                raise RuntimeError("frozen FM weights changed during SR training")
        history.append({"step": step, "loss": float(loss.detach()),
                        **{k: float(v.detach()) for k, v in parts.items()},
                        "fake_loss": fake_loss})
        last_good = step

    if module_checksum(fm.unet) != base_checksum:
        raise RuntimeError("frozen FM weights changed during SR training")
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_sr_adapters(generator, out_dir / "sr.ckpt")
        fields = list(history[0].keys())
        with open(out_dir / "sr_loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(history)
    return generator, history


def save_sr_adapters(generator: SRGenerator, path) -> None:
    """Checkpoint only the adapter tensors (the FM/codec stay external)."""
    from .harness.checkpoint import save_checkpoint

    tensors = {}
    for prefix, root in (("unet", generator.unet), ("encoder", generator.encoder)):
        for name, m in lora_modules(root):
            tensors[f"{prefix}.{name}.lora_A"] = m.lora_A.detach().numpy()
            tensors[f"{prefix}.{name}.lora_B"] = m.lora_B.detach().numpy()
    save_checkpoint(tensors, path, meta={"kind": "sr_adapters",
                                         "config": asdict(generator.config),
                                         "cond_source": generator.cond_source})


def load_sr_adapters(generator: SRGenerator, path) -> SRGenerator:
    from .harness.checkpoint import load_checkpoint

    tensors, _ = load_checkpoint(path)
    with torch.no_grad():
        for prefix, root in (("unet", generator.unet), ("encoder", generator.encoder)):
            for name, m in lora_modules(root):
                m.lora_A.copy_(torch.from_numpy(tensors[f"{prefix}.{name}.lora_A"]))
                m.lora_B.copy_(torch.from_numpy(tensors[f"{prefix}.{name}.lora_B"]))
    return generator
