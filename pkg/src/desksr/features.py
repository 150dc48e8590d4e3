"""Conditioning-token producers.

Three sources feed the diffusion model's cross-attention:

* ``feature`` -- a small vision transformer trained in-repo with two-crop
  self-distillation (teacher = EMA of student), emitting one token per
  8x8 patch plus a global token;
* ``label``   -- a learned per-class token block standing in for a text
  encoder;
* ``null``    -- a single learned token broadcast to the expected length,
  used for conditioning dropout and unconditional prediction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imgio import check_image
from .metrics import COV_EPS, FeatureStats
from .resize import resize_to

CANONICAL_SIZE = 64
TOKEN_DIM = 96
LABEL_TOKEN_COUNT = 8
TOKEN_SOURCES = ("feature", "label", "null")


class CollapseError(RuntimeError):
    """Raised when the self-distillation teacher degenerates."""


@dataclass(frozen=True)
class FeatureNetConfig:
    patch_size: int = 8
    dim: int = TOKEN_DIM
    depth: int = 4
    heads: int = 4
    teacher_momentum: float = 0.996
    proto_count: int = 128
    temp_teacher: float = 0.02
    temp_student: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if not 0.9 < self.teacher_momentum < 1.0:
            raise ValueError("teacher_momentum must lie in (0.9, 1)")


@dataclass
class ConditioningTokens:
    tokens: np.ndarray          # (N, D) float32
    source: str
    grid: tuple | None = None   # (rows, cols) for the feature source

    def __post_init__(self):
        if self.source not in TOKEN_SOURCES:
            raise ValueError(f"unknown token source {self.source!r}")
        if not np.isfinite(self.tokens).all():
            raise ValueError("conditioning tokens contain non-finite values")


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class FeatureNet(nn.Module):
    """Tiny ViT over a fixed 64x64 canonical input.

    ``forward`` returns layer-normalized tokens of shape (B, 65, dim):
    one global token followed by 8x8 patch tokens.
    """

    def __init__(self, config: FeatureNetConfig = FeatureNetConfig()):
        super().__init__()
        self.config = config
        n_patches = (CANONICAL_SIZE // config.patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, config.dim, config.patch_size, config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, config.dim))
        self.blocks = nn.ModuleList(_Block(config.dim, config.heads)
                                    for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    @property
    def grid(self):
        g = CANONICAL_SIZE // self.config.patch_size
        return (g, g)

    def _embed(self, x):
        p = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, p], dim=1) + self.pos_embed

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self._embed(x)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def block_tokens(self, x: torch.Tensor) -> list:
        """Token maps after every transformer block (for perceptual use)."""
        h = self._embed(x)
        out = []
        for block in self.blocks:
            h = block(h)
            out.append(h)
        return out


class DistillHead(nn.Module):
    """Prototype scores as cosine similarities of a normalized embedding.

    Normalizing both the embedding and the prototype vectors keeps the
    logit scale bounded, so temperature sharpening yields informative
    per-sample assignments from the very first steps.
    """

    def __init__(self, dim, proto_count):
        super().__init__()
        # global token + patch mean: the latter is input-sensitive already
        # at initialization, which keeps early assignments informative
        self.mlp = nn.Sequential(nn.Linear(2 * dim, dim * 2), nn.GELU(),
                                 nn.Linear(dim * 2, dim))
        self.prototypes = nn.Parameter(torch.randn(proto_count, dim))

    def forward(self, tokens):
        h = torch.cat([tokens[:, 0], tokens[:, 1:].mean(dim=1)], dim=-1)
        feat = F.normalize(self.mlp(h), dim=-1)
        return F.linear(feat, F.normalize(self.prototypes, dim=-1))


def canonical_tensor(img: np.ndarray) -> torch.Tensor:
    """Resample an image buffer to the canonical extraction resolution."""
    check_image(img)
    if img.shape[:2] != (CANONICAL_SIZE, CANONICAL_SIZE):
        img = resize_to(img, (CANONICAL_SIZE, CANONICAL_SIZE), "bicubic")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def extract_tokens(img: np.ndarray, net: FeatureNet) -> ConditioningTokens:
    """One token per 8x8 patch of the canonical resize, plus a global token."""
    with torch.no_grad():
        tokens = net(canonical_tensor(img))[0].numpy().astype(np.float32)
    return ConditioningTokens(tokens=tokens, source="feature", grid=net.grid)


def layer_token_maps(img: np.ndarray, net: FeatureNet) -> list:
    """Unit-normalized per-block token maps (numpy, eval only)."""
    with torch.no_grad():
        maps = net.block_tokens(canonical_tensor(img))
    return [F.normalize(m[0], dim=-1).numpy().astype(np.float32) for m in maps]


def perceptual_loss_torch(a: torch.Tensor, b: torch.Tensor, net: FeatureNet) -> torch.Tensor:
    """Differentiable feature distance between two BCHW batches in [0,1]."""
    from .resize import resize_torch

    size = (CANONICAL_SIZE, CANONICAL_SIZE)
    if a.shape[-2:] != size:
        a = resize_torch(a, size, "bicubic")
        b = resize_torch(b, size, "bicubic")
    total = 0.0
    maps_a = net.block_tokens(a)
    maps_b = net.block_tokens(b)
    for ma, mb in zip(maps_a, maps_b):
        total = total + F.mse_loss(F.normalize(ma, dim=-1), F.normalize(mb, dim=-1))
    return total / len(maps_a)


# ---------------------------------------------------------------------------
# label / null conditioning


class ConditioningBank(nn.Module):
    """Learned label-token table plus the learned null token."""

    def __init__(self, num_labels: int, dim: int = TOKEN_DIM,
                 tokens_per_label: int = LABEL_TOKEN_COUNT, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.label_table = nn.Parameter(
            torch.randn(num_labels, tokens_per_label, dim, generator=gen) * 0.02)
        self.null_token = nn.Parameter(torch.randn(dim, generator=gen) * 0.02)

    @property
    def num_labels(self):
        return self.label_table.shape[0]


def label_tokens(label: int, bank: ConditioningBank) -> ConditioningTokens:
    if not 0 <= label < bank.num_labels:
        raise ValueError(f"label {label} out of range [0, {bank.num_labels})")
    block = bank.label_table[label].detach().numpy().astype(np.float32)
    return ConditioningTokens(tokens=block, source="label")


def null_tokens(bank: ConditioningBank, seq_len: int = 65) -> ConditioningTokens:
    tok = bank.null_token.detach().numpy().astype(np.float32)
    return ConditioningTokens(tokens=np.tile(tok[None, :], (seq_len, 1)), source="null")


# ---------------------------------------------------------------------------
# feature statistics (for the Fréchet metric)


def feature_stats(images: list, net: FeatureNet) -> FeatureStats:
    """Mean and regularized covariance of global tokens over an image set."""
    if len(images) == 0:
        raise ValueError("feature_stats needs at least one image")
    globals_ = np.stack([extract_tokens(img, net).tokens[0] for img in images])
    mean = globals_.mean(axis=0).astype(np.float64)
    if len(images) < 2:
        cov = np.zeros((globals_.shape[1], globals_.shape[1]), dtype=np.float64)
    else:
        cov = np.cov(globals_, rowvar=False).astype(np.float64)
    cov = cov + COV_EPS * np.eye(cov.shape[0])
    return FeatureStats(mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# two-crop self-distillation training


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, parameterwise."""
    with torch.no_grad():
        for pt, ps in zip(teacher.parameters(), student.parameters()):
            pt.copy_(momentum * pt + (1.0 - momentum) * ps)
        for bt, bs in zip(teacher.buffers(), student.buffers()):
            bt.copy_(bs)


def _two_crops(patch: np.ndarray, rng: np.random.Generator):
    """A clean random crop and a mildly corrupted one, both canonical size."""
    crops = []
    for corrupt in (False, True):
        s = rng.uniform(0.5, 1.0)
        size = max(int(round(s * patch.shape[0])), 16)
        top = int(rng.integers(patch.shape[0] - size + 1))
        left = int(rng.integers(patch.shape[1] - size + 1))
        crop = patch[top:top + size, left:left + size]
        crop = resize_to(crop, (CANONICAL_SIZE, CANONICAL_SIZE), "bicubic")
        if rng.random() < 0.5:
            crop = crop[:, ::-1].copy()
        if corrupt:
            sigma = rng.uniform(0.0, 0.08)
            crop = np.clip(crop + rng.normal(0, sigma, crop.shape), 0, 1).astype(np.float32)
        crops.append(crop.transpose(2, 0, 1))
    return crops


def _distill_loss(student_logits, teacher_logits, center, config):
    p_t = F.softmax((teacher_logits - center) / config.temp_teacher, dim=-1).detach()
    log_p_s = F.log_softmax(student_logits / config.temp_student, dim=-1)
    return -(p_t * log_p_s).sum(dim=-1).mean()


def _assignment_information(teacher_logits, center, temp):
    """Information carried by the teacher assignments, in nats.

    Entropy of the batch-mean distribution minus the mean per-sample
    entropy. Healthy runs keep this well above zero; it collapses to zero
    both when every sample lands on one prototype and when every sample
    degenerates to the same (e.g. uniform) assignment.
    """
    p = F.softmax((teacher_logits - center) / temp, dim=-1)

    def entropy(q):
        return -(q * torch.log(q.clamp_min(1e-12))).sum(dim=-1)

    return float(entropy(p.mean(dim=0)) - entropy(p).mean())


def train_feature_net(manifest, config: FeatureNetConfig = FeatureNetConfig(),
                      out_dir=None, steps: int = 1000, batch: int = 16,
                      lr: float = 5e-4, seed: int = 0,
                      min_patches: int = 1000, patch_count: int | None = None,
                      collapse_check_after: int = 350):
    """Two-crop self-distillation; returns (student_net, history).

    Teacher is the exponential moving average of the student; the loss is
    cross-entropy between sharpened-centered teacher prototype assignments
    and student assignments, symmetrized over the two crops. Aborts with
    CollapseError if the teacher assignment entropy collapses.
    """
    from .harness.manifest import extract_patches

    torch.manual_seed(seed)
    student = FeatureNet(config)
    student_head = DistillHead(config.dim, config.proto_count)
    torch.manual_seed(seed)
    teacher = FeatureNet(config)
    teacher_head = DistillHead(config.dim, config.proto_count)
    teacher.load_state_dict(student.state_dict())
    teacher_head.load_state_dict(student_head.state_dict())
    for p in list(teacher.parameters()) + list(teacher_head.parameters()):
        p.requires_grad_(False)

    rng = np.random.default_rng(seed)
    count = patch_count if patch_count is not None else max(min_patches, steps * batch // 4)
    patches = [p for p, _ in extract_patches(manifest, CANONICAL_SIZE, count, rng)]
    if len(patches) < min_patches and patch_count is None:
        raise ValueError(f"need at least {min_patches} patches, got {len(patches)}")

    opt = torch.optim.AdamW(list(student.parameters()) + list(student_head.parameters()),
                            lr=lr, weight_decay=1e-4)
    center = torch.zeros(config.proto_count)
    entropy_ema = None
    history = []
    log_k = math.log(config.proto_count)

    for step in range(steps):
        idx = rng.integers(len(patches), size=batch)
        views = [[], []]
        for i in idx:
            c0, c1 = _two_crops(patches[int(i)], rng)
            views[0].append(c0)
            views[1].append(c1)
        v0 = torch.from_numpy(np.stack(views[0])).float()
        v1 = torch.from_numpy(np.stack(views[1])).float()

        with torch.no_grad():
            t0 = teacher_head(teacher(v0))
            t1 = teacher_head(teacher(v1))
        s0 = student_head(student(v0))
        s1 = student_head(student(v1))
        loss = 0.5 * (_distill_loss(s1, t0, center, config)
                      + _distill_loss(s0, t1, center, config))

        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(teacher, student, config.teacher_momentum)
        ema_update(teacher_head, student_head, config.teacher_momentum)
        with torch.no_grad():
            center = 0.9 * center + 0.1 * torch.cat([t0, t1]).mean(dim=0)

        info = _assignment_information(torch.cat([t0, t1]), center,
                                       config.temp_teacher)
        entropy_ema = info if entropy_ema is None else 0.8 * entropy_ema + 0.2 * info
        history.append({"step": step, "loss": float(loss.detach()), "entropy": info})
        # the warmup lets the running center absorb the head's init bias
        if step >= collapse_check_after and entropy_ema < 0.1 * log_k:
            raise CollapseError(
                f"teacher assignment information {entropy_ema:.4f} nats fell "
                f"below 10% of log(proto_count)={log_k:.4f} at step {step}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_feature_net(student, out_dir / "features.ckpt")
        with open(out_dir / "features_loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "entropy"])
            writer.writeheader()
            writer.writerows(history)
    return student, history


def save_feature_net(net: FeatureNet, path) -> None:
    from .harness.checkpoint import save_checkpoint, state_dict_to_tensors

    save_checkpoint(state_dict_to_tensors(net.state_dict()), path,
                    meta={"kind": "feature_net", "config": asdict(net.config)})


def load_feature_net(path) -> FeatureNet:
    from .harness.checkpoint import load_checkpoint, tensors_to_state_dict

    tensors, meta = load_checkpoint(path)
    net = FeatureNet(FeatureNetConfig(**meta["config"]))
    net.load_state_dict(tensors_to_state_dict(tensors))
    net.eval()
    return net
