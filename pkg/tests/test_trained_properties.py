"""Properties that only hold for trained models (shared session fixtures)."""

import numpy as np
import torch
import torch.nn.functional as F

from desksr.codec import decode, encode, reconstruction_psnr
from desksr.degradation import degrade, sample_recipe
from desksr.diffusion import q_sample
from desksr.features import extract_tokens
from desksr.metrics import perceptual_distance
from desksr.resize import resize


def _global_cosine(a, b, net):
    ga = extract_tokens(a, net).tokens[0]
    gb = extract_tokens(b, net).tokens[0]
    return float(np.dot(ga, gb) / (np.linalg.norm(ga) * np.linalg.norm(gb)))


class TestTrainedCodec:
    def test_heldout_reconstruction_psnr(self, trained_codec, val_patches):
        codec, _ = trained_codec
        assert reconstruction_psnr(codec, val_patches) >= 22.0

    def test_checkpoint_reload_reproduces_outputs(self, trained_codec, val_patches,
                                                  tmp_path):
        from desksr.codec import load_codec, save_codec

        codec, _ = trained_codec
        save_codec(codec, tmp_path / "c.ckpt")
        clone = load_codec(tmp_path / "c.ckpt")
        img = val_patches[0]
        np.testing.assert_array_equal(decode(encode(img, codec).mean, codec),
                                      decode(encode(img, clone).mean, clone))


class TestTrainedFeatures:
    def test_degradation_robustness_margin(self, trained_featnet, val_patches):
        # global tokens of an HR patch and its x4-degraded counterpart must
        # be closer than unrelated patch pairs by a clear margin
        net, _ = trained_featnet
        pair, unrelated = [], []
        for i, patch in enumerate(val_patches):
            lr = degrade(patch, sample_recipe(1000 + i))
            pair.append(_global_cosine(patch, resize(lr, 4.0, "bicubic"), net))
            unrelated.append(_global_cosine(patch, val_patches[(i + 3) % len(val_patches)], net))
        assert np.mean(pair) >= np.mean(unrelated) + 0.2

    def test_small_perturbation_keeps_global_token(self, trained_featnet, val_patches):
        net, _ = trained_featnet
        rng = np.random.default_rng(0)
        sims = []
        for patch in val_patches[:8]:
            noisy = np.clip(patch + rng.normal(0, 1 / 255, patch.shape), 0, 1).astype(np.float32)
            sims.append(_global_cosine(patch, noisy, net))
        assert np.mean(sims) >= 0.99

    def test_perceptual_ranking(self, trained_featnet, val_patches):
        net, _ = trained_featnet
        from desksr.degradation import BlurKernel, apply_kernel

        kernel = BlurKernel(kind="iso_gaussian", size=9, params={"sigma_x": 1.5})
        closer = farther = 0
        for i, patch in enumerate(val_patches):
            blurred = apply_kernel(patch, kernel)
            other = val_patches[(i + 5) % len(val_patches)]
            if perceptual_distance(patch, blurred, net) < perceptual_distance(patch, other, net):
                closer += 1
            else:
                farther += 1
        assert closer > farther


class TestTrainedFM:
    def test_conditioning_carries_information(self, trained_fm, trained_codec,
                                              trained_featnet, manifest, sched):
        # epsilon-MSE with matched tokens must beat shuffled tokens
        from desksr.harness.manifest import extract_patches

        fm, _ = trained_fm
        codec, _ = trained_codec
        featnet, _ = trained_featnet
        rng = np.random.default_rng(7)
        patches = [p for p, _ in extract_patches(manifest, 64, 0, rng, split="val")]
        latents = torch.stack([torch.from_numpy(encode(p, codec).mean) for p in patches])
        latents = latents * float(fm.latent_scale)
        tokens = torch.stack([torch.from_numpy(extract_tokens(p, featnet).tokens)
                              for p in patches])

        gen = torch.Generator().manual_seed(0)
        matched_losses, shuffled_losses = [], []
        perm = torch.from_numpy(np.roll(np.arange(len(patches)), 1))
        for t in (100, 400, 700, 950):
            eps = torch.randn(latents.shape, generator=gen)
            x_t = q_sample(latents, t, eps, sched)
            with torch.no_grad():
                matched = fm(x_t, t, tokens)
                shuffled = fm(x_t, t, tokens[perm])
            matched_losses.append(float(F.mse_loss(matched, eps)))
            shuffled_losses.append(float(F.mse_loss(shuffled, eps)))
        assert np.mean(matched_losses) < np.mean(shuffled_losses)
