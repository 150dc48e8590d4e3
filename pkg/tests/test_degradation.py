import dataclasses

import numpy as np
import pytest

from desksr.degradation import (
    BlurKernel,
    DegradationConfig,
    NoiseSpec,
    add_noise,
    apply_kernel,
    degrade,
    delta_kernel,
    identity_recipe,
    jpeg_roundtrip,
    kernel_weights,
    recipe_from_json,
    recipe_to_json,
    sample_blur_kernel,
    sample_recipe,
)
from desksr.metrics import psnr, rgb_to_y
from desksr.resize import resize


def _toy_image(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    img += 0.15 * rng.random((h, w, 3))
    return np.clip(img, 0, 1).astype(np.float32)


class TestKernels:
    def test_large_sigma_approaches_uniform(self):
        k = BlurKernel(kind="iso_gaussian", size=7, params={"sigma_x": 1e6})
        w = kernel_weights(k)
        np.testing.assert_allclose(w, 1.0 / 49, atol=1e-9)
        assert abs(w.sum() - 1.0) < 1e-6

    def test_tiny_sigma_is_delta(self):
        w = kernel_weights(delta_kernel(7))
        assert w[3, 3] > 1.0 - 1e-9
        assert abs(w.sum() - 1.0) < 1e-6

    def test_sampling_is_deterministic(self):
        cfg = DegradationConfig()
        k1 = sample_blur_kernel(np.random.default_rng(42), cfg)
        k2 = sample_blur_kernel(np.random.default_rng(42), cfg)
        assert k1 == k2
        np.testing.assert_array_equal(kernel_weights(k1), kernel_weights(k2))

    def test_all_kinds_normalized(self):
        cfg = DegradationConfig()
        rng = np.random.default_rng(7)
        seen = set()
        for _ in range(200):
            k = sample_blur_kernel(rng, cfg)
            seen.add(k.kind)
            w = kernel_weights(k)
            assert np.isfinite(w).all()
            assert abs(w.sum() - 1.0) < 1e-6
        assert seen == {"iso_gaussian", "aniso_gaussian", "generalized_gaussian",
                        "plateau", "sinc"}

    def test_aniso_has_distinct_sigmas(self):
        cfg = DegradationConfig()
        rng = np.random.default_rng(3)
        for _ in range(50):
            k = sample_blur_kernel(rng, cfg)
            if k.kind == "aniso_gaussian":
                assert k.params["sigma_x"] != k.params["sigma_y"]

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            DegradationConfig(sigma_range=(3.0, 0.2))


class TestApplyKernel:
    def test_delta_kernel_is_identity(self):
        img = _toy_image()
        out = apply_kernel(img, delta_kernel())
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_constant_invariance(self):
        img = np.full((32, 32, 3), 0.5, dtype=np.float32)
        k = BlurKernel(kind="iso_gaussian", size=9, params={"sigma_x": 2.0})
        out = apply_kernel(img, k)
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_box_kernel_is_moving_average(self):
        # ramp along x, constant along y: a uniform 3x3 kernel reduces to a
        # 3-tap box along x, so interior values equal the moving average
        img = np.tile(np.arange(9, dtype=np.float32)[None, :, None] / 10.0, (9, 1, 3))
        k = BlurKernel(kind="iso_gaussian", size=3, params={"sigma_x": 1e6})
        out = apply_kernel(img, k)
        expect = np.convolve(img[0, :, 0], [1 / 3, 1 / 3, 1 / 3], mode="same")
        np.testing.assert_allclose(out[4, 1:-1, 0], expect[1:-1], atol=1e-6)

    def test_kernel_larger_than_image_rejected(self):
        img = np.zeros((5, 5, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            apply_kernel(img, BlurKernel(kind="iso_gaussian", size=7,
                                         params={"sigma_x": 1.0}))


class TestNoise:
    def test_zero_sigma_identity(self):
        img = _toy_image()
        out = add_noise(img, NoiseSpec(kind="gaussian", sigma=0.0),
                        np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_gaussian_sigma_estimate(self):
        img = np.full((1000, 1000, 1), 0.5, dtype=np.float32)
        out = add_noise(img, NoiseSpec(kind="gaussian", sigma=0.1),
                        np.random.default_rng(0))
        sample_std = float(np.std(out - img))
        assert abs(sample_std - 0.1) / 0.1 < 0.02

    def test_gray_noise_is_channel_correlated(self):
        img = np.full((32, 32, 3), 0.5, dtype=np.float32)
        out = add_noise(img, NoiseSpec(kind="gaussian", sigma=0.05, gray=True),
                        np.random.default_rng(0))
        diff = out - img
        np.testing.assert_array_equal(diff[..., 0], diff[..., 1])
        np.testing.assert_array_equal(diff[..., 0], diff[..., 2])

    def test_poisson_noise_in_range(self):
        img = _toy_image()
        out = add_noise(img, NoiseSpec(kind="poisson", scale=2.0),
                        np.random.default_rng(0))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert not np.array_equal(out, img)


class TestJpeg:
    def test_high_quality_high_psnr(self):
        img = _toy_image(seed=1)
        out = jpeg_roundtrip(img, 100)
        assert out.shape == img.shape
        assert psnr(rgb_to_y(out), rgb_to_y(img)) > 40.0

    def test_quality_monotonicity(self):
        img = _toy_image(seed=2)
        p30 = psnr(rgb_to_y(jpeg_roundtrip(img, 30)), rgb_to_y(img))
        p95 = psnr(rgb_to_y(jpeg_roundtrip(img, 95)), rgb_to_y(img))
        assert p30 < p95

    def test_near_idempotence(self):
        img = _toy_image(seed=3)
        once = jpeg_roundtrip(img, 75)
        twice = jpeg_roundtrip(once, 75)
        assert psnr(rgb_to_y(twice), rgb_to_y(once)) > 45.0

    def test_bad_quality_rejected(self):
        with pytest.raises(ValueError):
            jpeg_roundtrip(_toy_image(), 0)


class TestRecipes:
    def test_same_seed_equal_recipes(self):
        assert sample_recipe(11) == sample_recipe(11)

    def test_different_seeds_differ(self):
        differing = sum(sample_recipe(i) != sample_recipe(i + 1000) for i in range(100))
        assert differing >= 99

    def test_scale_factor_from_config(self):
        assert sample_recipe(5, DegradationConfig(scale_factor=4)).scale_factor == 4

    def test_json_roundtrip(self):
        for seed in (0, 1, 99):
            recipe = sample_recipe(seed)
            assert recipe_from_json(recipe_to_json(recipe)) == recipe


class TestDegrade:
    def test_output_dims(self):
        hr = _toy_image(64, 64)
        lr = degrade(hr, sample_recipe(7))
        assert lr.shape == (16, 16, 3)

    def test_bit_reproducible(self):
        hr = _toy_image(64, 64, seed=5)
        recipe = sample_recipe(7)
        np.testing.assert_array_equal(degrade(hr, recipe), degrade(hr, recipe))

    def test_identity_limit_equals_plain_resize(self):
        hr = _toy_image(64, 64, seed=6)
        lr = degrade(hr, identity_recipe(4))
        direct = resize(hr, 0.25, "area")
        assert np.abs(lr - direct).max() <= 1e-6

    def test_indivisible_dims_rejected(self):
        hr = np.zeros((65, 64, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            degrade(hr, sample_recipe(1))

    def test_range_stays_in_unit_interval(self):
        hr = _toy_image(64, 64, seed=8)
        for seed in range(5):
            lr = degrade(hr, sample_recipe(seed))
            assert lr.min() >= 0.0 and lr.max() <= 1.0

    def test_any_recipe_works_on_small_patches(self):
        # large kernels + aggressive stage downscales must not collide
        hr = _toy_image(64, 64, seed=9)
        for seed in range(30):
            lr = degrade(hr, sample_recipe(seed))
            assert lr.shape == (16, 16, 3)

    def test_tiny_input_rejected(self):
        hr = np.zeros((24, 24, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="short side"):
            degrade(hr, sample_recipe(0))

    def test_recipe_is_frozen(self):
        recipe = sample_recipe(3)
        with pytest.raises(dataclasses.FrozenInstanceError):
            recipe.seed = 4
