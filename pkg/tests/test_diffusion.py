import math

import numpy as np
import pytest
import torch

from desksr.diffusion import (CondUNet, FMModel, FMTrainConfig, NoiseSchedule,
                              UNetConfig, ddim_sample, fm_train_step, make_schedule,
                              parameter_count, q_sample, unet_predict)
from desksr.features import ConditioningBank, null_tokens


@pytest.fixture(scope="module")
def sched():
    return make_schedule(1000)


@pytest.fixture(scope="module")
def small_unet():
    torch.manual_seed(0)
    return CondUNet(UNetConfig(base_channels=16, head_dim=8)).eval()


class TestSchedule:
    def test_alpha_bar_matches_direct_product(self, sched):
        # independent oracle: plain python running product
        prod = 1.0
        betas = np.linspace(1e-4, 0.02, 1000)
        for b in betas:
            prod *= 1.0 - b
        assert abs(sched.alpha_bar[-1] - prod) < 1e-12
        assert abs(sched.alpha_bar[-1] - 4.03582977e-5) < 1e-9

    def test_t_equals_one(self):
        s = make_schedule(1, 1e-4, 1e-4)
        np.testing.assert_allclose(s.alpha_bar, [0.9999])

    def test_strictly_decreasing(self, sched):
        assert (np.diff(sched.alpha_bar) < 0).all()
        assert sched.alpha_bar[0] == sched.alpha[0]

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            make_schedule(10, 0.02, 1e-4)
        with pytest.raises(ValueError):
            make_schedule(0)
        with pytest.raises(ValueError):
            make_schedule(10, 0.0, 0.1)


class TestQSample:
    def test_zero_eps(self, sched):
        x0 = torch.randn(4, 8, 8, dtype=torch.float64)
        out = q_sample(x0, 500, torch.zeros_like(x0), sched)
        np.testing.assert_allclose(out.numpy(),
                                   math.sqrt(sched.alpha_bar[500]) * x0.numpy())

    def test_t0_near_identity(self, sched):
        x0 = torch.randn(4, 8, 8)
        out = q_sample(x0, 0, torch.randn(4, 8, 8), sched)
        assert (out - x0).abs().max() < 1e-1  # sqrt(beta_1) ~ 0.01 noise scale

    def test_marginal_variance(self, sched):
        gen = torch.Generator().manual_seed(0)
        for t in (1, 500, 999):
            eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
            x_t = q_sample(torch.zeros(100_000, dtype=torch.float64), t, eps, sched)
            var = float(x_t.var())
            expect = 1.0 - sched.alpha_bar[t]
            assert abs(var - expect) / expect < 0.02

    def test_out_of_range_t(self, sched):
        x = torch.zeros(2, 2)
        with pytest.raises(ValueError):
            q_sample(x, 1000, torch.zeros(2, 2), sched)
        with pytest.raises(ValueError):
            q_sample(x, -1, torch.zeros(2, 2), sched)


class TestUNet:
    def test_output_shape(self, small_unet):
        x = torch.randn(2, 4, 8, 8)
        tokens = torch.randn(2, 65, 96)
        assert small_unet(x, 10, tokens).shape == x.shape

    def test_single_sample_wrapper(self, small_unet):
        x = torch.randn(4, 8, 8)
        tokens = torch.randn(65, 96)
        out = unet_predict(small_unet, x, 5, tokens)
        assert out.shape == x.shape

    def test_null_conditioning_path(self, small_unet):
        bank = ConditioningBank(num_labels=3, seed=0)
        cond = null_tokens(bank)
        out = unet_predict(small_unet, torch.randn(4, 8, 8), 3, cond)
        assert torch.isfinite(out).all()

    def test_wrong_channels_rejected(self, small_unet):
        with pytest.raises(ValueError):
            small_unet(torch.randn(1, 3, 8, 8), 0, torch.randn(1, 65, 96))

    def test_token_dim_checked(self, small_unet):
        with pytest.raises(ValueError):
            small_unet(torch.randn(1, 4, 8, 8), 0, torch.randn(1, 65, 32))

    def test_eff_parameter_ratio(self):
        full = parameter_count(CondUNet(UNetConfig()))
        eff = parameter_count(CondUNet(UNetConfig.eff()))
        assert eff / full <= 0.35

    def test_eff_config_validated(self):
        with pytest.raises(ValueError):
            UNetConfig(base_channels=48, head_dim=16, variant="eff")

    def test_runs_on_larger_grid(self, small_unet):
        out = small_unet(torch.randn(1, 4, 16, 16), 7, torch.randn(1, 65, 96))
        assert out.shape == (1, 4, 16, 16)


def _toy_fm_setup(seed=0, steps_model=None):
    torch.manual_seed(seed)
    cfg = UNetConfig(base_channels=16, head_dim=8)
    model = FMModel(cfg, num_labels=2, seed=seed)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    sched = make_schedule(1000)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    latents = torch.randn(8, 4, 8, 8, generator=torch.Generator().manual_seed(99))
    tokens = torch.randn(8, 65, 96, generator=torch.Generator().manual_seed(98))
    return model, opt, sched, gen, rng, latents, tokens


class TestTrainStep:
    def test_dropout_zero_never_drops(self):
        model, opt, sched, gen, rng, latents, tokens = _toy_fm_setup()
        total_dropped = 0
        for _ in range(10):
            _, dropped = fm_train_step(model, (latents, tokens), sched, opt, None,
                                       rng, gen, cond_dropout_p=0.0)
            total_dropped += dropped
        assert total_dropped == 0

    def test_dropout_active(self):
        model, opt, sched, gen, rng, latents, tokens = _toy_fm_setup()
        total = sum(fm_train_step(model, (latents, tokens), sched, opt, None, rng,
                                  gen, cond_dropout_p=0.5)[1] for _ in range(20))
        assert total > 0

    def test_seed_fixed_losses_identical(self):
        losses = []
        for _ in range(2):
            model, opt, sched, gen, rng, latents, tokens = _toy_fm_setup(seed=3)
            run = [fm_train_step(model, (latents, tokens), sched, opt, None, rng,
                                 gen, cond_dropout_p=0.1)[0] for _ in range(5)]
            losses.append(run)
        assert losses[0] == losses[1]


class TestDDIM:
    def test_one_step_is_x0_jump(self, sched):
        # with one step from t = T-1, the update must equal the closed form
        calls = []

        def model_fn(x, t, cond):
            calls.append(t)
            return 0.5 * x

        gen = torch.Generator().manual_seed(0)
        out = ddim_sample(model_fn, None, 1, sched, (1, 4, 8, 8), gen)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn((1, 4, 8, 8), generator=gen)
        ab = sched.alpha_bar[999]
        expect = (x - math.sqrt(1 - ab) * 0.5 * x) / math.sqrt(ab)
        assert calls == [999]
        np.testing.assert_allclose(out.numpy(), expect.numpy(), rtol=1e-6)

    def test_guidance_one_skips_null_branch(self, sched):
        null_calls = []

        def model_fn(x, t, cond):
            if cond == "null":
                null_calls.append(t)
            return torch.zeros_like(x)

        gen = torch.Generator().manual_seed(0)
        ddim_sample(model_fn, "cond", 4, sched, (1, 4, 8, 8), gen,
                    guidance=1.0, null_cond="null")
        assert null_calls == []

    def test_guidance_mixes_predictions(self, sched):
        def model_fn(x, t, cond):
            return torch.full_like(x, 1.0 if cond == "c" else 0.0)

        gen = torch.Generator().manual_seed(1)
        out_g2 = ddim_sample(model_fn, "c", 1, sched, (4,), gen, guidance=2.0,
                             null_cond="n")
        gen = torch.Generator().manual_seed(1)
        x = torch.randn((4,), generator=gen)
        ab = sched.alpha_bar[999]
        eps = 0.0 + 2.0 * (1.0 - 0.0)
        expect = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        np.testing.assert_allclose(out_g2.numpy(), expect.numpy(), rtol=1e-6)

    def test_linear_oracle_matches_recurrence(self, sched):
        # eps_hat(x, t) = x admits a closed-form scalar recurrence
        def model_fn(x, t, cond):
            return x

        steps = 10
        gen = torch.Generator().manual_seed(2)
        out = ddim_sample(model_fn, None, steps, sched, (16,), gen)

        gen = torch.Generator().manual_seed(2)
        x = torch.randn((16,), generator=gen).numpy().astype(np.float64)
        ts = list(dict.fromkeys(np.linspace(999, 0, steps).round().astype(int).tolist()))
        for i, t in enumerate(ts):
            ab_t = sched.alpha_bar[t]
            ab_prev = sched.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0 = (x - math.sqrt(1 - ab_t) * x) / math.sqrt(ab_t)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * x
        np.testing.assert_allclose(out.numpy(), x, rtol=1e-4)

    def test_steps_validation(self, sched):
        fn = lambda x, t, c: torch.zeros_like(x)  # noqa: E731
        with pytest.raises(ValueError):
            ddim_sample(fn, None, 0, sched, (1,), torch.Generator())
        with pytest.raises(ValueError):
            ddim_sample(fn, None, 1001, sched, (1,), torch.Generator())
        with pytest.raises(ValueError):
            ddim_sample(fn, None, 4, sched, (1,), torch.Generator(), guidance=2.0)
