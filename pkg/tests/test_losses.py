"""Loss identities, the frozen extractor, and the weighted total."""

import math

import numpy as np
import pytest
import torch

from pathosr.imaging import MagLevel, SR_LEVELS
from pathosr.losses import (
    PROB_EPS,
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    adversarial_generator_term,
    discriminator_loss,
    generator_loss,
    perceptual_loss,
    total_loss,
)

from oracles import bce_scalar, mae_scalar


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor(backend="random")


class TestGeneratorLoss:
    def test_identical_zero(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert generator_loss(img, img).item() == 0.0

    def test_uniform_shift(self, rng):
        hr = rng.uniform(0, 0.9, (16, 16, 3))
        assert generator_loss(hr + 0.1, hr).item() == pytest.approx(0.1, abs=1e-12)

    def test_matches_elementwise_oracle(self, rng):
        a, b = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
        assert generator_loss(a, b).item() == pytest.approx(mae_scalar(a, b), abs=1e-9)

    def test_nonnegative_and_zero_iff_equal(self, rng):
        a = rng.uniform(0, 1, (8, 8, 3))
        b = a.copy()
        b[3, 3, 1] += 0.25
        assert generator_loss(a, b).item() > 0.0
        assert generator_loss(a, a).item() == 0.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            generator_loss(rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 9, 3)))


class TestFeatureExtractor:
    def test_frozen_and_eval_pinned(self, extractor):
        assert all(not p.requires_grad for p in extractor.parameters())
        extractor.train()  # must be a no-op
        assert not extractor.training

    def test_deterministic(self, extractor, rng):
        x = torch.rand(1, 3, 32, 32)
        f5a, f9a = extractor(x)
        f5b, f9b = extractor(x)
        assert torch.equal(f5a, f5b) and torch.equal(f9a, f9b)

    def test_same_seed_same_weights(self):
        a = FeatureExtractor(backend="random", seed=7)
        b = FeatureExtractor(backend="random", seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_tap_shapes(self, extractor):
        f5, f9 = extractor(torch.rand(1, 3, 64, 64))
        # taps sit after two and three 2x poolings respectively
        assert f5.shape[-2:] == (16, 16)
        assert f9.shape[-2:] == (8, 8)

    def test_min_input_enforced(self, extractor):
        with pytest.raises(ValueError):
            extractor(torch.rand(1, 3, 8, 8))

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            FeatureExtractor(backend="resnet")

    def test_vgg19_backend_needs_weights(self):
        with pytest.raises(ValueError):
            FeatureExtractor(backend="vgg19")

    def test_vgg19_backend_loads_torchvision_format(self, tmp_path):
        # Synthesize a torchvision-format VGG19 state dict (random values):
        # exercises the full loading path without a network download.
        state = {}
        channels = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256),
                    (256, 256), (256, 256), (256, 512)]
        gen = torch.Generator().manual_seed(0)
        for idx, (cin, cout) in zip((0, 2, 5, 7, 10, 12, 14, 16, 19), channels):
            state[f"features.{idx}.weight"] = torch.randn(cout, cin, 3, 3, generator=gen) * 0.05
            state[f"features.{idx}.bias"] = torch.zeros(cout)
        path = tmp_path / "vgg19.pth"
        torch.save(state, path)
        ext = FeatureExtractor(backend="vgg19", weights_path=path)
        x = torch.rand(1, 3, 32, 32)
        assert perceptual_loss(x, x, ext).item() == 0.0
        f5, f9 = ext(x)
        assert f5.shape[1] == 256 and f9.shape[1] == 512

    def test_vgg19_backend_rejects_bad_shapes(self, tmp_path):
        state = {f"features.{i}.weight": torch.zeros(4, 4, 3, 3) for i in (0, 2, 5, 7, 10, 12, 14, 16, 19)}
        state.update({f"features.{i}.bias": torch.zeros(4) for i in (0, 2, 5, 7, 10, 12, 14, 16, 19)})
        path = tmp_path / "bad.pth"
        torch.save(state, path)
        with pytest.raises(ValueError):
            FeatureExtractor(backend="vgg19", weights_path=path)


class TestPerceptualLoss:
    def test_identical_zero(self, extractor, rng):
        img = rng.uniform(0, 1, (32, 32, 3))
        assert perceptual_loss(img, img, extractor).item() == 0.0

    def test_matches_two_tap_recomputation(self, extractor):
        gen = torch.Generator().manual_seed(3)
        a = torch.rand(1, 3, 32, 32, generator=gen)
        b = torch.rand(1, 3, 32, 32, generator=gen)
        f5a, f9a = extractor(a)
        f5b, f9b = extractor(b)
        expected = ((f5a - f5b) ** 2).mean().item() + ((f9a - f9b) ** 2).mean().item()
        assert perceptual_loss(a, b, extractor).item() == pytest.approx(expected, abs=1e-6)

    def test_not_permutation_invariant(self, extractor):
        # features are spatial: shuffling pixels the same way in both images
        # changes the loss against the unshuffled reference
        gen = torch.Generator().manual_seed(4)
        a = torch.rand(1, 3, 32, 32, generator=gen)
        b = torch.rand(1, 3, 32, 32, generator=gen)
        perm = torch.randperm(32 * 32, generator=gen)
        a_perm = a.reshape(1, 3, -1)[:, :, perm].reshape(1, 3, 32, 32)
        base = perceptual_loss(a, b, extractor).item()
        shuffled = perceptual_loss(a_perm, b, extractor).item()
        assert abs(base - shuffled) > 1e-6

    def test_min_size(self, extractor):
        small = torch.rand(1, 3, 8, 8)
        with pytest.raises(ValueError):
            perceptual_loss(small, small, extractor)

    def test_shape_mismatch(self, extractor):
        with pytest.raises(ValueError):
            perceptual_loss(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 64, 64), extractor)


class TestDiscriminatorLoss:
    def test_perfect_discrimination_near_zero(self):
        loss = discriminator_loss(
            np.array([1.0 - PROB_EPS]), np.array([PROB_EPS])
        ).item()
        assert loss == pytest.approx(0.0, abs=2e-6)

    def test_coin_flip_closed_form(self):
        loss = discriminator_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5])).item()
        assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_matches_log_sum_oracle(self, rng):
        d_real = rng.uniform(0.05, 0.95, 6)
        d_fake = rng.uniform(0.05, 0.95, 6)
        expected = bce_scalar(list(d_real), list(d_fake))
        assert discriminator_loss(d_real, d_fake).item() == pytest.approx(expected, abs=1e-9)

    def test_out_of_range_probs_clamped(self):
        loss = discriminator_loss(np.array([1.5]), np.array([-0.5])).item()
        assert math.isfinite(loss)


class TestAdversarialGeneratorTerm:
    def test_confident_fake_near_zero(self):
        assert adversarial_generator_term(np.array([1.0 - PROB_EPS])).item() == pytest.approx(0.0, abs=2e-6)

    def test_half(self):
        assert adversarial_generator_term(np.array([0.5])).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_monotone_decreasing(self):
        grid = np.linspace(0.05, 0.95, 19)
        values = [adversarial_generator_term(np.array([p])).item() for p in grid]
        assert all(b < a for a, b in zip(values, values[1:]))


class TestTotalLoss:
    def test_unit_parts_table_weights(self):
        w = LossWeights()
        ones = {level: 1.0 for level in SR_LEVELS}
        assert total_loss(ones, ones, 1.0, w) == pytest.approx(0.469, abs=1e-12)

    def test_zero_parts(self):
        w = LossWeights()
        zeros = {level: 0.0 for level in SR_LEVELS}
        assert total_loss(zeros, zeros, 0.0, w) == 0.0

    def test_linearity(self, rng):
        w = LossWeights()
        gl = {level: float(rng.uniform(0, 2)) for level in SR_LEVELS}
        pl = {level: float(rng.uniform(0, 2)) for level in SR_LEVELS}
        adv = float(rng.uniform(0, 2))
        base = total_loss(gl, pl, adv, w)
        doubled = total_loss(
            {k: 2 * v for k, v in gl.items()}, {k: 2 * v for k, v in pl.items()}, 2 * adv, w
        )
        assert doubled == pytest.approx(2 * base, rel=1e-12)

    def test_coefficients_exact(self):
        w = LossWeights()
        zeros = {level: 0.0 for level in SR_LEVELS}
        one_gl = dict(zeros)
        one_gl[MagLevel.X20] = 1.0
        assert total_loss(one_gl, zeros, 0.0, w) == pytest.approx(w.w_gl, abs=1e-15)
        one_pl = dict(zeros)
        one_pl[MagLevel.X40] = 1.0
        assert total_loss(zeros, one_pl, 0.0, w) == pytest.approx(w.w_pl, abs=1e-15)
        assert total_loss(zeros, zeros, 1.0, w) == pytest.approx(w.w_dl, abs=1e-15)

    def test_missing_level_rejected(self):
        w = LossWeights()
        partial = {MagLevel.X10: 1.0, MagLevel.X20: 1.0}
        full = {level: 1.0 for level in SR_LEVELS}
        with pytest.raises(ValueError):
            total_loss(partial, full, 1.0, w)

    def test_weights_must_be_positive(self):
        with pytest.raises(ValueError):
            LossWeights(w_gl=0.0)


class TestLossBreakdown:
    def test_total_consistency(self, rng):
        w = LossWeights()
        gl = {level: float(rng.uniform(0, 1)) for level in SR_LEVELS}
        pl = {level: float(rng.uniform(0, 1)) for level in SR_LEVELS}
        bd = LossBreakdown.compute(gl, pl, 0.3, 0.7, w)
        assert abs(bd.total - bd.recomputed_total(w)) < 1e-9

    def test_log_record_keys(self):
        w = LossWeights()
        parts = {level: 0.5 for level in SR_LEVELS}
        bd = LossBreakdown.compute(parts, parts, 0.1, 0.2, w)
        record = bd.to_log_record(step=3, epoch=1, lr=4e-4, flatness=0.01)
        assert set(record) == {
            "step", "epoch", "gl_10x", "gl_20x", "gl_40x",
            "pl_10x", "pl_20x", "pl_40x", "adv_40x", "dl_40x",
            "total", "lr", "flatness",
        }


class TestDifferentiability:
    def test_losses_differentiable_wrt_sr(self, extractor):
        torch.manual_seed(0)
        sr = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
        hr = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        ext = FeatureExtractor(backend="random").double()
        loss = generator_loss(sr, hr) + perceptual_loss(sr, hr, ext)
        loss.backward()
        assert sr.grad is not None
        g = sr.grad.clone()
        # central differences on a few coordinates
        gen = np.random.default_rng(0)
        h = 1e-6
        for _ in range(5):
            idx = tuple(int(gen.integers(s)) for s in sr.shape)
            with torch.no_grad():
                orig = sr[idx].item()
                sr[idx] = orig + h
                up = (generator_loss(sr, hr) + perceptual_loss(sr, hr, ext)).item()
                sr[idx] = orig - h
                down = (generator_loss(sr, hr) + perceptual_loss(sr, hr, ext)).item()
                sr[idx] = orig
            numeric = (up - down) / (2 * h)
            if abs(g[idx].item()) > 1e-8:
                assert numeric == pytest.approx(g[idx].item(), rel=1e-3)
