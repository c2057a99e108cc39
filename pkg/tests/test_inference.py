"""Tiled inference: stitching geometry, blending, and seam behaviour."""

import numpy as np
import pytest

from pathosr.errors import DataError
from pathosr.generator import GeneratorConfig, build_generator, generator_forward
from pathosr.imaging import MagLevel
from pathosr.inference import StitchPlan, super_resolve_image, super_resolve_multi, super_resolve_tile


@pytest.fixture(scope="module")
def micro_gen():
    cfg = GeneratorConfig(
        basic_blocks_per_srb=1,
        dense_blocks_per_basic=1,
        convs_per_dense=2,
        base_channels=4,
        growth_channels=4,
    )
    return build_generator(cfg, seed=21)


class TestStitchPlan:
    def test_defaults(self):
        plan = StitchPlan()
        assert (plan.tile, plan.overlap, plan.stride) == (128, 32, 96)

    def test_origins_cover_with_clamped_tail(self):
        plan = StitchPlan()
        assert plan.origins(128) == [0]
        assert plan.origins(224) == [0, 96]
        assert plan.origins(300) == [0, 96, 172]
        for extent in (128, 129, 224, 300, 500):
            origins = plan.origins(extent)
            covered = np.zeros(extent, dtype=bool)
            for o in origins:
                covered[o : o + plan.tile] = True
            assert covered.all()
            assert origins[-1] + plan.tile == extent or origins == [0]

    def test_too_small(self):
        with pytest.raises(DataError):
            StitchPlan().origins(100)

    def test_validation(self):
        with pytest.raises(ValueError):
            StitchPlan(tile=64, overlap=64)
        with pytest.raises(ValueError):
            StitchPlan(tile=64, overlap=0)


class TestSuperResolveTile:
    def test_target_sizes(self, micro_gen, rng):
        tile = rng.uniform(0, 1, (128, 128, 3))
        assert super_resolve_tile(tile, MagLevel.X40, micro_gen).shape == (1024, 1024, 3)
        assert super_resolve_tile(tile, MagLevel.X10, micro_gen).shape == (256, 256, 3)

    def test_small_tile_x10(self, micro_gen, rng):
        tile = rng.uniform(0, 1, (64, 64, 3))
        assert super_resolve_tile(tile, MagLevel.X10, micro_gen).shape == (128, 128, 3)

    def test_deterministic(self, micro_gen, rng):
        tile = rng.uniform(0, 1, (64, 64, 3))
        a = super_resolve_tile(tile, MagLevel.X20, micro_gen)
        b = super_resolve_tile(tile, MagLevel.X20, micro_gen)
        assert np.array_equal(a, b)

    def test_invalid_target(self, micro_gen, rng):
        with pytest.raises(ValueError):
            super_resolve_tile(rng.uniform(0, 1, (64, 64, 3)), MagLevel.X5, micro_gen)

    def test_range(self, micro_gen, rng):
        out = super_resolve_tile(rng.uniform(0, 1, (64, 64, 3)), MagLevel.X10, micro_gen)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSuperResolveImage:
    def test_constant_image_constant_output(self, micro_gen):
        img = np.full((224, 224, 3), 0.5)
        out = super_resolve_image(img, MagLevel.X10, micro_gen)
        for c in range(3):
            channel = out[:, :, c]
            assert channel.max() - channel.min() < 1e-6

    def test_seam_smoothness_on_constant_input(self, micro_gen):
        img = np.full((224, 224, 3), 0.5)
        out = super_resolve_image(img, MagLevel.X10, micro_gen)
        assert np.abs(np.diff(out, axis=0)).max() < 1e-6
        assert np.abs(np.diff(out, axis=1)).max() < 1e-6

    def test_dimension_law_non_multiple(self, micro_gen):
        img = np.random.default_rng(3).uniform(0, 1, (300, 300, 3))
        out = super_resolve_image(img, MagLevel.X20, micro_gen)
        assert out.shape == (1200, 1200, 3)

    def test_dimension_law_multi_level(self, micro_gen):
        img = np.random.default_rng(4).uniform(0, 1, (256, 256, 3))
        outs = super_resolve_multi(img, list(MagLevel)[1:], micro_gen)
        assert outs[MagLevel.X10].shape == (512, 512, 3)
        assert outs[MagLevel.X20].shape == (1024, 1024, 3)
        assert outs[MagLevel.X40].shape == (2048, 2048, 3)

    def test_blend_weights_partition_of_unity(self):
        # an all-ones tile processor makes the output the normalized weight sum
        img = np.random.default_rng(5).uniform(0, 1, (300, 224, 3))
        ones = lambda tile: np.ones((256, 256, 3))
        out = super_resolve_image(img, MagLevel.X10, tile_fn=ones)
        assert np.abs(out - 1.0).max() < 1e-9

    def test_interior_bit_identical_to_single_tile(self, micro_gen):
        img = np.random.default_rng(6).uniform(0, 1, (224, 224, 3))
        out = super_resolve_image(img, MagLevel.X10, micro_gen)
        single = generator_forward(micro_gen, img[:128, :128])[MagLevel.X10]
        # rows/cols < 192 at 10X are covered only by the first tile at weight 1
        assert np.array_equal(out[:192, :192], single[:192, :192])

    def test_single_tile_image_matches_direct_forward(self, micro_gen):
        img = np.random.default_rng(7).uniform(0, 1, (128, 128, 3))
        out = super_resolve_image(img, MagLevel.X40, micro_gen)
        direct = generator_forward(micro_gen, img)[MagLevel.X40]
        assert np.array_equal(out, direct)

    def test_image_smaller_than_tile(self, micro_gen):
        with pytest.raises(DataError):
            super_resolve_image(np.zeros((100, 100, 3)), MagLevel.X10, micro_gen)

    def test_bad_tile_fn_shape_rejected(self):
        img = np.zeros((128, 128, 3))
        with pytest.raises(ValueError):
            super_resolve_image(img, MagLevel.X10, tile_fn=lambda t: np.zeros((64, 64, 3)))

    def test_deterministic_regardless_of_plan(self, micro_gen):
        img = np.random.default_rng(8).uniform(0, 1, (224, 160, 3))
        a = super_resolve_image(img, MagLevel.X10, micro_gen, StitchPlan())
        b = super_resolve_image(img, MagLevel.X10, micro_gen, StitchPlan())
        assert np.array_equal(a, b)
