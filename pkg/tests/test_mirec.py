"""Patches, masks, repair, losses and a short reconstruction training run."""

import math

import numpy as np
import pytest

from hsemis.data import SyntheticSpec, synth_dataset
from hsemis.errors import DegenerateMaskError
from hsemis.mirec import (
    MirecConfig, ReconstructionGenerator, discriminator_loss, generator_forward, generator_loss, mask_count,
    mirec_total_loss, patchify, positional_encoding, repair, reconstruct_images, sample_mask, train_mirec,
    unpatchify,
)
from hsemis.nn.tensor import Tensor


def mask_frequencies(n_patches=16, ratio=0.75, seeds=10_000):
    counts = np.zeros(n_patches)
    for seed in range(seeds):
        counts[sample_mask(n_patches, ratio, seed).masked_indices] += 1
    return counts / seeds


@pytest.fixture(scope="module")
def tiny_images():
    return synth_dataset(SyntheticSpec(counts=(3, 3, 3, 3, 3))).images


class TestPatches:
    def test_counts(self):
        ps = patchify(np.zeros((32, 32, 1)), 8)
        assert ps.patches.shape == (16, 64)
        assert ps.grid == (4, 4)

    def test_zero_image_encodes_to_positions(self):
        ps = patchify(np.zeros((32, 32, 1)), 8)
        np.testing.assert_array_equal(ps.encoded, positional_encoding(16, 64))

    def test_roundtrip(self):
        img = np.random.default_rng(0).normal(size=(32, 16, 3))
        ps = patchify(img, 8)
        np.testing.assert_array_equal(unpatchify(ps.patches, 8, ps.source_dims), img)

    def test_patch_order_is_row_major(self):
        img = np.zeros((16, 16, 1))
        img[0:8, 8:16] = 1.0  # top-right block is patch 1
        np.testing.assert_array_equal(patchify(img, 8).patches.sum(axis=1), [0, 64, 0, 0])

    def test_indivisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((30, 32)), 8)


class TestMask:
    def test_seventy_five_percent_of_sixteen(self):
        plan = sample_mask(16, 0.75, 3)
        assert len(plan.masked_indices) == 12
        assert len(plan.visible_indices) == 4

    def test_partition(self):
        for seed in range(200):
            plan = sample_mask(16, 0.75, seed)
            assert not set(plan.masked_indices) & set(plan.visible_indices)
            assert sorted(set(plan.masked_indices) | set(plan.visible_indices)) == list(range(16))

    @pytest.mark.parametrize("n,ratio", [(16, 0.75), (10, 0.25), (7, 0.5), (64, 0.75)])
    def test_count_is_rounded(self, n, ratio):
        assert mask_count(n, ratio) == int(math.floor(ratio * n + 0.5))
        assert len(sample_mask(n, ratio, 0).masked_indices) == mask_count(n, ratio)

    def test_uniform_frequency(self):
        freq = mask_frequencies(seeds=2000)
        assert np.all(np.abs(freq - 0.75) < 0.04)

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_mask(16, 0.75, 9).masked_indices, sample_mask(16, 0.75, 9).masked_indices)

    def test_degenerate(self):
        with pytest.raises(DegenerateMaskError):
            sample_mask(4, 0.1, 0)
        with pytest.raises(ValueError):
            sample_mask(16, 1.0, 0)


class TestRepair:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.img = rng.normal(size=(32, 32, 1))
        self.ps = patchify(self.img, 8)
        self.plan = sample_mask(16, 0.75, 4)

    def test_perfect_reconstruction(self):
        out = repair(self.ps, self.ps.patches[self.plan.masked_indices], self.plan)
        np.testing.assert_array_equal(out, self.img)

    def test_visible_region_exact(self):
        fake = np.random.default_rng(2).normal(size=(12, 64))
        out = patchify(repair(self.ps, fake, self.plan), 8).patches
        np.testing.assert_array_equal(out[self.plan.visible_indices], self.ps.patches[self.plan.visible_indices])

    def test_zero_reconstruction_matches_block_assignment(self):
        out = repair(self.ps, np.zeros((12, 64)), self.plan)
        expected = self.img.copy()
        for idx in self.plan.masked_indices:
            r, c = divmod(int(idx), 4)
            expected[8 * r:8 * r + 8, 8 * c:8 * c + 8] = 0.0
        np.testing.assert_array_equal(out, expected)

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            repair(self.ps, np.zeros((11, 64)), self.plan)


class TestGenerator:
    def test_output_shape(self):
        gen = ReconstructionGenerator(np.random.default_rng(0))
        ps = patchify(np.random.default_rng(1).uniform(size=(32, 32, 1)), 8)
        plan = sample_mask(16, 0.75, 0)
        assert generator_forward(gen, ps, plan).shape == (12, 64)

    def test_masked_content_is_ignored(self):
        gen = ReconstructionGenerator(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        plan = sample_mask(16, 0.75, 0)
        a = patchify(rng.uniform(size=(32, 32, 1)), 8)
        b_patches = a.patches.copy()
        b_patches[plan.masked_indices] = rng.uniform(size=(12, 64))
        b = patchify(unpatchify(b_patches, 8, a.source_dims), 8)
        np.testing.assert_array_equal(generator_forward(gen, a, plan), generator_forward(gen, b, plan))

    def test_encoder_features(self):
        gen = ReconstructionGenerator(np.random.default_rng(0))
        assert gen.encode(np.zeros((2, 32, 32, 1))).shape == (2, 256)


class TestLosses:
    def test_generator_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert generator_loss(Tensor(np.ones(3)), Tensor(x), x).item() == pytest.approx(0.0, abs=1e-6)

    def test_generator_alpha_zero_is_bce(self):
        d = np.array([0.3, 0.6])
        got = generator_loss(Tensor(d), Tensor(np.ones(2)), np.zeros(2), alpha=0.0).item()
        assert got == pytest.approx(-np.mean(np.log(d)))

    def test_generator_matches_scalar_recomposition(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d = rng.uniform(0.05, 0.95, size=5)
            rec, orig = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            alpha = rng.uniform(0, 3)
            bce = sum(-math.log(p) for p in d) / len(d)
            l1 = sum(abs(a - b) for a, b in zip(rec.ravel(), orig.ravel())) / rec.size
            assert generator_loss(Tensor(d), Tensor(rec), orig, alpha).item() == pytest.approx(bce + alpha * l1,
                                                                                               abs=1e-10)

    def test_discriminator_perfect(self):
        assert discriminator_loss(Tensor([1.0]), Tensor([0.0])).item() == pytest.approx(0.0, abs=1e-6)

    def test_discriminator_half(self):
        assert discriminator_loss(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(math.log(2))

    def test_discriminator_alpha_scales_fake_term_only(self):
        real, fake = np.array([0.7, 0.8]), np.array([0.4, 0.1])
        real_term = 0.5 * -np.mean(np.log(real))
        fake_term = 0.5 * -np.mean(np.log(1 - fake))
        got = discriminator_loss(Tensor(real), Tensor(fake), alpha=2.0).item()
        assert got == pytest.approx(real_term + 2 * fake_term, abs=1e-10)

    def test_total(self):
        assert mirec_total_loss(0.0, 0.0) == 0.0
        assert mirec_total_loss(0.3, 0.7) == pytest.approx(1.0)
        rng = np.random.default_rng(4)
        for a, b in rng.uniform(size=(100, 2)):
            assert mirec_total_loss(a, b) == a + b


class TestTraining:
    def test_single_image_l1_halves_in_200_steps(self, tiny_images):
        img = tiny_images[:1]
        result = train_mirec(img, MirecConfig(steps=200, seed=1), eval_images=img, eval_every=200)
        (_, start), (_, end) = result.eval_l1
        assert end <= 0.5 * start

    def test_deterministic_with_csv(self, tiny_images):
        cfg = MirecConfig(steps=3, batch_size=4, seed=5)
        a = train_mirec(tiny_images, cfg)
        b = train_mirec(tiny_images, cfg)
        assert a.history_csv() == b.history_csv()
        np.testing.assert_array_equal(a.reconstructions, b.reconstructions)
        lines = a.history_csv().splitlines()
        assert lines[0] == "step,gen_loss,dis_loss,l1"
        assert len(lines) == 4

    def test_synthetic_l1_improves(self, tiny_images):
        result = train_mirec(tiny_images, MirecConfig(steps=40, seed=2), eval_images=tiny_images, eval_every=40)
        assert result.eval_l1[-1][1] < result.eval_l1[0][1]

    def test_reconstruction_keeps_visible_pixels(self, tiny_images):
        gen = ReconstructionGenerator(np.random.default_rng(0))
        out = reconstruct_images(gen, tiny_images, 0.75, 0)
        changed = np.any(out != tiny_images, axis=-1)
        # exactly 12 of 16 blocks may differ in every image
        assert np.all(changed.reshape(len(out), 4, 8, 4, 8).any(axis=(2, 4)).sum(axis=(1, 2)) <= 12)

    def test_empty(self):
        with pytest.raises(ValueError):
            train_mirec(np.zeros((0, 32, 32, 1)))
