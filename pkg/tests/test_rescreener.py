"""Latent edits: masking discipline, composition, clamping, palette."""

import numpy as np
import pytest
import torch

from tonelab.core import ContractError, LatentMap
from tonelab.network import ModelConfig, ScreenModel
from tonelab.rescreener import (
    RegionEdit,
    apply_edit,
    recompose,
    replay_edits,
    sample_type_palette,
)

torch.set_num_threads(2)


@pytest.fixture(scope="module")
def model():
    return ScreenModel(ModelConfig(base_channels=8, encoder_residual_blocks=2,
                                   decoder_levels=4, discriminator_blocks=2), seed=0)


def make_latent(seed=0, h=32, w=32):
    rng = np.random.default_rng(seed)
    return LatentMap(
        rng.uniform(0.1, 0.9, (h, w)).astype(np.float32),
        rng.normal(size=(3, h, w)).astype(np.float32),
    )


def block_mask(h=32, w=32, y=4, x=6, size=10):
    mask = np.zeros((h, w), bool)
    mask[y : y + size, x : x + size] = True
    return mask


class TestRegionEditValidation:
    def test_keep_keep_rejected(self):
        with pytest.raises(ContractError):
            RegionEdit(region=block_mask())

    def test_unknown_actions_rejected(self):
        with pytest.raises(ContractError):
            RegionEdit(region=block_mask(), type_action="paint")
        with pytest.raises(ContractError):
            RegionEdit(region=block_mask(), intensity_action="wiggle")

    def test_copy_needs_donor(self):
        with pytest.raises(ContractError):
            RegionEdit(region=block_mask(), type_action="copy_from_region")


class TestApplyEdit:
    def test_empty_mask_warns_and_keeps_latent(self):
        latent = make_latent()
        edit = RegionEdit(region=np.zeros((32, 32), bool),
                          intensity_action="set_constant", intensity_value=0.5)
        with pytest.warns(RuntimeWarning):
            out = apply_edit(latent, edit)
        np.testing.assert_array_equal(out.stacked(), latent.stacked())

    def test_untouched_pixels_bit_exact(self):
        latent = make_latent(1)
        mask = block_mask()
        edit = RegionEdit(region=mask, type_action="set_vector",
                          type_vector=[1.0, -2.0, 0.5],
                          intensity_action="set_constant", intensity_value=0.3)
        out = apply_edit(latent, edit)
        np.testing.assert_array_equal(out.intensity[~mask], latent.intensity[~mask])
        np.testing.assert_array_equal(out.type_feature[:, ~mask],
                                      latent.type_feature[:, ~mask])

    def test_set_vector_writes_constant(self):
        latent = make_latent(2)
        mask = block_mask()
        out = apply_edit(latent, RegionEdit(region=mask, type_action="set_vector",
                                            type_vector=[0.1, 0.2, 0.3]))
        got = out.type_feature[:, mask].T
        np.testing.assert_allclose(
            got, np.broadcast_to(np.float32([0.1, 0.2, 0.3]), got.shape), rtol=1e-6
        )
        np.testing.assert_array_equal(out.intensity, latent.intensity)

    def test_copy_from_region_uses_donor_mean(self):
        latent = make_latent(3)
        mask = block_mask(y=2, x=2)
        donor = block_mask(y=18, x=18)
        out = apply_edit(latent, RegionEdit(region=mask, type_action="copy_from_region",
                                            donor_region=donor))
        expected = latent.type_feature[:, donor].mean(axis=1).astype(np.float32)
        got = out.type_feature[:, mask].T
        np.testing.assert_allclose(got, np.broadcast_to(expected, got.shape), atol=1e-6)

    def test_intensity_set_constant(self):
        latent = make_latent(4)
        full = np.ones((32, 32), bool)
        out = apply_edit(latent, RegionEdit(region=full,
                                            intensity_action="set_constant",
                                            intensity_value=0.5))
        np.testing.assert_array_equal(out.intensity, 0.5)

    def test_intensity_scale_identity(self):
        latent = make_latent(5)
        out = apply_edit(latent, RegionEdit(region=block_mask(),
                                            intensity_action="scale",
                                            intensity_value=1.0))
        np.testing.assert_array_equal(out.intensity, latent.intensity)

    def test_intensity_scale_clamped_pixelwise(self):
        rng = np.random.default_rng(6)
        latent = LatentMap(
            np.linspace(0.1, 0.8, 32 * 32).reshape(32, 32).astype(np.float32),
            rng.normal(size=(3, 32, 32)).astype(np.float32),
        )
        mask = block_mask()
        out = apply_edit(latent, RegionEdit(region=mask, intensity_action="scale",
                                            intensity_value=1.2))
        # pixelwise arithmetic oracle
        expected = np.clip(latent.intensity[mask] * np.float32(1.2), 0.0, 1.0)
        np.testing.assert_array_equal(out.intensity[mask], expected)

    def test_offset_clamps_into_unit_interval(self):
        latent = make_latent(7)
        out = apply_edit(latent, RegionEdit(region=np.ones((32, 32), bool),
                                            intensity_action="offset",
                                            intensity_value=0.7))
        assert out.intensity.max() <= 1.0
        assert out.intensity.min() >= 0.0

    def test_disjoint_edits_commute(self):
        latent = make_latent(8)
        e1 = RegionEdit(region=block_mask(y=0, x=0, size=8),
                        intensity_action="set_constant", intensity_value=0.2)
        e2 = RegionEdit(region=block_mask(y=20, x=20, size=8),
                        type_action="set_vector", type_vector=[1, 1, 1])
        ab = replay_edits(latent, [e1, e2])
        ba = replay_edits(latent, [e2, e1])
        np.testing.assert_array_equal(ab.stacked(), ba.stacked())

    def test_mask_extent_checked(self):
        with pytest.raises(ContractError):
            apply_edit(make_latent(9), RegionEdit(region=np.ones((8, 8), bool),
                                                  intensity_action="offset",
                                                  intensity_value=0.1))


class TestRecompose:
    def test_zero_edits_equals_decode_with_lines(self, model):
        latent = make_latent(10)
        line = np.ones((32, 32), np.float32)
        line[15, :] = 0.0
        out = recompose(latent, model, line)
        expected = np.minimum(model.decode(latent), line)
        np.testing.assert_array_equal(out, expected)

    def test_line_pixels_stay_black(self, model):
        latent = make_latent(11)
        line = np.ones((32, 32), np.float32)
        line[:, 10:12] = 0.0
        out = recompose(latent, model, line)
        assert np.all(out[:, 10:12] == 0.0)

    def test_no_lines_is_plain_decode(self, model):
        latent = make_latent(12)
        np.testing.assert_array_equal(recompose(latent, model, None),
                                      model.decode(latent))


class TestPalette:
    def test_size_and_determinism(self, model):
        a = sample_type_palette(model, 4, np.random.default_rng(3))
        b = sample_type_palette(model, 4, np.random.default_rng(3))
        assert len(a) == len(b) == 4
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.vector, y.vector)
            assert x.spec == y.spec

    def test_vector_is_mean_encoded_type(self, model):
        from tonelab.tonegen import render_screentone

        entries = sample_type_palette(model, 1, np.random.default_rng(4))
        entry = entries[0]
        tone = render_screentone(entry.spec, 64, 64)
        latent, _ = model.encode_padded(tone, stochastic=False)
        expected = latent.type_feature.reshape(3, -1).mean(axis=1)
        np.testing.assert_allclose(entry.vector, expected, atol=1e-6)

    def test_rejects_empty_palette(self, model):
        with pytest.raises(ContractError):
            sample_type_palette(model, 0)
