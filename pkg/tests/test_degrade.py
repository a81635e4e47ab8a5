"""Degradation engine: kernels, blur, cutout, channel dropout, recipes."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscl.degrade import (DegradationRecipe, apply_recipe_array,
                          gaussian_blur, gaussian_kernel1d, gaussian_kernel2d,
                          sample_recipe, sample_view_pair)


class TestKernels:
    @pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0, 2.0])
    def test_normalized(self, sigma):
        assert abs(gaussian_kernel1d(sigma).sum() - 1.0) <= 1e-6
        assert abs(gaussian_kernel2d(sigma).sum() - 1.0) <= 1e-6

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.0])
    def test_radius_is_three_sigma(self, sigma):
        k = gaussian_kernel1d(sigma)
        assert k.size == 2 * int(np.ceil(3 * sigma)) + 1

    def test_symmetric(self):
        k = gaussian_kernel1d(1.3)
        assert np.allclose(k, k[::-1])


class TestBlur:
    def test_constant_image_invariant(self):
        img = np.full((3, 20, 20), 0.37, dtype=np.float32)
        for sigma in (0.1, 0.5, 1.0, 2.0):
            out = gaussian_blur(img, sigma)
            assert np.abs(out - 0.37).max() <= 1e-6

    def test_preserves_mean_roughly(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 32, 32)).astype(np.float32)
        out = gaussian_blur(img, 1.5)
        # reflect padding keeps total mass close to the original
        assert abs(out.mean() - img.mean()) < 5e-3

    def test_reduces_variance(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 32, 32)).astype(np.float32)
        assert gaussian_blur(img, 2.0).var() < img.var()

    def test_preserves_dtype_and_shape(self):
        img = np.zeros((4, 18, 22), dtype=np.float32)
        out = gaussian_blur(img, 0.7)
        assert out.dtype == np.float32 and out.shape == img.shape


class TestRecipe:
    def test_survivor_guarantee_under_full_drop(self):
        # even at p_drop=1 at least one channel survives, for 10^4 seeds
        for seed in range(10_000):
            rng = np.random.default_rng(seed)
            r = sample_recipe(6, 32, 32, 1.0, rng)
            assert not all(r.dropped_channels)

    def test_drop_fraction_statistics(self):
        # p_drop=0.5, C=15: mean dropped 7.5 +/- 0.1 over 10^4 draws
        rng = np.random.default_rng(123)
        total = sum(sum(sample_recipe(15, 32, 32, 0.5, rng).dropped_channels)
                    for _ in range(10_000))
        assert abs(total / 10_000 - 7.5) <= 0.1

    def test_p_drop_zero_drops_nothing(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            r = sample_recipe(8, 32, 32, 0.0, rng)
            assert not any(r.dropped_channels)

    def test_rejects_all_dropped_recipe(self):
        with pytest.raises(ValueError):
            DegradationRecipe((True, True, True), (), 0.5)

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            DegradationRecipe((False, True), (), -0.1)

    def test_json_round_trip(self):
        rng = np.random.default_rng(7)
        r = sample_recipe(5, 40, 40, 0.5, rng, source_seed=7)
        back = DegradationRecipe.from_json(json.loads(json.dumps(r.to_json())))
        assert back == r

    def test_boxes_inside_raster(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            r = sample_recipe(4, 24, 24, 0.3, rng)
            for (y, x, h, w) in r.cutout_boxes:
                assert 0 <= y and 0 <= x and y + h <= 24 and x + w <= 24


class TestApply:
    def _img(self, c=4, h=32, w=32, seed=0):
        rng = np.random.default_rng(seed)
        return (rng.random((c, h, w)).astype(np.float32) + 0.1) / 1.1

    def test_replay_is_bit_exact(self):
        img = self._img()
        rng = np.random.default_rng(9)
        r = sample_recipe(4, 32, 32, 0.5, rng)
        a = apply_recipe_array(img, r)
        b = apply_recipe_array(img.copy(), r)
        assert a.tobytes() == b.tobytes()

    def test_input_not_mutated(self):
        img = self._img()
        ref = img.copy()
        rng = np.random.default_rng(10)
        apply_recipe_array(img, sample_recipe(4, 32, 32, 0.8, rng))
        assert np.array_equal(img, ref)

    def test_dropped_channels_exactly_zero(self):
        img = self._img()
        r = DegradationRecipe((True, False, True, False), (), 0.5)
        out = apply_recipe_array(img, r)
        assert not out[0].any() and not out[2].any()
        assert out[1].any() and out[3].any()

    def test_cutout_pixel_counts_exact(self):
        img = self._img()
        r = DegradationRecipe((False,) * 4, ((2, 3, 5, 7), (20, 20, 4, 4)), 0.0)
        out = apply_recipe_array(img, r)
        # every channel zeroed inside the boxes, untouched outside
        zero_mask = np.zeros((32, 32), dtype=bool)
        zero_mask[2:7, 3:10] = True
        zero_mask[20:24, 20:24] = True
        assert not out[:, zero_mask].any()
        assert np.array_equal(out[:, ~zero_mask], img[:, ~zero_mask])

    def test_sigma_zero_is_identity_before_masks(self):
        img = self._img()
        r = DegradationRecipe((False,) * 4, (), 0.0)
        assert np.array_equal(apply_recipe_array(img, r), img)

    def test_out_of_bounds_box_rejected(self):
        img = self._img()
        r = DegradationRecipe((False,) * 4, ((30, 30, 5, 5),), 0.0)
        with pytest.raises(ValueError):
            apply_recipe_array(img, r)

    @given(st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_degraded_never_exceeds_range(self, seed):
        img = self._img(seed=seed)
        rng = np.random.default_rng(seed)
        out = apply_recipe_array(img, sample_recipe(4, 32, 32, 0.5, rng))
        assert out.min() >= -1e-6 and out.max() <= 1.0 + 1e-6


class TestViewPair:
    def test_views_are_distinct_channels_same_window(self):
        rng = np.random.default_rng(11)
        img = np.random.default_rng(0).random((5, 48, 48)).astype(np.float32)
        for _ in range(200):
            v1, v2, meta = sample_view_pair(img, 16, rng)
            assert meta.c1 != meta.c2
            assert v1.shape == v2.shape == (16, 16)
            np.testing.assert_array_equal(
                v1, img[meta.c1, meta.y : meta.y + 16, meta.x : meta.x + 16])
            np.testing.assert_array_equal(
                v2, img[meta.c2, meta.y : meta.y + 16, meta.x : meta.x + 16])
