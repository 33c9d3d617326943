#!/usr/bin/env python3
"""
Unit tests for Otsu mask refinement
"""

import unittest
import sys
import os
from fractions import Fraction

import numpy as np

# Add the parent directory to the path so we can import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from imaging import ImageTensor, ShadowMask, DimensionError
from mask_refine import (
    between_class_variance, otsu_from_histogram, otsu_threshold, histogram, difference_map,
    refine_mask, composite_update
)


def exhaustive_otsu(hist):
    """Score every threshold exactly from cumulative sums and take the first maximum"""
    counts = np.asarray(hist, dtype=np.int64)
    below = np.cumsum(counts)
    below_sum = np.cumsum(counts * np.arange(counts.size))
    total, total_sum = int(below[-1]), int(below_sum[-1])
    scores = []
    for k in range(counts.size):
        n0, s0 = int(below[k]), int(below_sum[k])
        n1, s1 = total - n0, total_sum - s0
        scores.append(Fraction((n1 * s0 - n0 * s1) ** 2, n0 * n1) if n0 and n1 else Fraction(0))
    best = max(scores)
    if best == 0:
        return 0, True
    return scores.index(best), False


class TestOtsu(unittest.TestCase):
    """Tests for the exact Otsu threshold"""

    def test_constant_image_is_degenerate(self):
        """Test a single occupied bin yields (0, degenerate)"""
        self.assertEqual(tuple(otsu_threshold(np.full((8, 8), 0.3))), (0, True))

    def test_two_spikes(self):
        """Test 0 / 1 halves pick the smallest maximizing threshold"""
        gray = np.concatenate([np.zeros(50), np.ones(50)]).reshape(10, 10)
        self.assertEqual(tuple(otsu_threshold(gray)), (0, False))

    def test_matches_exhaustive_search(self):
        """Test the running-sum search agrees with exact variance maximization on 1000 histograms"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            hist = rng.integers(0, 20, size=256)
            hist[rng.random(256) < 0.5] = 0
            self.assertEqual(tuple(otsu_from_histogram(hist)), exhaustive_otsu(hist))

    def test_threshold_maximizes_between_class_variance(self):
        """Test the chosen threshold scores highest under the exported variance function"""
        rng = np.random.default_rng(1)
        for _ in range(5):
            hist = rng.integers(0, 20, size=256)
            k, _ = otsu_from_histogram(hist)
            best = max(between_class_variance(hist, j) for j in range(256))
            self.assertEqual(between_class_variance(hist, k), best)

    def test_two_bin_histogram(self):
        """Test 30 pixels at bin 10 and 70 at bin 200 split at the lower bin"""
        hist = np.zeros(256, dtype=int)
        hist[10], hist[200] = 30, 70
        self.assertEqual(tuple(otsu_from_histogram(hist)), (10, False))
        self.assertEqual(exhaustive_otsu(hist), (10, False))

    def test_bimodal_threshold_separates_modes(self):
        """Test a bimodal histogram is split between its modes"""
        hist = np.zeros(256, dtype=int)
        hist[40:60] = 10
        hist[180:200] = 10
        k, degenerate = otsu_from_histogram(hist)
        self.assertFalse(degenerate)
        self.assertTrue(59 <= k < 180)

    def test_histogram_validation(self):
        """Test wrong bin counts and negative counts are refused"""
        with self.assertRaises(ValueError):
            otsu_from_histogram([1] * 10)
        with self.assertRaises(ValueError):
            otsu_from_histogram([-1] + [0] * 255)

    def test_histogram_rounding(self):
        """Test values are binned at round(255 v)"""
        hist = histogram(np.array([0.0, 0.5, 1.0]))
        self.assertEqual(hist[0], 1)
        self.assertEqual(hist[128], 1)
        self.assertEqual(hist[255], 1)

    def test_image_input(self):
        """Test single-channel images are accepted and RGB refused"""
        self.assertEqual(tuple(otsu_threshold(ImageTensor(np.full((8, 8, 1), 0.5)))), (0, True))
        with self.assertRaises(ValueError):
            otsu_threshold(ImageTensor(np.zeros((8, 8, 3))))


class TestRefineMask(unittest.TestCase):
    """Tests for refined masks and the composite update"""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.removed = ImageTensor((0.45 + 0.1 * rng.random((16, 16, 3))).astype(np.float32))
        shadowed = self.removed.data.copy()
        shadowed[:, :8] -= 0.4
        self.shadowed = ImageTensor(shadowed)

    def test_half_plane_recovered(self):
        """Test a uniform half-plane change is recovered exactly"""
        refined = refine_mask(self.shadowed, self.removed)
        expected = np.zeros((16, 16), dtype=bool)
        expected[:, :8] = True
        np.testing.assert_array_equal(refined.data, expected)

    def test_identical_images_give_empty_mask(self):
        """Test no change yields the empty mask"""
        self.assertTrue(refine_mask(self.removed, self.removed).is_empty())

    def test_difference_map(self):
        """Test the difference is the channel mean of absolute differences"""
        d = difference_map(self.shadowed, self.removed)
        np.testing.assert_allclose(d[:, :8], 0.4, atol=1e-6)
        np.testing.assert_array_equal(d[:, 8:], 0.0)
        with self.assertRaises(DimensionError):
            difference_map(self.removed, ImageTensor(np.zeros((8, 8, 3))))

    def test_composite_update(self):
        """Test the update takes the removal inside the refined mask only"""
        refined = refine_mask(self.shadowed, self.removed)
        updated = composite_update(self.shadowed, self.removed, refined)
        np.testing.assert_array_equal(updated.data, self.removed.data)
        empty = composite_update(self.shadowed, self.removed, ShadowMask.empty(16, 16))
        np.testing.assert_array_equal(empty.data, self.shadowed.data)


if __name__ == "__main__":
    unittest.main()
