#!/usr/bin/env python3
"""
Unit tests for evaluation metrics and reports
"""

import unittest
import sys
import os
import json
import tempfile

import numpy as np

# Add the parent directory to the path so we can import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from constants import SSIM
from imaging import ImageTensor, ShadowMask, ImageFileError, luminance, save_image, save_mask
from se_net import perceptual_distance
from metrics import (
    ssim, ssim_map, lab_rmse, rmse_lab, evaluate_pair, aggregate_reports, format_report_table,
    write_report_jsonl, evaluate_directories
)


def sliding_window_ssim(a, b):
    """Per-pixel SSIM from explicit 11x11 Gaussian windows over a symmetric-padded image"""
    size, sigma = SSIM["WINDOW"], SSIM["SIGMA"]
    half = size // 2
    offsets = np.arange(size) - half
    g = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    window /= window.sum()
    c1 = (SSIM["K1"] * SSIM["DATA_RANGE"]) ** 2
    c2 = (SSIM["K2"] * SSIM["DATA_RANGE"]) ** 2
    pa, pb = np.pad(a, half, mode="symmetric"), np.pad(b, half, mode="symmetric")
    out = np.empty(a.shape)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            wa, wb = pa[y:y + size, x:x + size], pb[y:y + size, x:x + size]
            mu_a, mu_b = (window * wa).sum(), (window * wb).sum()
            var_a = (window * (wa - mu_a) ** 2).sum()
            var_b = (window * (wb - mu_b) ** 2).sum()
            cov = (window * (wa - mu_a) * (wb - mu_b)).sum()
            out[y, x] = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                         / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return out


class TestMetrics(unittest.TestCase):
    """Tests for SSIM and LAB RMSE"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.a = ImageTensor(rng.random((24, 24, 3)))
        self.b = ImageTensor(np.clip(self.a.data + 0.2 * rng.standard_normal((24, 24, 3)), 0, 1))
        mask = np.zeros((24, 24), dtype=bool)
        mask[6:18, 6:18] = True
        self.mask = ShadowMask(mask)

    def test_ssim_identity_and_symmetry(self):
        """Test SSIM is exactly 1 on identical images and symmetric"""
        self.assertEqual(ssim(self.a, self.a), 1.0)
        self.assertEqual(ssim(self.a, self.b), ssim(self.b, self.a))
        self.assertLess(ssim(self.a, self.b), 1.0)
        self.assertEqual(ssim(self.a, self.a, self.mask), 1.0)

    def test_lab_rmse_lightness_offset(self):
        """Test a lightness-only offset of 10 gives 10 / sqrt(3)"""
        lab = np.zeros((8, 8, 3))
        lab[:, :, 0] = 50.0
        shifted = lab.copy()
        shifted[:, :, 0] += 10.0
        self.assertAlmostEqual(lab_rmse(lab, shifted), 10.0 / np.sqrt(3.0), places=10)

    def test_rmse_lab_identity(self):
        """Test identical images have zero error"""
        self.assertEqual(rmse_lab(self.a, self.a), 0.0)
        self.assertGreater(rmse_lab(self.a, self.b, self.mask), 0.0)

    def test_empty_region(self):
        """Test metrics over an empty region are refused"""
        with self.assertRaises(ValueError):
            ssim(self.a, self.b, ShadowMask.empty(24, 24))
        with self.assertRaises(ValueError):
            rmse_lab(self.a, self.b, ShadowMask.empty(24, 24))

    def test_ssim_matches_sliding_window(self):
        """Test the SSIM map agrees with an explicit per-pixel Gaussian window computation"""
        la, lb = luminance(self.a).astype(np.float64), luminance(self.b).astype(np.float64)
        np.testing.assert_allclose(ssim_map(la, lb), sliding_window_ssim(la, lb), atol=1e-6)

    def test_ssim_needs_a_full_window(self):
        """Test images smaller than the SSIM window are refused"""
        small = ImageTensor(np.full((8, 8, 3), 0.5))
        with self.assertRaises(ValueError):
            ssim(small, small)

    def test_rmse_lab_grows_with_perturbation(self):
        """Test larger steps along one perturbation direction give larger LAB errors"""
        rng = np.random.default_rng(2)
        base = rng.uniform(0.25, 0.75, (24, 24, 3))
        direction = rng.uniform(-1.0, 1.0, (24, 24, 3))
        errors = [rmse_lab(ImageTensor(base), ImageTensor(base + step * direction))
                  for step in (0.0, 0.02, 0.05, 0.1, 0.2)]
        self.assertEqual(errors[0], 0.0)
        for smaller, larger in zip(errors, errors[1:]):
            self.assertLess(smaller, larger)


class TestReports(unittest.TestCase):
    """Tests for region-wise reports"""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.gt = ImageTensor(rng.random((16, 16, 3)))
        self.result = ImageTensor(np.clip(self.gt.data + 0.05, 0, 1))
        mask = np.zeros((16, 16), dtype=bool)
        mask[:, :6] = True
        self.mask = ShadowMask(mask)

    def test_regions(self):
        """Test every region gets the three metrics and pixel counts add up"""
        report = evaluate_pair(self.result, self.gt, self.mask)
        for region in ("all", "shadow", "non_shadow"):
            self.assertEqual(set(report.regions[region]), {"ssim", "perceptual", "rmse_lab"})
        self.assertEqual(report.pixel_counts["shadow"] + report.pixel_counts["non_shadow"], 256)

    def test_rmse_regions_recombine(self):
        """Test pixel-weighted squared region errors add up to the whole-image error"""
        report = evaluate_pair(self.result, self.gt, self.mask)
        counts = report.pixel_counts
        whole = report.value("all", "rmse_lab") ** 2 * (counts["shadow"] + counts["non_shadow"])
        parts = (report.value("shadow", "rmse_lab") ** 2 * counts["shadow"]
                 + report.value("non_shadow", "rmse_lab") ** 2 * counts["non_shadow"])
        self.assertAlmostEqual(whole / parts, 1.0, delta=1e-10)

    def test_report_matches_single_metrics(self):
        """Test the report holds the same values as each metric computed on its own"""
        report = evaluate_pair(self.result, self.gt, self.mask)
        for region, mask in (("all", None), ("shadow", self.mask), ("non_shadow", ~self.mask)):
            self.assertAlmostEqual(report.value(region, "ssim"), ssim(self.result, self.gt, mask), places=12)
            self.assertAlmostEqual(report.value(region, "rmse_lab"), rmse_lab(self.result, self.gt, mask), places=12)
            self.assertAlmostEqual(report.value(region, "perceptual"),
                                   perceptual_distance(self.result, self.gt, mask), places=6)

    def test_absent_regions(self):
        """Test empty shadow or non-shadow regions are reported as absent"""
        empty = evaluate_pair(self.result, self.gt, ShadowMask.empty(16, 16))
        full = evaluate_pair(self.result, self.gt, ShadowMask.full(16, 16))
        self.assertIsNone(empty.regions["shadow"])
        self.assertIsNone(full.regions["non_shadow"])
        self.assertIsNotNone(full.regions["shadow"])

    def test_aggregate_skips_absent(self):
        """Test means are taken over the reports where a region exists"""
        present = evaluate_pair(self.result, self.gt, self.mask)
        absent = evaluate_pair(self.result, self.gt, ShadowMask.empty(16, 16))
        summary = aggregate_reports([present, absent])
        self.assertEqual(summary.count, 2)
        self.assertAlmostEqual(summary.value("shadow", "rmse_lab"), present.value("shadow", "rmse_lab"))
        with self.assertRaises(ValueError):
            aggregate_reports([])

    def test_table_and_jsonl(self):
        """Test the table marks absent values and the JSONL holds one line per row plus the aggregate"""
        rows = [("00000", evaluate_pair(self.result, self.gt, self.mask)),
                ("00001", evaluate_pair(self.result, self.gt, ShadowMask.empty(16, 16)))]
        summary = aggregate_reports([report for _, report in rows])
        table = format_report_table(rows, summary)
        self.assertIn("--", table)
        self.assertIn("mean (n=2)", table)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "report.jsonl")
            write_report_jsonl(path, rows, summary)
            with open(path, "r", encoding="utf-8") as f:
                lines = [json.loads(line) for line in f]
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[-1]["sample"], "aggregate")
        self.assertIsNone(lines[1]["regions"]["shadow"])

    def test_evaluate_directories(self):
        """Test same-named files are matched and missing ground truth is reported"""
        with tempfile.TemporaryDirectory() as tmp:
            for sub in ("results", "gt", "masks"):
                os.makedirs(os.path.join(tmp, sub))
            save_image(self.result, os.path.join(tmp, "results", "a.png"))
            save_image(self.gt, os.path.join(tmp, "gt", "a.png"))
            save_mask(self.mask, os.path.join(tmp, "masks", "a.png"))
            rows, summary = evaluate_directories(*(os.path.join(tmp, sub) for sub in ("results", "gt", "masks")))
            self.assertEqual([name for name, _ in rows], ["a"])
            self.assertEqual(summary.count, 1)

            save_image(self.result, os.path.join(tmp, "results", "b.png"))
            with self.assertRaises(ImageFileError):
                evaluate_directories(*(os.path.join(tmp, sub) for sub in ("results", "gt", "masks")))
            with self.assertRaises(FileNotFoundError):
                evaluate_directories(os.path.join(tmp, "gt", "nothing"), tmp, tmp)


if __name__ == "__main__":
    unittest.main()
