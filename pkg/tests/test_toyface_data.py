#!/usr/bin/env python3
"""
Unit tests for the toy portrait data module
"""

import unittest
import sys
import os
import tempfile

import numpy as np

# Add the parent directory to the path so we can import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from constants import REGIONS, FACIAL_MASK_COVERAGE
from imaging import ImageTensor, ShadowMask
from toyface_data import (
    DatasetError, LightSpec, generate_toy_portrait, portrait_from_image, random_light,
    synth_relight, synth_brightness_shift, random_facial_mask, synth_shadow,
    make_paired_sample, sample_seeds, build_senet_dataset, default_face_box,
    write_dataset, read_dataset, read_manifest, load_portrait_directory
)


class TestToyPortrait(unittest.TestCase):
    """Tests for the procedural portrait generator"""

    def test_deterministic(self):
        """Test the same seed gives the same portrait and another seed does not"""
        a = generate_toy_portrait(11)
        b = generate_toy_portrait(11)
        c = generate_toy_portrait(12)
        np.testing.assert_array_equal(a.image.data, b.image.data)
        np.testing.assert_array_equal(a.region_map, b.region_map)
        self.assertFalse(np.array_equal(a.image.data, c.image.data))

    def test_layout(self):
        """Test the portrait has a face with eyes and brows and unit normals"""
        p = generate_toy_portrait(3)
        self.assertEqual(p.image.shape, (64, 64, 3))
        self.assertEqual(p.size, 64)
        coverage = p.face_mask().coverage()
        self.assertGreater(coverage, 0.2)
        self.assertLess(coverage, 0.6)
        self.assertFalse(p.region_mask("EYES").is_empty())
        self.assertFalse(p.region_mask("BROWS").is_empty())
        norms = np.linalg.norm(p.normal_map, axis=2)
        np.testing.assert_allclose(norms, 1.0, atol=1e-4)
        # background faces the camera
        background = p.region_map == REGIONS["BACKGROUND"]
        np.testing.assert_allclose(p.normal_map[background][:, 2], 1.0, atol=1e-6)

    def test_larger_sizes(self):
        """Test the generator scales to 128 pixels"""
        self.assertEqual(generate_toy_portrait(0, size=128).image.shape, (128, 128, 3))

    def test_unsupported_size(self):
        """Test sizes outside the supported list are refused"""
        with self.assertRaises(ValueError):
            generate_toy_portrait(0, size=50)

    def test_portrait_from_image(self):
        """Test a real image is wrapped with an inscribed face ellipse"""
        img = ImageTensor(np.full((32, 32, 3), 0.5))
        p = portrait_from_image(img, (4, 8, 28, 24))
        self.assertTrue(p.face_mask().data[16, 16])
        self.assertFalse(p.face_mask().data[0, 0])
        with self.assertRaises(ValueError):
            portrait_from_image(img, (10, 10, 40, 20))


class TestRelighting(unittest.TestCase):
    """Tests for relighting strategies"""

    def setUp(self):
        self.portrait = generate_toy_portrait(5)

    def test_identity_light(self):
        """Test ambient 1 with zero intensity leaves the image unchanged"""
        light = LightSpec([0.0, 0.0, 1.0], ambient=1.0, intensity=0.0)
        np.testing.assert_array_equal(synth_relight(self.portrait, light).data, self.portrait.image.data)

    def test_frontal_light_on_background(self):
        """Test a frontal unit light leaves camera-facing background unchanged"""
        light = LightSpec([0.0, 0.0, 1.0], ambient=0.0, intensity=1.0)
        relit = synth_relight(self.portrait, light).data
        background = self.portrait.region_map == REGIONS["BACKGROUND"]
        np.testing.assert_allclose(relit[background], self.portrait.image.data[background], atol=1e-6)

    def test_light_validation(self):
        """Test non-unit directions and negative terms are refused"""
        with self.assertRaises(ValueError):
            LightSpec([0.0, 0.0, 2.0], 0.5, 0.5)
        with self.assertRaises(ValueError):
            LightSpec([0.0, 0.0, 1.0], -0.1, 0.5)

    def test_random_light_round_trip(self):
        """Test random lights are valid and rebuild from their dict"""
        light = random_light(np.random.default_rng(0))
        self.assertGreater(light.direction[2], 0.0)
        again = LightSpec.from_dict(light.to_dict())
        np.testing.assert_allclose(again.direction, light.direction)

    def test_brightness_shift_darkens(self):
        """Test the brightness strategy never brightens a neutral gray"""
        gray = ImageTensor(np.full((64, 64, 3), 0.5, dtype=np.float32))
        p = portrait_from_image(gray, (8, 8, 56, 56))
        shifted = synth_brightness_shift(p, np.random.default_rng(1)).data
        self.assertLessEqual(float(shifted.max()), 0.4 + 1e-6)
        self.assertGreaterEqual(float(shifted.min()), 0.15 - 1e-6)


class TestMasksAndShadows(unittest.TestCase):
    """Tests for facial masks and synthetic shadows"""

    def test_facial_mask_coverage(self):
        """Test facial masks stay inside the face and cover 10-60% of it"""
        low, high = FACIAL_MASK_COVERAGE
        for seed in range(15):
            p = generate_toy_portrait(seed)
            mask = random_facial_mask(p, seed + 100)
            face = p.face_mask().data
            self.assertFalse(np.any(mask.data & ~face))
            coverage = mask.data[face].mean()
            self.assertGreaterEqual(coverage, low)
            self.assertLessEqual(coverage, high)

    def test_facial_mask_deterministic(self):
        """Test the mask depends only on its seed"""
        p = generate_toy_portrait(2)
        np.testing.assert_array_equal(random_facial_mask(p, 9).data, random_facial_mask(p, 9).data)

    def test_generator_sweep(self):
        """Test seeds 0..99 give valid portraits with mostly-skin faces and masks that stay on the face"""
        for seed in range(100):
            p = generate_toy_portrait(seed)
            skin = float((p.region_map == REGIONS["SKIN"]).mean())
            self.assertGreaterEqual(skin, 0.2, seed)
            mask = random_facial_mask(p, seed)
            self.assertFalse(np.any(mask.data & (p.region_map == REGIONS["BACKGROUND"])), seed)

    def test_hard_shadow(self):
        """Test a hard shadow scales pixels inside the mask only"""
        p = generate_toy_portrait(1)
        mask = random_facial_mask(p, 1)
        shadowed = synth_shadow(p, mask, darkness=0.5).data
        inside = mask.data
        np.testing.assert_allclose(shadowed[inside], p.image.data[inside] * 0.5, atol=1e-6)
        np.testing.assert_array_equal(shadowed[~inside], p.image.data[~inside])

    def test_soft_shadow_bounds(self):
        """Test a soft shadow never brightens and stays in range"""
        p = generate_toy_portrait(1)
        shadowed = synth_shadow(p, random_facial_mask(p, 1), darkness=0.6, softness=2.0).data
        self.assertTrue(np.all(shadowed <= p.image.data + 1e-6))
        self.assertGreaterEqual(float(shadowed.min()), 0.0)

    def test_shadow_validation(self):
        """Test darkness outside (0, 1) and negative softness are refused"""
        p = generate_toy_portrait(1)
        mask = ShadowMask.empty(64, 64)
        with self.assertRaises(ValueError):
            synth_shadow(p, mask, darkness=1.0)
        with self.assertRaises(ValueError):
            synth_shadow(p, mask, darkness=0.5, softness=-1.0)


class TestPairedDataset(unittest.TestCase):
    """Tests for the paired SE-Net dataset"""

    def test_composite_pair(self):
        """Test the synthetic input is the relit portrait inside the mask and the clean one outside"""
        p = generate_toy_portrait(8)
        mask = random_facial_mask(p, 8)
        light = LightSpec([0.6, 0.0, 0.8], ambient=0.3, intensity=0.9)
        sample = make_paired_sample(p, light, mask)
        relit = synth_relight(p, light).data
        np.testing.assert_array_equal(sample.input.data[mask.data], relit[mask.data])
        np.testing.assert_array_equal(sample.input.data[~mask.data], p.image.data[~mask.data])
        self.assertEqual(sample.target_structure.shape, (64, 64, 1))

    def test_seed_derivation(self):
        """Test per-index seeds are stable and distinct"""
        self.assertEqual(sample_seeds(0, 4), sample_seeds(0, 4))
        self.assertNotEqual(sample_seeds(0, 4), sample_seeds(0, 5))
        self.assertEqual(len(set(sample_seeds(1, 0))), 3)

    def test_workers_do_not_change_results(self):
        """Test threaded and serial builds agree"""
        serial = build_senet_dataset(3, seed=7)
        threaded = build_senet_dataset(3, seed=7, workers=2)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.input.data, b.input.data)
            np.testing.assert_array_equal(a.mask.data, b.mask.data)

    def test_brightness_strategy(self):
        """Test the brightness strategy records no light"""
        samples = build_senet_dataset(2, seed=1, strategy="brightness")
        self.assertTrue(all(sample.light is None for sample in samples))
        self.assertEqual(samples[0].record["strategy"], "brightness")

    def test_invalid_requests(self):
        """Test empty datasets and unknown strategies are refused"""
        with self.assertRaises(ValueError):
            build_senet_dataset(0, seed=0)
        with self.assertRaises(ValueError):
            build_senet_dataset(1, seed=0, strategy="flash")

    def test_write_and_read(self):
        """Test a written dataset reads back with its masks, lights and records"""
        samples = build_senet_dataset(2, seed=3)
        with tempfile.TemporaryDirectory() as root:
            write_dataset(samples, root)
            records = read_manifest(root)
            loaded = read_dataset(root)
        self.assertEqual([r["index"] for r in records], [0, 1])
        self.assertEqual(len(loaded), 2)
        for original, again in zip(samples, loaded):
            np.testing.assert_array_equal(original.mask.data, again.mask.data)
            self.assertLessEqual(float(np.abs(original.clean.data - again.clean.data).max()), 0.5 / 255 + 1e-6)
            np.testing.assert_allclose(original.light.direction, again.light.direction)

    def test_missing_dataset(self):
        """Test reading a directory without a manifest raises DatasetError"""
        with tempfile.TemporaryDirectory() as root:
            with self.assertRaises(DatasetError):
                read_dataset(root)

    def test_load_portrait_directory(self):
        """Test clean portraits in a directory load as face-labelled portraits"""
        samples = build_senet_dataset(2, seed=4)
        with tempfile.TemporaryDirectory() as root:
            directory = write_dataset(samples, root)
            portraits = load_portrait_directory(directory, (8, 8, 56, 56))
            self.assertEqual(len(portraits), 2)
            self.assertTrue(portraits[0].face_mask().data[32, 32])
            with self.assertRaises(DatasetError):
                load_portrait_directory(root, (8, 8, 56, 56))

    def test_structure_target_ignores_light_and_mask(self):
        """Test the structure target depends on the clean portrait only"""
        p = generate_toy_portrait(9)
        first = make_paired_sample(p, LightSpec([0.6, 0.0, 0.8], 0.3, 0.9), random_facial_mask(p, 1))
        second = make_paired_sample(p, LightSpec([0.0, -0.6, 0.8], 0.7, 0.4), random_facial_mask(p, 2))
        self.assertFalse(np.array_equal(first.input.data, second.input.data))
        np.testing.assert_array_equal(first.target_structure.data, second.target_structure.data)

    def test_dataset_from_portraits(self):
        """Test supplied portraits are cycled by index and recorded in the manifest"""
        rng = np.random.default_rng(6)
        box = default_face_box(64)
        portraits = [portrait_from_image(ImageTensor(rng.uniform(0.3, 0.9, (64, 64, 3)).astype(np.float32)), box)
                     for _ in range(2)]
        samples = build_senet_dataset(3, seed=2, portraits=portraits)
        self.assertEqual([s.record["portrait_index"] for s in samples], [0, 1, 0])
        np.testing.assert_array_equal(samples[2].clean.data, portraits[0].image.data)
        face = portraits[0].face_mask().data
        self.assertFalse(np.any(samples[0].mask.data & ~face))
        with self.assertRaises(DatasetError):
            build_senet_dataset(1, seed=2, size=128, portraits=portraits)
        with self.assertRaises(ValueError):
            build_senet_dataset(1, seed=2, portraits=[])

    def test_default_face_box(self):
        """Test the default face box is centered and taller than wide"""
        top, left, bottom, right = default_face_box(64)
        self.assertEqual(top + bottom, 64)
        self.assertEqual(left + right, 64)
        self.assertGreater(bottom - top, right - left)


if __name__ == "__main__":
    unittest.main()
