#!/usr/bin/env python3
"""
Unit tests for the gradient-guided detail restoration model
"""

import unittest
import sys
import os

import numpy as np
import torch

# Add the parent directory to the path so we can import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from imaging import ImageTensor, ShadowMask, gradient_map
from model_state import UntrainedModelError
from diffusion_core import TimestepError, make_schedule, make_timestep_plan
from cond_unet import CondUNetConfig
from toyface_data import build_senet_dataset
from detail_model import (
    DetailTrainConfig, lowpass, suppress_detail, detail_conditions, train_detail, eps_forward_detail, sample_detail
)


def micro_detail_config(**overrides):
    settings = dict(unet=CondUNetConfig(base_channels=4, channel_multipliers=(1, 2), num_res_blocks=1),
                    batch_size=2, max_steps=2)
    settings.update(overrides)
    return DetailTrainConfig(**settings)


class TestDetailConfig(unittest.TestCase):
    """Tests for detail training settings"""

    def test_gain_range(self):
        """Test the gradient gain range defaults, round-trips and is validated"""
        config = micro_detail_config()
        self.assertEqual(config.gradient_gain_range, (0.3, 1.0))
        self.assertEqual(DetailTrainConfig.from_dict(config.to_dict()), config)
        with self.assertRaises(ValueError):
            micro_detail_config(gradient_gain_range=(0.8, 0.2))
        with self.assertRaises(ValueError):
            micro_detail_config(gradient_gain_range=(0.0, 1.0))


class TestDetailSuppression(unittest.TestCase):
    """Tests for the simulated coarse result"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.image = ImageTensor(0.5 + 0.1 * rng.standard_normal((32, 32, 3)).clip(-1, 1))
        mask = np.zeros((32, 32), dtype=bool)
        mask[8:24, 8:24] = True
        self.mask = ShadowMask(mask)

    def test_lowpass_is_projection(self):
        """Test low-passing twice equals low-passing once and constants pass through"""
        once = lowpass(self.image.data)
        np.testing.assert_allclose(lowpass(once), once, atol=1e-10)
        np.testing.assert_allclose(lowpass(np.full((16, 16, 3), 0.3)), 0.3, atol=1e-12)

    def test_suppression_is_idempotent(self):
        """Test suppressing a fully masked image twice changes nothing further"""
        full = ShadowMask.full(32, 32)
        once = suppress_detail(self.image, full)
        np.testing.assert_allclose(suppress_detail(once, full).data, once.data, atol=1e-6)

    def test_partial_mask_second_pass(self):
        """Test a second pass with a partial mask keeps the outside and stays low-passed inside"""
        once = suppress_detail(self.image, self.mask)
        twice = suppress_detail(once, self.mask)
        outside = ~self.mask.data
        np.testing.assert_array_equal(twice.data[outside], self.image.data[outside])
        inside = self.mask.data
        self.assertLessEqual(float(twice.data[inside].std()), float(self.image.data[inside].std()))

    def test_lowpass_does_not_wrap(self):
        """Test a bright left column does not leak onto the right border"""
        data = np.zeros((32, 32, 1))
        data[:, 0] = 1.0
        smooth = lowpass(data)
        self.assertGreater(float(smooth[:, 0].min()), 0.3)
        self.assertLess(float(np.abs(smooth[:, -1]).max()), 0.05)

    def test_outside_mask_unchanged(self):
        """Test pixels outside the mask are untouched and detail inside is reduced"""
        coarse = suppress_detail(self.image, self.mask)
        outside = ~self.mask.data
        np.testing.assert_array_equal(coarse.data[outside], self.image.data[outside])
        inside = self.mask.data
        self.assertLess(float(coarse.data[inside].std()), float(self.image.data[inside].std()))

    def test_condition_stack(self):
        """Test the conditioning stack has image, gradient and mask channels"""
        stack = detail_conditions(self.image, gradient_map(self.image, self.mask), self.mask)
        self.assertEqual(tuple(stack.shape), (1, 5, 32, 32))
        self.assertTrue(bool((stack[0, 4].numpy() == self.mask.as_float()).all()))


class TestDetailModel(unittest.TestCase):
    """Tests for detail training and sampling"""

    @classmethod
    def setUpClass(cls):
        cls.dataset = build_senet_dataset(2, seed=0)
        cls.schedule = make_schedule(T=20, beta_min=1e-4, beta_max=0.2)
        cls.state = train_detail(cls.dataset, micro_detail_config(), seed=0, schedule=cls.schedule)

    def test_training_state(self):
        """Test training records its kind and steps"""
        self.assertEqual(self.state.kind, "detail")
        self.assertEqual(self.state.step, 2)
        self.assertEqual(self.state.config["train"]["gradient_gain_range"], [0.3, 1.0])

    def test_sample_keeps_outside_pixels(self):
        """Test the refined image equals the coarse one outside the mask"""
        sample = self.dataset[0]
        coarse = suppress_detail(sample.clean, sample.mask)
        out = sample_detail(self.state, coarse, sample.input, sample.mask, make_timestep_plan(20, 3), seed=1)
        outside = ~sample.mask.data
        np.testing.assert_array_equal(out.data[outside], coarse.data[outside])
        self.assertEqual(out.shape, coarse.shape)

    def test_eps_forward_detail(self):
        """Test the single-step noise prediction shape and timestep check"""
        sample = self.dataset[0]
        G = gradient_map(sample.input, sample.mask)
        x_t = torch.randn(1, 3, 64, 64)
        eps = eps_forward_detail(self.state, x_t, sample.clean, G, sample.mask, 4)
        self.assertEqual(tuple(eps.shape), (1, 3, 64, 64))
        with self.assertRaises(TimestepError):
            eps_forward_detail(self.state, x_t, sample.clean, G, sample.mask, 20)

    def test_prediction_follows_gradient_condition(self):
        """Test changing only the gradient condition changes the noise prediction"""
        sample = self.dataset[0]
        x_t = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        flat = gradient_map(ImageTensor(np.full((64, 64, 3), 0.5)), sample.mask)
        textured = gradient_map(sample.input, sample.mask)
        a = eps_forward_detail(self.state, x_t, sample.clean, flat, sample.mask, 4, use_ema=False)
        b = eps_forward_detail(self.state, x_t, sample.clean, textured, sample.mask, 4, use_ema=False)
        self.assertFalse(torch.allclose(a, b))
        ablated = train_detail(self.dataset, micro_detail_config(use_condition=False), schedule=self.schedule)
        a = eps_forward_detail(ablated, x_t, sample.clean, flat, sample.mask, 4, use_ema=False)
        b = eps_forward_detail(ablated, x_t, sample.clean, textured, sample.mask, 4, use_ema=False)
        torch.testing.assert_close(a, b)

    def test_empty_mask(self):
        """Test an empty mask returns the coarse image"""
        sample = self.dataset[1]
        out = sample_detail(self.state, sample.clean, sample.input, ShadowMask.empty(64, 64),
                            make_timestep_plan(20, 3))
        np.testing.assert_array_equal(out.data, sample.clean.data)

    def test_untrained_state(self):
        """Test sampling from an untrained state is refused"""
        untrained = train_detail(self.dataset, micro_detail_config(max_steps=1), schedule=self.schedule)
        untrained.step = 0
        sample = self.dataset[0]
        with self.assertRaises(UntrainedModelError):
            sample_detail(untrained, sample.clean, sample.input, sample.mask, make_timestep_plan(20, 3))

    def test_empty_dataset(self):
        """Test training on nothing is refused"""
        with self.assertRaises(ValueError):
            train_detail([], micro_detail_config(), schedule=self.schedule)


if __name__ == "__main__":
    unittest.main()
