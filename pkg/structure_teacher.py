#!/usr/bin/env python3
"""
Structure teacher for the portrait shadow removal toolkit
Deterministic difference-of-Gaussians line extractor producing the pseudo
ground-truth structure maps SE-Net is trained against
"""

import logging

import numpy as np
from scipy import ndimage

from constants import STRUCTURE_TEACHER
from imaging import ImageTensor, luminance

logger = logging.getLogger(__name__)


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def dog_response(lum: np.ndarray, sigma: float = STRUCTURE_TEACHER["SIGMA"],
                 k: float = STRUCTURE_TEACHER["K"]) -> np.ndarray:
    """Difference of Gaussians G_sigma * L - G_{k sigma} * L (negative on dark lines)"""
    lum = lum.astype(np.float64)
    narrow = ndimage.gaussian_filter(lum, sigma, mode="reflect")
    wide = ndimage.gaussian_filter(lum, k * sigma, mode="reflect")
    return narrow - wide


def soft_threshold(strength: np.ndarray, tau: float = STRUCTURE_TEACHER["TAU"],
                   phi: float = STRUCTURE_TEACHER["PHI"]) -> np.ndarray:
    """Logistic soft threshold normalized so that zero strength maps to 0 and large strength to 1"""
    floor = _logistic(-phi * tau)
    response = (_logistic(phi * (strength - tau)) - floor) / (1.0 - floor)
    return np.clip(response, 0.0, 1.0)


def extract_structure_teacher(img: ImageTensor) -> ImageTensor:
    """Structure map of an image: dark lines on a white background

    Args:
        img: RGB (or grayscale) unit-range image

    Returns:
        ImageTensor: Single-channel unit-range map, 1 where there is no structure
    """
    if img.value_range != "unit":
        raise ValueError(f"The structure teacher expects a unit-range image, got {img.value_range}")
    dog = dog_response(luminance(img))
    strength = np.maximum(-dog, 0.0)
    structure = 1.0 - soft_threshold(strength)
    return ImageTensor(structure.astype(np.float32)[:, :, None], "unit")
