#!/usr/bin/env python3
"""
Imaging primitives for the portrait shadow removal toolkit
Image and mask containers, compositing, color conversion, gradients,
morphology and PNG input/output
"""

import os
import logging
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import color

from constants import (
    LUMA_WEIGHTS, LAB_WHITE, MASK_THRESHOLD, MIN_IMAGE_SIDE,
    VALUE_RANGES, RANGE_TOLERANCE
)

logger = logging.getLogger(__name__)

RANGE_BOUNDS = {
    "unit": (0.0, 1.0),
    "signed": (-1.0, 1.0)
}


class DimensionError(ValueError):
    """Exception raised when raster shapes do not agree."""
    pass


class ChannelError(ValueError):
    """Exception raised when a raster has the wrong number of channels."""
    pass


class ImageFileError(OSError):
    """Exception raised when a raster file cannot be read or written."""
    pass


class ImageTensor:
    """H x W x C real raster with a declared value range"""

    def __init__(self, data, value_range: str = "unit"):
        """Wrap an array as an image

        Args:
            data: Array of shape [H, W, C] or [H, W] (treated as C = 1)
            value_range: "unit" (0..1), "signed" (-1..1) or "lab" (CIELAB)

        Raises:
            DimensionError: If H or W is below the minimum side
            ChannelError: If C is not 1 or 3
            ValueError: If values fall outside the declared range
        """
        array = np.asarray(data)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3:
            raise DimensionError(f"Expected an [H, W, C] array, got shape {array.shape}")
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        height, width, channels = array.shape
        if height < MIN_IMAGE_SIDE or width < MIN_IMAGE_SIDE:
            raise DimensionError(f"Image sides must be at least {MIN_IMAGE_SIDE}, got {height}x{width}")
        if channels not in (1, 3):
            raise ChannelError(f"Image must have 1 or 3 channels, got {channels}")
        if value_range not in VALUE_RANGES:
            raise ValueError(f"Unknown value range: {value_range}")

        if value_range in RANGE_BOUNDS:
            low, high = RANGE_BOUNDS[value_range]
            if array.size and (array.min() < low - RANGE_TOLERANCE or array.max() > high + RANGE_TOLERANCE):
                raise ValueError(
                    f"Values [{array.min():.6f}, {array.max():.6f}] outside the {value_range} range")
        elif value_range == "lab" and array.size:
            lightness = array[:, :, 0]
            if lightness.min() < -RANGE_TOLERANCE or lightness.max() > 100.0 + 1e-3:
                raise ValueError("LAB lightness outside [0, 100]")

        self.data = array
        self.value_range = value_range

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def copy(self) -> "ImageTensor":
        return ImageTensor(self.data.copy(), self.value_range)

    def to_signed(self) -> "ImageTensor":
        """Map a unit-range image to the signed range (2x - 1)"""
        if self.value_range == "signed":
            return self
        if self.value_range != "unit":
            raise ValueError(f"Cannot map a {self.value_range} image to the signed range")
        return ImageTensor(self.data * 2.0 - 1.0, "signed")

    def to_unit(self) -> "ImageTensor":
        """Map a signed-range image to the unit range ((x + 1) / 2)"""
        if self.value_range == "unit":
            return self
        if self.value_range != "signed":
            raise ValueError(f"Cannot map a {self.value_range} image to the unit range")
        return ImageTensor((self.data + 1.0) / 2.0, "unit")

    def __repr__(self):
        return f"ImageTensor(shape={self.data.shape}, value_range={self.value_range!r})"


class ShadowMask:
    """H x W binary raster"""

    def __init__(self, data):
        array = np.asarray(data)
        if array.ndim == 3 and array.shape[2] == 1:
            array = array[:, :, 0]
        if array.ndim != 2:
            raise DimensionError(f"Expected an [H, W] mask, got shape {array.shape}")
        if array.dtype != bool:
            if not np.all((array == 0) | (array == 1)):
                raise ValueError("Mask values must be exactly 0 or 1")
            array = array.astype(bool)
        self.data = array

    @classmethod
    def empty(cls, height: int, width: int) -> "ShadowMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "ShadowMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def shape(self):
        return self.data.shape

    def is_empty(self) -> bool:
        return not self.data.any()

    def coverage(self) -> float:
        return float(self.data.mean())

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.data.astype(dtype)

    def __or__(self, other: "ShadowMask") -> "ShadowMask":
        return ShadowMask(self.data | other.data)

    def __and__(self, other: "ShadowMask") -> "ShadowMask":
        return ShadowMask(self.data & other.data)

    def __invert__(self) -> "ShadowMask":
        return ShadowMask(~self.data)

    def __repr__(self):
        return f"ShadowMask(shape={self.data.shape}, coverage={self.coverage():.3f})"


class GradientMap:
    """H x W non-negative gradient magnitudes, zero outside the generating mask"""

    def __init__(self, data):
        array = np.asarray(data)
        if array.ndim != 2:
            raise DimensionError(f"Expected an [H, W] gradient map, got shape {array.shape}")
        if array.size and array.min() < 0:
            raise ValueError("Gradient magnitudes must be non-negative")
        self.data = array

    @property
    def shape(self):
        return self.data.shape


def check_same_size(*rasters):
    """Raise DimensionError unless every raster shares H and W"""
    sizes = {tuple(r.shape[:2]) for r in rasters}
    if len(sizes) > 1:
        raise DimensionError(f"Raster sizes differ: {sorted(sizes)}")


def composite(base: ImageTensor, overlay: ImageTensor, mask: ShadowMask) -> ImageTensor:
    """Blend overlay into base where the mask is set (mask*overlay + (1-mask)*base)

    Args:
        base: Image kept where the mask is 0
        overlay: Image taken where the mask is 1
        mask: Binary selection mask

    Returns:
        ImageTensor: Pixel-exact composite in the range of the inputs

    Raises:
        DimensionError: If shapes or ranges do not agree
    """
    if base.shape != overlay.shape:
        raise DimensionError(f"Composite inputs differ: {base.shape} vs {overlay.shape}")
    if base.value_range != overlay.value_range:
        raise DimensionError(f"Composite ranges differ: {base.value_range} vs {overlay.value_range}")
    check_same_size(base, mask)
    data = np.where(mask.data[:, :, None], overlay.data, base.data)
    return ImageTensor(data, base.value_range)


def luminance(img: ImageTensor) -> np.ndarray:
    """Return the [H, W] luminance of an image (BT.601 weights for RGB)"""
    if img.channels == 1:
        return img.data[:, :, 0]
    weights = np.asarray(LUMA_WEIGHTS, dtype=img.data.dtype)
    return img.data @ weights


def rgb_to_lab(img: ImageTensor) -> ImageTensor:
    """Convert a unit-range sRGB image to CIELAB (D65 white)

    Raises:
        ChannelError: If the image is not three-channel
    """
    if img.channels != 3:
        raise ChannelError(f"rgb_to_lab needs a 3-channel image, got {img.channels}")
    if img.value_range != "unit":
        raise ValueError("rgb_to_lab expects a unit-range image")
    lab = color.rgb2lab(img.data.astype(np.float64), illuminant=LAB_WHITE["ILLUMINANT"],
                        observer=LAB_WHITE["OBSERVER"])
    # black lands a hair below zero through the linear branch
    lab[:, :, 0] = np.clip(lab[:, :, 0], 0.0, 100.0)
    return ImageTensor(lab, "lab")


def gradient_map(img: ImageTensor, mask: ShadowMask) -> GradientMap:
    """Per-pixel gradient magnitude of the luminance inside a mask

    Central differences with replicate-padded borders.

    Args:
        img: Single- or three-channel image
        mask: Region in which gradients are kept

    Returns:
        GradientMap: Magnitudes, zero outside the mask
    """
    check_same_size(img, mask)
    lum = luminance(img).astype(np.float64)
    padded = np.pad(lum, 1, mode="edge")
    grad_x = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    grad_y = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    magnitude = np.hypot(grad_x, grad_y) * mask.data
    return GradientMap(magnitude.astype(np.float32))


def disc_element(radius: int) -> np.ndarray:
    """Boolean disc structuring element of the given radius"""
    offsets = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    return yy ** 2 + xx ** 2 <= radius ** 2


def dilate(mask: ShadowMask, radius: int) -> ShadowMask:
    """Morphological dilation with a disc of the given radius

    Raises:
        ValueError: If the radius is negative
    """
    if radius < 0:
        raise ValueError(f"Dilation radius must be non-negative, got {radius}")
    if radius == 0 or mask.is_empty():
        return ShadowMask(mask.data.copy())
    grown = ndimage.binary_dilation(mask.data, structure=disc_element(radius))
    return ShadowMask(grown)


def load_image(path: str) -> ImageTensor:
    """Load an 8-bit PNG as a unit-range image

    Raises:
        ImageFileError: If the file is missing or not 8 bits per channel
    """
    if not os.path.exists(path):
        raise ImageFileError(f"Image file not found: {path}")
    try:
        with Image.open(path) as raster:
            mode = raster.mode
            if mode not in ("L", "RGB", "RGBA", "P", "1"):
                raise ImageFileError(f"Unsupported bit depth / mode {mode} in {path}")
            if mode == "L":
                data = np.asarray(raster, dtype=np.uint8)[:, :, None]
            else:
                if mode == "RGBA" or "transparency" in raster.info:
                    logger.warning("Dropping the alpha channel of %s", path)
                data = np.asarray(raster.convert("RGB"), dtype=np.uint8)
    except ImageFileError:
        raise
    except Exception as e:
        raise ImageFileError(f"Cannot read image {path}: {e}") from e
    logger.debug("Loaded %s (%dx%d, mode %s)", path, data.shape[1], data.shape[0], mode)
    return ImageTensor(data.astype(np.float32) / 255.0, "unit")


def save_image(img: ImageTensor, path: str):
    """Save a unit-range image as an 8-bit PNG (RGB or grayscale)"""
    if img.value_range != "unit":
        raise ValueError(f"Only unit-range images can be saved, got {img.value_range}")
    quantized = np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.channels == 1:
        raster = Image.fromarray(quantized[:, :, 0], mode="L")
    else:
        raster = Image.fromarray(quantized, mode="RGB")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    raster.save(path, format="PNG")
    logger.debug("Saved %s", path)


def load_mask(path: str) -> ShadowMask:
    """Load an 8-bit grayscale mask (pixels >= 128 are set)"""
    img = load_image(path)
    gray = np.round(luminance(img) * 255.0)
    return ShadowMask(gray >= MASK_THRESHOLD)


def save_mask(mask: ShadowMask, path: str):
    """Save a mask as an 8-bit grayscale PNG (0 / 255)"""
    save_image(ImageTensor(mask.as_float(), "unit"), path)


def save_gradient(gradient: GradientMap, path: str, gain: Optional[float] = None):
    """Save a gradient map for inspection, scaled to its maximum unless a gain is given"""
    data = gradient.data.astype(np.float32)
    peak = float(data.max())
    if gain is None:
        gain = 1.0 / peak if peak > 0 else 1.0
    save_image(ImageTensor(np.clip(data * gain, 0.0, 1.0), "unit"), path)

