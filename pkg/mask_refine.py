#!/usr/bin/env python3
"""
Shadow mask refinement
Otsu thresholding of the input/result difference and the composite that
restores the non-shadow pixels of the input
"""

import logging
from collections import namedtuple
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from imaging import ImageTensor, ShadowMask, composite, check_same_size, DimensionError

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 256

OtsuResult = namedtuple("OtsuResult", ["threshold", "degenerate"])


def between_class_variance(hist: Sequence[int], k: int) -> Fraction:
    """Exact between-class variance (up to the constant 1/N^2) for classes [0, k] and (k, 255]"""
    counts = [int(c) for c in hist]
    n0 = sum(counts[:k + 1])
    n1 = sum(counts[k + 1:])
    if n0 == 0 or n1 == 0:
        return Fraction(0)
    s0 = sum(i * c for i, c in enumerate(counts[:k + 1]))
    s1 = sum((i + k + 1) * c for i, c in enumerate(counts[k + 1:]))
    return Fraction((n1 * s0 - n0 * s1) ** 2, n0 * n1)


def otsu_from_histogram(hist: Sequence[int]) -> OtsuResult:
    """Smallest k maximizing the between-class variance of a 256-bin histogram

    Uses running integer sums; comparisons are exact. A histogram with a
    single occupied bin is degenerate and yields (0, True).
    """
    counts = [int(c) for c in hist]
    if len(counts) != HISTOGRAM_BINS:
        raise ValueError(f"Expected {HISTOGRAM_BINS} histogram bins, got {len(counts)}")
    if min(counts) < 0:
        raise ValueError("Histogram counts must be non-negative")
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))

    best_num, best_den, best_k = 0, 1, 0
    n0 = s0 = 0
    for k in range(HISTOGRAM_BINS):
        n0 += counts[k]
        s0 += k * counts[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n1 * s0 - n0 * (total_sum - s0)) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_k = num, den, k
    if best_num == 0:
        return OtsuResult(0, True)
    return OtsuResult(best_k, False)


def histogram(gray: np.ndarray) -> np.ndarray:
    """256-bin histogram of unit-range values (bin = round(255 v))"""
    bins = np.clip(np.round(np.asarray(gray, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)
    return np.bincount(bins.ravel(), minlength=HISTOGRAM_BINS)


def otsu_threshold(gray: Union[ImageTensor, np.ndarray]) -> OtsuResult:
    """Otsu threshold of a single-channel unit-range image

    Returns:
        OtsuResult: (threshold in [0, 255], degenerate flag)
    """
    if isinstance(gray, ImageTensor):
        if gray.channels != 1:
            raise ValueError(f"Otsu thresholding needs a single-channel image, got {gray.channels}")
        gray = gray.data[:, :, 0]
    return otsu_from_histogram(histogram(gray))


def difference_map(I_in: ImageTensor, I_removed: ImageTensor) -> np.ndarray:
    """Per-pixel mean over channels of |I_in - I_removed|"""
    if I_in.shape != I_removed.shape:
        raise DimensionError(f"Images differ in shape: {I_in.shape} vs {I_removed.shape}")
    diff = np.abs(I_in.data.astype(np.float64) - I_removed.data.astype(np.float64))
    return diff.mean(axis=2)


def refine_mask(I_in: ImageTensor, I_removed: ImageTensor) -> ShadowMask:
    """Shadow mask recovered from the change the removal made

    Pixels whose difference exceeds the Otsu threshold / 255; a degenerate
    histogram gives the empty mask.
    """
    d = difference_map(I_in, I_removed)
    threshold, degenerate = otsu_threshold(d)
    if degenerate:
        logger.warning("Degenerate difference histogram; refined mask is empty")
        return ShadowMask.empty(*d.shape)
    refined = ShadowMask(d > threshold / 255.0)
    logger.debug("Otsu threshold %d, refined coverage %.3f", threshold, refined.coverage())
    return refined


def composite_update(I_in: ImageTensor, I_removed: ImageTensor, refined: ShadowMask) -> ImageTensor:
    """refined * I_removed + (1 - refined) * I_in"""
    check_same_size(I_in, refined)
    return composite(I_in, I_removed, refined)
