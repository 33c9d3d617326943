#!/usr/bin/env python3
"""
Evaluation metrics for the portrait shadow removal toolkit
SSIM, RMSE in CIELAB and the perceptual distance, reported per region
(all / shadow / non-shadow), plus directory evaluation and report output
"""

import os
import json
import glob
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from skimage.metrics import structural_similarity

from constants import SSIM, EVAL_REGIONS, EVAL_METRICS, DISPLAY_FORMATTING
from imaging import ImageTensor, ShadowMask, check_same_size, luminance, rgb_to_lab, load_image, load_mask
from se_net import perceptual_distance

logger = logging.getLogger(__name__)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two [H, W] arrays, Gaussian windows reflected at the borders

    Raises:
        ValueError: If a side is shorter than the SSIM window
    """
    if min(a.shape) < SSIM["WINDOW"]:
        raise ValueError(f"SSIM needs images of at least {SSIM['WINDOW']} pixels per side, got {a.shape}")
    _, values = structural_similarity(
        a.astype(np.float64), b.astype(np.float64),
        gaussian_weights=True, sigma=SSIM["SIGMA"], use_sample_covariance=False,
        data_range=SSIM["DATA_RANGE"], K1=SSIM["K1"], K2=SSIM["K2"], full=True
    )
    return values


def _region_pixels(region: Optional[ShadowMask], shape) -> np.ndarray:
    if region is None:
        return np.ones(shape[:2], dtype=bool)
    if region.is_empty():
        raise ValueError("Metric requested over an empty region")
    return region.data


def ssim(a: ImageTensor, b: ImageTensor, region: Optional[ShadowMask] = None) -> float:
    """Mean local luminance SSIM over pixels whose window centre lies in region"""
    if a.shape != b.shape:
        raise ValueError(f"Images differ in shape: {a.shape} vs {b.shape}")
    if region is not None:
        check_same_size(a, region)
    values = ssim_map(luminance(a), luminance(b))
    return float(values[_region_pixels(region, a.shape)].mean())


def lab_rmse(lab_a: np.ndarray, lab_b: np.ndarray, region: Optional[ShadowMask] = None) -> float:
    """RMSE pooled over the three LAB channels of the region pixels"""
    pixels = _region_pixels(region, lab_a.shape)
    diff = (np.asarray(lab_a, dtype=np.float64) - np.asarray(lab_b, dtype=np.float64))[pixels]
    return float(np.sqrt(np.mean(diff ** 2)))


def rmse_lab(a: ImageTensor, b: ImageTensor, region: Optional[ShadowMask] = None) -> float:
    """Root-mean-square error in CIELAB over region pixels and all three channels"""
    if a.shape != b.shape:
        raise ValueError(f"Images differ in shape: {a.shape} vs {b.shape}")
    if region is not None:
        check_same_size(a, region)
    return lab_rmse(rgb_to_lab(a).data, rgb_to_lab(b).data, region)


@dataclass
class EvalReport:
    """Region-wise metric triples; a region with no pixels maps to None"""
    regions: Dict[str, Optional[Dict[str, float]]] = field(default_factory=dict)
    pixel_counts: Dict[str, int] = field(default_factory=dict)
    count: int = 1

    def value(self, region: str, metric: str) -> Optional[float]:
        entry = self.regions.get(region)
        return None if entry is None else entry[metric]

    def to_dict(self) -> Dict:
        return {"regions": self.regions, "pixel_counts": self.pixel_counts, "count": self.count}


def evaluate_pair(result: ImageTensor, gt: ImageTensor, shadow_mask: ShadowMask) -> EvalReport:
    """All three metrics over the whole image, the shadow mask and its complement"""
    check_same_size(result, gt, shadow_mask)
    height, width = shadow_mask.shape
    masks = {
        "all": ShadowMask.full(height, width),
        "shadow": shadow_mask,
        "non_shadow": ~shadow_mask
    }
    ssim_values = ssim_map(luminance(result), luminance(gt))
    lab_result, lab_gt = rgb_to_lab(result).data, rgb_to_lab(gt).data
    report = EvalReport()
    for region in EVAL_REGIONS:
        mask = masks[region]
        report.pixel_counts[region] = int(mask.data.sum())
        if mask.is_empty():
            report.regions[region] = None
            continue
        report.regions[region] = {
            "ssim": float(ssim_values[mask.data].mean()),
            "perceptual": perceptual_distance(result, gt, None if region == "all" else mask),
            "rmse_lab": lab_rmse(lab_result, lab_gt, None if region == "all" else mask)
        }
    return report


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Per-region mean of each metric over the reports where the region is present"""
    if not reports:
        raise ValueError("No reports to aggregate")
    summary = EvalReport(count=sum(r.count for r in reports))
    for region in EVAL_REGIONS:
        present = [r.regions[region] for r in reports if r.regions.get(region) is not None]
        summary.pixel_counts[region] = sum(r.pixel_counts.get(region, 0) for r in reports)
        if not present:
            summary.regions[region] = None
            continue
        summary.regions[region] = {metric: float(np.mean([entry[metric] for entry in present]))
                                   for metric in EVAL_METRICS}
    return summary


def format_report_table(rows: Sequence[Tuple[str, EvalReport]], summary: Optional[EvalReport] = None) -> str:
    """Console table, one row per sample, columns grouped by region"""
    absent = DISPLAY_FORMATTING["ABSENT"]
    header_cells = [f"{region}:{metric}" for region in EVAL_REGIONS for metric in ("ssim", "perc", "rmse")]
    lines = [DISPLAY_FORMATTING["HEADER_LINE"],
             "sample".ljust(16) + " ".join(cell.rjust(10) for cell in header_cells),
             DISPLAY_FORMATTING["SEPARATOR_LINE"]]

    def format_row(name: str, report: EvalReport) -> str:
        cells = []
        for region in EVAL_REGIONS:
            for metric in EVAL_METRICS:
                value = report.value(region, metric)
                cells.append((absent if value is None else f"{value:.4f}").rjust(10))
        return name[:15].ljust(16) + " ".join(cells)

    for name, report in rows:
        lines.append(format_row(name, report))
    if summary is not None:
        lines.append(DISPLAY_FORMATTING["SEPARATOR_LINE"])
        lines.append(format_row(f"mean (n={summary.count})", summary))
    lines.append(DISPLAY_FORMATTING["HEADER_LINE"])
    return "\n".join(lines)


def write_report_jsonl(path: str, rows: Sequence[Tuple[str, EvalReport]], summary: Optional[EvalReport] = None):
    """One JSON record per sample, then the aggregate"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as report_file:
        for name, report in rows:
            report_file.write(json.dumps({"sample": name, **report.to_dict()}, sort_keys=True) + "\n")
        if summary is not None:
            report_file.write(json.dumps({"sample": "aggregate", **summary.to_dict()}, sort_keys=True) + "\n")
    logger.info("Wrote evaluation report to %s", path)


def evaluate_directories(result_dir: str, gt_dir: str, mask_dir: str) -> Tuple[List[Tuple[str, EvalReport]], EvalReport]:
    """Evaluate every result PNG against the same-named ground truth and mask

    Raises:
        FileNotFoundError: If the result directory holds no PNG files
        ImageFileError: If a matching ground truth or mask is missing
    """
    paths = sorted(glob.glob(os.path.join(result_dir, "*.png")))
    if not paths:
        raise FileNotFoundError(f"No result images in {result_dir}")
    rows = []
    for path in paths:
        name = os.path.basename(path)
        report = evaluate_pair(load_image(path), load_image(os.path.join(gt_dir, name)),
                               load_mask(os.path.join(mask_dir, name)))
        rows.append((os.path.splitext(name)[0], report))
        logger.debug("Evaluated %s", name)
    logger.info("Evaluated %d result images", len(rows))
    return rows, aggregate_reports([report for _, report in rows])
