#!/usr/bin/env python3
"""
Gradient-guided detail restoration diffusion model
Refines the coarse inpainting result inside the shadow region using the
gradients of the original shadowed input as guidance
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from constants import DETAIL
from imaging import ImageTensor, ShadowMask, GradientMap, composite, check_same_size, gradient_map
from model_state import ModelState
from diffusion_core import NoiseSchedule, TimestepPlan, schedule_from_config
from cond_unet import DiffusionTrainConfig, DiffusionTrainer, build_unet, timestep_batch
from inpaint_model import condition_stack, ddim_sample, as_signed_batch
from se_net import to_batch, from_batch

logger = logging.getLogger(__name__)


@dataclass
class DetailTrainConfig(DiffusionTrainConfig):
    """Diffusion training settings plus the random gain applied to the gradient condition"""
    gradient_gain_range: Tuple[float, float] = DETAIL["GRADIENT_GAIN_RANGE"]

    def __post_init__(self):
        super().__post_init__()
        self.gradient_gain_range = tuple(float(v) for v in self.gradient_gain_range)
        if len(self.gradient_gain_range) != 2:
            raise ValueError("gradient_gain_range needs two values")
        low, high = self.gradient_gain_range
        if not 0.0 < low <= high:
            raise ValueError(f"Invalid gradient gain range {self.gradient_gain_range}")

    def to_dict(self) -> Dict:
        data = super().to_dict()
        data["gradient_gain_range"] = list(self.gradient_gain_range)
        return data


def lowpass(data: np.ndarray, cutoff: float = DETAIL["LOWPASS_CUTOFF"]) -> np.ndarray:
    """Ideal radial low-pass of an [H, W, C] array (cutoff in cycles per pixel)

    The array is mirrored to [2H, 2W] before the FFT so nothing wraps across
    opposite borders. Still a projection: applying it twice gives the same
    result as once.
    """
    data = np.asarray(data, dtype=np.float64)
    height, width = data.shape[:2]
    mirrored = np.pad(data, ((0, height), (0, width), (0, 0)), mode="symmetric")
    fy = np.fft.fftfreq(2 * height)[:, None]
    fx = np.fft.rfftfreq(2 * width)[None, :]
    keep = np.hypot(fy, fx) <= cutoff
    spectrum = np.fft.rfft2(mirrored, axes=(0, 1))
    smooth = np.fft.irfft2(spectrum * keep[:, :, None], s=(2 * height, 2 * width), axes=(0, 1))
    return smooth[:height, :width]


def suppress_detail(img: ImageTensor, mask: ShadowMask, cutoff: float = DETAIL["LOWPASS_CUTOFF"]) -> ImageTensor:
    """Replace the masked region with a low-passed rendition, the simulated blurry inpainting result"""
    check_same_size(img, mask)
    smooth = np.clip(lowpass(img.data, cutoff), 0.0, 1.0).astype(img.data.dtype)
    return composite(img, ImageTensor(smooth, img.value_range), mask)


def detail_conditions(coarse: ImageTensor, G: GradientMap, M: ShadowMask, use_condition: bool = True,
                      dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[coarse (signed), gradient, mask] conditioning stack"""
    check_same_size(coarse, G, M)
    image = to_batch(coarse.to_signed(), dtype)
    guide = torch.from_numpy(np.asarray(G.data, dtype=np.float64))[None, None].to(dtype)
    mask = torch.from_numpy(M.as_float())[None, None].to(dtype)
    return condition_stack(image, guide, mask, use_condition)


def train_detail(dataset: Sequence, config: Optional[DetailTrainConfig] = None, seed: int = 0,
                 schedule: Optional[NoiseSchedule] = None, trainer: Optional[DiffusionTrainer] = None) -> ModelState:
    """Train the detail model on the SE-Net paired dataset

    The target is the clean portrait; the conditions are its detail-suppressed
    version inside the sample mask, the clean gradients inside the mask (scaled
    by a random gain drawn from gradient_gain_range), and the mask.

    Raises:
        ValueError: If the dataset is empty
    """
    config = config or DetailTrainConfig()
    if not dataset:
        raise ValueError("Cannot train the detail model on an empty dataset")
    low, high = getattr(config, "gradient_gain_range", DETAIL["GRADIENT_GAIN_RANGE"])
    schedule = schedule or schedule_from_config(None)
    trainer = trainer or DiffusionTrainer("detail", config, schedule, seed)

    clean = np.stack([sample.clean.data.transpose(2, 0, 1) for sample in dataset]).astype(np.float32)
    coarse = np.stack([suppress_detail(sample.clean, sample.mask).data.transpose(2, 0, 1)
                       for sample in dataset]).astype(np.float32)
    gradients = np.stack([gradient_map(sample.clean, sample.mask).data for sample in dataset])[:, None]
    masks = np.stack([sample.mask.as_float() for sample in dataset])[:, None]
    coarse_t = torch.from_numpy(coarse) * 2.0 - 1.0
    gradients_t = torch.from_numpy(gradients.astype(np.float32))
    masks_t = torch.from_numpy(masks)
    gain_generator = torch.Generator().manual_seed(int(seed) + 1)

    def make_conditions(index: torch.Tensor, step: int) -> torch.Tensor:
        gain = low + (high - low) * torch.rand((len(index), 1, 1, 1), generator=gain_generator)
        return condition_stack(coarse_t[index], gradients_t[index] * gain, masks_t[index], config.use_condition)

    return trainer.fit(torch.from_numpy(clean) * 2.0 - 1.0, make_conditions)


def eps_forward_detail(state: ModelState, x_t: Union[ImageTensor, torch.Tensor], coarse: ImageTensor,
                       G: GradientMap, M: ShadowMask, t: int, use_ema: bool = True) -> torch.Tensor:
    """Noise prediction of the detail network, [1, 3, H, W]"""
    schedule = schedule_from_config(state.config["schedule"])
    schedule.check_timestep(t)
    net = build_unet(state, use_ema)
    dtype = next(net.parameters()).dtype
    conditions = detail_conditions(coarse, G, M, state.config["train"].get("use_condition", True), dtype)
    x = as_signed_batch(x_t, dtype)
    with torch.no_grad():
        return net(torch.cat([x, conditions], dim=1), timestep_batch(t, x.shape[0]))


def sample_detail(state: ModelState, coarse: ImageTensor, I_in: ImageTensor, M: ShadowMask, plan: TimestepPlan,
                  seed: int = 0, schedule: Optional[NoiseSchedule] = None) -> ImageTensor:
    """Restore fine detail inside M guided by the gradients of the original input

    Args:
        state: Trained detail state (EMA weights are used)
        coarse: Coarse shadow-free result
        I_in: Original shadowed input; its gradients inside M guide the model
        M: Region to refine
        plan: DDIM timestep plan
        seed: Seed of the starting noise

    Returns:
        ImageTensor: Refined image, equal to coarse outside M

    Raises:
        UntrainedModelError: If the state has never been trained
    """
    check_same_size(coarse, I_in, M)
    if M.is_empty():
        return coarse.copy()
    state.require_trained()
    schedule = schedule or schedule_from_config(state.config["schedule"])
    net = build_unet(state, use_ema=True)
    dtype = next(net.parameters()).dtype
    G = gradient_map(I_in, M)
    conditions = detail_conditions(coarse, G, M, state.config["train"].get("use_condition", True), dtype)
    sample = from_batch(ddim_sample(net, conditions, plan, schedule, seed))
    return composite(coarse, sample, M)
