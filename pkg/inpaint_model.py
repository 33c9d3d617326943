#!/usr/bin/env python3
"""
Structure-guided portrait inpainting diffusion model
Random training masks, masked-reconstruction training and DDIM sampling
conditioned on the masked image, the SE-Net structure map and the mask
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from constants import TRAINING_MASK_COVERAGE, TRAINING_MASK_MIN_COMPONENT
from imaging import ImageTensor, ShadowMask, composite, check_same_size
from model_state import ModelState, MissingCheckpointError
from diffusion_core import NoiseSchedule, TimestepPlan, TimestepError, schedule_from_config, run_ddim_chain
from cond_unet import DiffusionTrainConfig, DiffusionTrainer, CondUNet, build_unet, predict_noise_fn, timestep_batch
from se_net import build_senet, check_senet_shape, to_batch, from_batch

logger = logging.getLogger(__name__)

MAX_MASK_ATTEMPTS = 200


def _largest_component(mask: np.ndarray) -> int:
    labels, count = ndimage.label(mask)
    if count == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def _draw_shapes(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(1, 5))):
        kind = int(rng.integers(0, 3))
        if kind == 0:
            h, w = rng.uniform(0.15, 0.5) * height, rng.uniform(0.15, 0.5) * width
            top, left = rng.uniform(0, height - h), rng.uniform(0, width - w)
            draw.rectangle([left, top, left + w, top + h], fill=255)
        elif kind == 1:
            ry, rx = rng.uniform(0.08, 0.25) * height, rng.uniform(0.08, 0.25) * width
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
        else:
            stroke = max(2, int(rng.uniform(0.06, 0.14) * min(height, width)))
            points = [(rng.uniform(0, width), rng.uniform(0, height))]
            for _vertex in range(int(rng.integers(2, 6))):
                angle = rng.uniform(0.0, 2.0 * np.pi)
                length = rng.uniform(0.1, 0.3) * min(height, width)
                x, y = points[-1]
                points.append((float(np.clip(x + length * np.cos(angle), 0, width - 1)),
                               float(np.clip(y + length * np.sin(angle), 0, height - 1))))
            draw.line(points, fill=255, width=stroke, joint="curve")
    return np.asarray(canvas) > 0


def random_training_mask(seed: int, height: int, width: int) -> ShadowMask:
    """Union of 1-4 rectangles, ellipses and brush strokes covering 10-50% of the image

    Draws are repeated until coverage and the minimum component area hold;
    the result depends on the seed only.
    """
    rng = np.random.default_rng(seed)
    low, high = TRAINING_MASK_COVERAGE
    for _attempt in range(MAX_MASK_ATTEMPTS):
        mask = _draw_shapes(rng, height, width)
        if low <= mask.mean() <= high and _largest_component(mask) >= TRAINING_MASK_MIN_COMPONENT:
            return ShadowMask(mask)
    logger.warning("No valid random mask after %d draws (seed %d); using a centered block", MAX_MASK_ATTEMPTS, seed)
    mask = np.zeros((height, width), dtype=bool)
    mask[height // 4: height - height // 4, width // 4: width - width // 4] = True
    return ShadowMask(mask)


def condition_stack(image: torch.Tensor, guide: torch.Tensor, mask: torch.Tensor, use_condition: bool = True) -> torch.Tensor:
    """[image (signed), guide, mask] conditioning channels; the guide is zeroed when unused"""
    if not use_condition:
        guide = torch.zeros_like(guide)
    return torch.cat([image, guide, mask], dim=1)


def masked_input(x0_unit: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """I_M = (1 - M) * I in unit range, returned in the signed range"""
    return ((1.0 - mask) * x0_unit) * 2.0 - 1.0


def structure_maps(senet_state: ModelState, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Frozen EMA SE-Net applied to [N, 3, H, W] unit-range images"""
    check_senet_shape(images.shape[2], images.shape[3])
    net = build_senet(senet_state, use_ema=True)
    dtype = next(net.parameters()).dtype
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outputs.append(net(images[start:start + batch_size].to(dtype)).clamp(0.0, 1.0))
    return torch.cat(outputs)


def _stack_images(images: Sequence[ImageTensor]) -> torch.Tensor:
    return torch.from_numpy(np.stack([img.to_unit().data.transpose(2, 0, 1) for img in images]).astype(np.float32))


def train_inpaint(clean_images: Sequence[ImageTensor], config: Optional[DiffusionTrainConfig] = None, seed: int = 0,
                  senet_state: Optional[ModelState] = None, schedule: Optional[NoiseSchedule] = None,
                  trainer: Optional[DiffusionTrainer] = None) -> ModelState:
    """Train the inpainting model by masked reconstruction of clean portraits

    Args:
        clean_images: Unit-range RGB portraits
        config: Training and architecture settings
        seed: Seed for weights, batches, masks, timesteps and noise
        senet_state: Frozen SE-Net producing the structure condition
        schedule: Noise schedule (default schedule when omitted)
        trainer: Pre-built trainer, used by tests to inspect losses

    Returns:
        ModelState: Final inpainting state

    Raises:
        MissingCheckpointError: If structure guidance is on and no SE-Net state is given
        ValueError: If the dataset is empty
    """
    config = config or DiffusionTrainConfig()
    if not clean_images:
        raise ValueError("Cannot train the inpainting model on an empty dataset")
    if config.use_condition and senet_state is None:
        raise MissingCheckpointError("Inpainting training needs a trained SE-Net checkpoint")
    schedule = schedule or schedule_from_config(None)
    trainer = trainer or DiffusionTrainer("inpaint", config, schedule, seed)

    clean = _stack_images(clean_images)
    height, width = clean.shape[2], clean.shape[3]
    if config.use_condition:
        structure = structure_maps(senet_state, clean).float()
    else:
        structure = torch.zeros((clean.shape[0], 1, height, width))
    x0 = clean * 2.0 - 1.0
    mask_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))

    def make_conditions(index: torch.Tensor, step: int) -> torch.Tensor:
        masks = np.stack([random_training_mask(int(s), height, width).as_float()
                          for s in mask_rng.integers(0, 2 ** 31, size=len(index))])
        mask = torch.from_numpy(masks)[:, None]
        return condition_stack(masked_input(clean[index], mask), structure[index] * 2.0 - 1.0, mask,
                               config.use_condition)

    return trainer.fit(x0, make_conditions)


def as_signed_batch(x_t: Union[ImageTensor, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x_t, ImageTensor):
        return to_batch(x_t.to_signed(), dtype)
    return x_t.to(dtype)


def inpaint_conditions(I_M: ImageTensor, S: ImageTensor, M: ShadowMask, use_condition: bool = True,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Conditioning stack from an already masked image I_M (unit range), structure S and mask M"""
    check_same_size(I_M, S, M)
    mask = torch.from_numpy(M.as_float())[None, None].to(dtype)
    image = to_batch(I_M.to_unit(), dtype) * 2.0 - 1.0
    guide = to_batch(S, dtype) * 2.0 - 1.0
    return condition_stack(image, guide, mask, use_condition)


def eps_forward(state: ModelState, x_t: Union[ImageTensor, torch.Tensor], I_M: ImageTensor, S: ImageTensor,
                M: ShadowMask, t: int, use_ema: bool = True) -> torch.Tensor:
    """Noise prediction of the inpainting network

    Args:
        state: Inpainting model state
        x_t: Noisy image, signed ImageTensor or [1, 3, H, W] tensor
        I_M: Masked unit-range image (1 - M) * I
        S: Single-channel unit-range structure map
        M: Inpainting mask
        t: Timestep in [0, T)

    Returns:
        torch.Tensor: [1, 3, H, W] predicted noise

    Raises:
        TimestepError: If t is outside the schedule
    """
    schedule = schedule_from_config(state.config["schedule"])
    schedule.check_timestep(t)
    net = build_unet(state, use_ema)
    dtype = next(net.parameters()).dtype
    conditions = inpaint_conditions(I_M, S, M, state.config["train"].get("use_condition", True), dtype)
    x = as_signed_batch(x_t, dtype)
    if x.shape[2:] != conditions.shape[2:]:
        raise ValueError(f"x_t size {tuple(x.shape[2:])} differs from the conditions {tuple(conditions.shape[2:])}")
    with torch.no_grad():
        return net(torch.cat([x, conditions], dim=1), timestep_batch(t, x.shape[0]))


def ddim_sample(net: CondUNet, conditions: torch.Tensor, plan: TimestepPlan, schedule: NoiseSchedule,
                seed: int) -> torch.Tensor:
    """Deterministic chain from seeded noise; returns the unit-range x0 estimate"""
    if plan.T != schedule.T:
        raise TimestepError(f"Plan built for T={plan.T} but the schedule has T={schedule.T}")
    dtype = conditions.dtype
    shape = (conditions.shape[0], 3, conditions.shape[2], conditions.shape[3])
    generator = torch.Generator().manual_seed(int(seed))
    x_T = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    x0 = run_ddim_chain(x_T, predict_noise_fn(net, conditions), plan, schedule)
    return (x0.clamp(-1.0, 1.0) + 1.0) / 2.0


def sample_inpaint(state: ModelState, I_in: ImageTensor, M: ShadowMask, S: ImageTensor, plan: TimestepPlan,
                   seed: int = 0, schedule: Optional[NoiseSchedule] = None) -> ImageTensor:
    """Fill the masked region of I_in guided by the structure map S

    Args:
        state: Trained inpainting state (EMA weights are used)
        I_in: Unit-range RGB input
        M: Region to regenerate
        S: Structure map of the (shadowed) input
        plan: DDIM timestep plan
        seed: Seed of the starting noise
        schedule: Noise schedule; defaults to the one stored in the state

    Returns:
        ImageTensor: M * sample + (1 - M) * I_in, unit range

    Raises:
        UntrainedModelError: If the state has never been trained
    """
    check_same_size(I_in, M, S)
    if M.is_empty():
        return I_in.copy()
    state.require_trained()
    schedule = schedule or schedule_from_config(state.config["schedule"])
    net = build_unet(state, use_ema=True)
    dtype = next(net.parameters()).dtype
    I_M = composite(I_in.to_unit(), ImageTensor(np.zeros_like(I_in.data), "unit"), M)
    conditions = inpaint_conditions(I_M, S, M, state.config["train"].get("use_condition", True), dtype)
    sample = from_batch(ddim_sample(net, conditions, plan, schedule, seed))
    logger.debug("Inpainted %.1f%% of the image in %d steps", 100.0 * M.coverage(), len(plan))
    return composite(I_in, sample, M)
