#!/usr/bin/env python3
"""
Pipeline orchestration for the portrait shadow removal toolkit
Configuration file handling, training stages, evaluation pair synthesis and
the inference pipeline: structure map, inpainting, mask refinement, detail
restoration
"""

import os
import glob
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from constants import (
    CONFIG_FILE, IMAGE_SIZES, SCHEDULE, SAMPLER_STEPS, MASK_DILATION_RADIUS,
    INTERMEDIATE_FILES
)
from imaging import (
    ImageTensor, ShadowMask, dilate, gradient_map, load_image, load_mask,
    save_image, save_mask, save_gradient
)
from model_state import ModelState, save_checkpoint, load_checkpoint
from diffusion_core import NoiseSchedule, make_timestep_plan, schedule_from_config
from toyface_data import (
    SYNTHESIS_STRATEGIES, build_senet_dataset, generate_toy_portrait, random_facial_mask,
    load_portrait_directory, sample_seeds, synth_shadow, write_dataset
)
from se_net import SENetConfig, SENetTrainer, build_senet, senet_forward
from cond_unet import DiffusionTrainConfig, build_unet
from inpaint_model import train_inpaint, sample_inpaint
from detail_model import DetailTrainConfig, train_detail, sample_detail
from mask_refine import refine_mask, composite_update

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Exception raised for a missing, unreadable or invalid configuration file."""
    pass


DEFAULT_SECTIONS = {
    "data": {
        "n_samples": 2000,
        "image_size": 64,
        "strategy": "relight",
        "eval_pairs": 25,
        "workers": 1,
        "portraits_dir": None,
        "face_box": None
    },
    "schedule": {
        "T": SCHEDULE["T"],
        "beta_min": SCHEDULE["BETA_MIN"],
        "beta_max": SCHEDULE["BETA_MAX"]
    },
    "sampler": {
        "inpaint_steps": SAMPLER_STEPS,
        "detail_steps": SAMPLER_STEPS
    },
    "pipeline": {
        "dilation_radius": MASK_DILATION_RADIUS,
        "skip_detail": False,
        "save_intermediates": True
    },
    "paths": {
        "data_dir": "data",
        "output_dir": "outputs",
        "senet_checkpoint": "checkpoints/senet.pt",
        "discriminator_checkpoint": "checkpoints/discriminator.pt",
        "inpaint_checkpoint": "checkpoints/inpaint.pt",
        "detail_checkpoint": "checkpoints/detail.pt"
    },
    "seeds": {
        "data": 0,
        "senet": 1,
        "inpaint": 2,
        "detail": 3,
        "sample": 4
    }
}


def _merge_section(name: str, values: Optional[Dict]) -> Dict:
    defaults = DEFAULT_SECTIONS[name]
    values = values or {}
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(values)
    return merged


@dataclass
class PipelineConfig:
    """Every setting of the toolkit, one attribute per configuration file section"""
    data: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["data"]))
    schedule: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["schedule"]))
    sampler: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["sampler"]))
    senet: SENetConfig = field(default_factory=SENetConfig)
    inpaint: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    detail: DetailTrainConfig = field(default_factory=DetailTrainConfig)
    pipeline: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["pipeline"]))
    paths: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["paths"]))
    seeds: Dict = field(default_factory=lambda: dict(DEFAULT_SECTIONS["seeds"]))

    def validate(self):
        """Raise ConfigError on values no stage can run with"""
        if self.data["image_size"] not in IMAGE_SIZES:
            raise ConfigError(f"data.image_size must be one of {IMAGE_SIZES}")
        if self.data["strategy"] not in SYNTHESIS_STRATEGIES:
            raise ConfigError(f"data.strategy must be one of {SYNTHESIS_STRATEGIES}")
        if self.data["n_samples"] < 1 or self.data["eval_pairs"] < 0:
            raise ConfigError("data.n_samples must be >= 1 and data.eval_pairs >= 0")
        face_box = self.data["face_box"]
        if face_box is not None:
            if len(face_box) != 4 or not all(isinstance(v, int) for v in face_box):
                raise ConfigError("data.face_box must be four integers (top, left, bottom, right)")
            top, left, bottom, right = face_box
            size = self.data["image_size"]
            if not (0 <= top < bottom <= size and 0 <= left < right <= size):
                raise ConfigError(f"data.face_box {face_box} does not fit a {size}x{size} image")
        for key in ("inpaint_steps", "detail_steps"):
            steps = self.sampler[key]
            if not 1 <= steps <= self.schedule["T"]:
                raise ConfigError(f"sampler.{key} must lie in [1, {self.schedule['T']}], got {steps}")
        if self.pipeline["dilation_radius"] < 0:
            raise ConfigError("pipeline.dilation_radius must be non-negative")
        try:
            self.noise_schedule()
        except ValueError as e:
            raise ConfigError(f"Invalid schedule: {e}") from e

    def noise_schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.schedule)

    def to_dict(self) -> Dict:
        return {
            "data": dict(self.data),
            "schedule": dict(self.schedule),
            "sampler": dict(self.sampler),
            "senet": self.senet.to_dict(),
            "inpaint": self.inpaint.to_dict(),
            "detail": self.detail.to_dict(),
            "pipeline": dict(self.pipeline),
            "paths": dict(self.paths),
            "seeds": dict(self.seeds)
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PipelineConfig":
        """Build a config from parsed sections; missing keys take their defaults

        Raises:
            ConfigError: On unknown sections or keys, or invalid values
        """
        sections = {"data", "schedule", "sampler", "senet", "inpaint", "detail", "pipeline", "paths", "seeds"}
        unknown = set(data) - sections
        if unknown:
            raise ConfigError(f"Unknown configuration sections: {sorted(unknown)}")
        try:
            config = cls(
                data=_merge_section("data", data.get("data")),
                schedule=_merge_section("schedule", data.get("schedule")),
                sampler=_merge_section("sampler", data.get("sampler")),
                senet=SENetConfig.from_dict(data.get("senet", {})),
                inpaint=DiffusionTrainConfig.from_dict(data.get("inpaint", {})),
                detail=DetailTrainConfig.from_dict(data.get("detail", {})),
                pipeline=_merge_section("pipeline", data.get("pipeline")),
                paths=_merge_section("paths", data.get("paths")),
                seeds=_merge_section("seeds", data.get("seeds"))
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        config.validate()
        return config


def load_config(path: str = CONFIG_FILE) -> PipelineConfig:
    """Load the JSON configuration file

    Raises:
        ConfigError: If the file is missing, is not valid JSON or holds invalid settings
    """
    if not os.path.exists(path):
        raise ConfigError(f"Configuration file '{path}' not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Error loading configuration file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object of sections")
    config = PipelineConfig.from_dict(data)
    logger.info("Loaded configuration from %s", path)
    return config


def save_config(config: PipelineConfig, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("Saved configuration to %s", path)


def synthesize_eval_pairs(n: int, seed: int, size: int, out_dir: str) -> str:
    """Write shadowed inputs, ground truths and shadow masks for evaluation

    Layout: <out_dir>/{input,gt,mask}/<index>.png, shadows darken by 0.3-0.7
    with boundary softness 0-2 px.
    """
    for sub in ("input", "gt", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for index in range(n):
        portrait_seed, shadow_seed, mask_seed = sample_seeds(seed, index)
        portrait = generate_toy_portrait(portrait_seed, size)
        mask = random_facial_mask(portrait, mask_seed)
        rng = np.random.default_rng(shadow_seed)
        shadowed = synth_shadow(portrait, mask, rng.uniform(0.3, 0.7), rng.uniform(0.0, 2.0))
        name = f"{index:05d}.png"
        save_image(shadowed, os.path.join(out_dir, "input", name))
        save_image(portrait.image, os.path.join(out_dir, "gt", name))
        save_mask(mask, os.path.join(out_dir, "mask", name))
    logger.info("Wrote %d evaluation pairs to %s", n, out_dir)
    return out_dir


def synthesize_data(config: PipelineConfig, out_dir: str, seed: int, n: Optional[int] = None,
                    strategy: Optional[str] = None, portraits_dir: Optional[str] = None) -> str:
    """Write the SE-Net training split and the evaluation pairs under out_dir

    Portraits come from portraits_dir (or data.portraits_dir) when set and are
    generated procedurally otherwise.
    """
    portraits_dir = portraits_dir or config.data["portraits_dir"]
    portraits = None
    if portraits_dir:
        face_box = tuple(config.data["face_box"]) if config.data["face_box"] else None
        portraits = load_portrait_directory(portraits_dir, face_box)
    samples = build_senet_dataset(n or config.data["n_samples"], seed, config.data["image_size"],
                                  strategy or config.data["strategy"], config.data["workers"], portraits)
    write_dataset(samples, out_dir, "train")
    if config.data["eval_pairs"]:
        # held-out seeds: the evaluation stream is offset from the training one
        synthesize_eval_pairs(config.data["eval_pairs"], seed + 1_000_003, config.data["image_size"],
                              os.path.join(out_dir, "eval"))
    return out_dir


def train_senet_stage(config: PipelineConfig, samples, seed: int) -> Tuple[ModelState, ModelState]:
    """Train SE-Net and save both it and its discriminator"""
    trainer = SENetTrainer(config.senet, seed)
    state = trainer.fit(samples)
    save_checkpoint(state, config.paths["senet_checkpoint"])
    save_checkpoint(trainer.discriminator_state, config.paths["discriminator_checkpoint"])
    return state, trainer.discriminator_state


def train_inpaint_stage(config: PipelineConfig, samples, seed: int) -> ModelState:
    """Train the inpainting model on the clean portraits of the dataset"""
    senet_state = None
    if config.inpaint.use_condition:
        senet_state = load_checkpoint(config.paths["senet_checkpoint"], expected_kind="senet")
    state = train_inpaint([sample.clean for sample in samples], config.inpaint, seed, senet_state,
                          config.noise_schedule())
    save_checkpoint(state, config.paths["inpaint_checkpoint"])
    return state


def train_detail_stage(config: PipelineConfig, samples, seed: int) -> ModelState:
    state = train_detail(samples, config.detail, seed, config.noise_schedule())
    save_checkpoint(state, config.paths["detail_checkpoint"])
    return state


class InferenceResult:
    """Pipeline output with the intermediates of every stage"""

    def __init__(self, result: ImageTensor, refined_mask: ShadowMask, intermediates: Dict):
        self.result = result
        self.refined_mask = refined_mask
        self.intermediates = intermediates

    def save(self, out_dir: str, result_name: str = INTERMEDIATE_FILES["result"]):
        """Persist the result and every available intermediate with their fixed names"""
        os.makedirs(out_dir, exist_ok=True)
        for key, value in self.intermediates.items():
            path = os.path.join(out_dir, INTERMEDIATE_FILES[key])
            if isinstance(value, ShadowMask):
                save_mask(value, path)
            elif isinstance(value, ImageTensor):
                save_image(value, path)
            else:
                save_gradient(value, path)
        save_image(self.result, os.path.join(out_dir, result_name))


class ShadowRemovalPipeline:
    """Inference manager holding the trained SE-Net, inpainting and detail models"""

    def __init__(self, config: PipelineConfig, senet_state: ModelState, inpaint_state: ModelState,
                 detail_state: Optional[ModelState] = None):
        self.config = config
        self.senet_state = senet_state
        self.inpaint_state = inpaint_state
        self.detail_state = detail_state
        self.inpaint_plan = make_timestep_plan(self._schedule(inpaint_state).T, config.sampler["inpaint_steps"])
        self.detail_plan = None
        if detail_state is not None:
            self.detail_plan = make_timestep_plan(self._schedule(detail_state).T, config.sampler["detail_steps"])

    @staticmethod
    def _schedule(state: ModelState) -> NoiseSchedule:
        return schedule_from_config(state.config["schedule"])

    @classmethod
    def from_checkpoints(cls, config: PipelineConfig, skip_detail: bool = False) -> "ShadowRemovalPipeline":
        """Load every checkpoint named in config.paths

        Raises:
            MissingCheckpointError: Naming the first checkpoint that does not exist
            CheckpointError: If a stored network does not match its recorded configuration
        """
        senet_state = load_checkpoint(config.paths["senet_checkpoint"], expected_kind="senet")
        inpaint_state = load_checkpoint(config.paths["inpaint_checkpoint"], expected_kind="inpaint")
        detail_state = None
        if not skip_detail:
            detail_state = load_checkpoint(config.paths["detail_checkpoint"], expected_kind="detail")
        for state in (senet_state, inpaint_state, detail_state):
            if state is not None:
                (build_senet if state.kind == "senet" else build_unet)(state)
        return cls(config, senet_state, inpaint_state, detail_state)

    def infer(self, I_in: ImageTensor, M_user: ShadowMask, seed: Optional[int] = None,
              skip_detail: Optional[bool] = None) -> InferenceResult:
        """Remove the shadow indicated by a user mask

        Args:
            I_in: Unit-range RGB portrait
            M_user: Rough shadow mask
            seed: Sampling seed (config seeds.sample when omitted)
            skip_detail: Stop after the refined-mask composite

        Returns:
            InferenceResult: Result equal to I_in outside the refined mask
        """
        seed = self.config.seeds["sample"] if seed is None else seed
        if skip_detail is None:
            skip_detail = self.config.pipeline["skip_detail"]
        if M_user.is_empty():
            logger.warning("Empty shadow mask; returning the input unchanged")
            return InferenceResult(I_in.copy(), ShadowMask.empty(I_in.height, I_in.width), {})

        structure = senet_forward(self.senet_state, I_in)
        dilated = dilate(M_user, self.config.pipeline["dilation_radius"])
        coarse = sample_inpaint(self.inpaint_state, I_in, dilated, structure, self.inpaint_plan, seed)
        refined = refine_mask(I_in, coarse)
        updated = composite_update(I_in, coarse, refined)
        gradient = gradient_map(I_in, refined)
        intermediates = {
            "structure": structure,
            "dilated_mask": dilated,
            "coarse": coarse,
            "refined_mask": refined,
            "updated": updated,
            "gradient": gradient
        }
        logger.info("Refined mask covers %.1f%% (dilated %.1f%%)", 100 * refined.coverage(), 100 * dilated.coverage())

        if skip_detail or self.detail_state is None:
            if not skip_detail:
                logger.warning("No detail model loaded; skipping detail restoration")
            return InferenceResult(updated, refined, intermediates)
        result = sample_detail(self.detail_state, updated, I_in, refined, self.detail_plan, seed + 1)
        return InferenceResult(result, refined, intermediates)

    def infer_directory(self, input_dir: str, mask_dir: str, out_dir: str, seed: Optional[int] = None,
                        skip_detail: Optional[bool] = None) -> List[str]:
        """Run infer on every PNG of input_dir with the same-named mask; results go to out_dir/<name>.png"""
        paths = sorted(glob.glob(os.path.join(input_dir, "*.png")))
        if not paths:
            raise FileNotFoundError(f"No input images in {input_dir}")
        written = []
        for path in paths:
            name = os.path.basename(path)
            output = self.infer(load_image(path), load_mask(os.path.join(mask_dir, name)), seed, skip_detail)
            if self.config.pipeline["save_intermediates"]:
                output.save(os.path.join(out_dir, "intermediates", os.path.splitext(name)[0]))
            result_path = os.path.join(out_dir, name)
            save_image(output.result, result_path)
            written.append(result_path)
            logger.info("Processed %s", name)
        return written
