#!/usr/bin/env python3
"""
Constants for the portrait shadow removal toolkit
Contains all constant values and configuration defaults used throughout the application
"""

# Configuration and log files
CONFIG_FILE = "shadow_config.json"
LOG_FILE = "shadow_removal.log"

# Supported raster sizes for the toy portrait generator
IMAGE_SIZES = (64, 128, 256)
MIN_IMAGE_SIDE = 8
VALUE_RANGES = ("unit", "signed", "lab")
RANGE_TOLERANCE = 1e-6

# ITU-R BT.601 luminance weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# CIELAB reference white
LAB_WHITE = {
    "ILLUMINANT": "D65",
    "OBSERVER": "2"
}

# Masks are stored as 8-bit grayscale and thresholded on load
MASK_THRESHOLD = 128

# Region labels of a toy portrait
REGIONS = {
    "BACKGROUND": 0,
    "SKIN": 1,
    "EYES": 2,
    "BROWS": 3,
    "MOUTH": 4,
    "MOLE": 5
}

# Sampling ranges for random lights
LIGHT_RANGES = {
    "AMBIENT": (0.1, 0.9),
    "INTENSITY": (0.2, 1.5)
}

# Facial mask coverage bounds (fraction of face pixels)
FACIAL_MASK_COVERAGE = (0.10, 0.60)

# Face box for real portraits without one, as (top, left, bottom, right) fractions of the side
REAL_FACE_BOX = (0.125, 0.2, 0.875, 0.8)

# Training mask coverage bounds (fraction of all pixels)
TRAINING_MASK_COVERAGE = (0.10, 0.50)
TRAINING_MASK_MIN_COMPONENT = 25

# Difference-of-Gaussians structure teacher
STRUCTURE_TEACHER = {
    "SIGMA": 1.0,
    "K": 1.6,
    "TAU": 0.02,
    "PHI": 40.0
}

# Diffusion schedule (2000 steps, beta linear from 1e-6 to 1e-2)
SCHEDULE = {
    "T": 2000,
    "BETA_MIN": 1e-6,
    "BETA_MAX": 1e-2
}

# DDIM steps per diffusion stage
SAMPLER_STEPS = 40

# Exponential moving average of weights
EMA_DECAY = 0.9999

# Adam momentum parameters
ADAM_BETAS = (0.9, 0.999)

# SE-Net defaults (desk scale)
SENET_DEFAULTS = {
    "base_channels": 16,
    "num_residual_blocks": 9,
    "lambda_perceptual": 0.5,
    "lambda_gan": 0.25,
    "learning_rate": 1.5e-5,
    "batch_size": 8,
    "epochs": 3,
    "discriminator_channels": 16
}

# Conditional U-Net and diffusion training defaults (desk scale)
DIFFUSION_DEFAULTS = {
    "base_channels": 32,
    "channel_multipliers": (1, 2, 4),
    "num_res_blocks": 1,
    "learning_rate": 1e-4,
    "batch_size": 16,
    "max_steps": 8000
}

# Frozen random-feature perceptual proxy
PERCEPTUAL = {
    "SEED": 20240917,
    "CHANNELS": (8, 16, 32),
    "SCALES": 2
}

# Detail model
DETAIL = {
    "LOWPASS_CUTOFF": 0.125,      # cycles per pixel, half amplitude of a sigma=1.5 Gaussian
    "GRADIENT_GAIN_RANGE": (0.3, 1.0)
}

# Pipeline
MASK_DILATION_RADIUS = 4
MASK_ROBUSTNESS_RADIUS = 8         # how far a rough user mask may overshoot the shadow

# SSIM constants
SSIM = {
    "K1": 0.01,
    "K2": 0.03,
    "WINDOW": 11,
    "SIGMA": 1.5,
    "DATA_RANGE": 1.0
}

# Checkpoint container
CHECKPOINT = {
    "MAGIC": "PSR-CKPT",
    "VERSION": 1,
    "KINDS": ("senet", "discriminator", "inpaint", "detail")
}

# Dataset directory layout
DATASET_FILES = {
    "INPUT": "{index:05d}_input.png",
    "CLEAN": "{index:05d}_clean.png",
    "STRUCTURE": "{index:05d}_structure.png",
    "MASK": "{index:05d}_mask.png",
    "MANIFEST": "manifest.jsonl"
}

# Fixed names for persisted inference intermediates
INTERMEDIATE_FILES = {
    "structure": "structure.png",
    "dilated_mask": "dilated_mask.png",
    "coarse": "coarse.png",
    "refined_mask": "refined_mask.png",
    "updated": "updated.png",
    "gradient": "gradient.png",
    "result": "result.png"
}

# Evaluation regions, in report order
EVAL_REGIONS = ("all", "shadow", "non_shadow")
EVAL_METRICS = ("ssim", "perceptual", "rmse_lab")

# Display formatting constants
DISPLAY_FORMATTING = {
    "SEPARATOR_LINE": "-" * 72,
    "HEADER_LINE": "=" * 72,
    "ABSENT": "--"
}
