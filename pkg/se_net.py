#!/usr/bin/env python3
"""
Shadow-independent structure extraction network (SE-Net)
Residual encoder/decoder generator, 70x70 patch discriminator, frozen
random-feature perceptual distance, least-squares GAN losses and training
"""

import logging
import threading
from dataclasses import dataclass, asdict, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from constants import SENET_DEFAULTS, PERCEPTUAL, EMA_DECAY, ADAM_BETAS
from imaging import ImageTensor, ShadowMask, ChannelError, check_same_size
from model_state import ModelState
from diffusion_core import apply_kaiming, ema_update, effective_ema_decay

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Exception raised when an image cannot pass through the network's resampling stages."""
    pass


@dataclass
class SENetConfig:
    """SE-Net architecture and training settings"""
    base_channels: int = SENET_DEFAULTS["base_channels"]
    num_residual_blocks: int = SENET_DEFAULTS["num_residual_blocks"]
    lambda_perceptual: float = SENET_DEFAULTS["lambda_perceptual"]
    lambda_gan: float = SENET_DEFAULTS["lambda_gan"]
    learning_rate: float = SENET_DEFAULTS["learning_rate"]
    batch_size: int = SENET_DEFAULTS["batch_size"]
    epochs: int = SENET_DEFAULTS["epochs"]
    discriminator_channels: int = SENET_DEFAULTS["discriminator_channels"]
    ema_decay: float = EMA_DECAY
    ema_warmup: bool = False
    max_steps: Optional[int] = None
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_perceptual < 0 or self.lambda_gan < 0:
            raise ValueError("Loss weights must be non-negative")
        if self.num_residual_blocks < 1:
            raise ValueError("SE-Net needs at least one residual block")
        if self.base_channels < 1 or self.discriminator_channels < 1:
            raise ValueError("Channel counts must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("Batch size and epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when set")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SENetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown SE-Net settings: {sorted(unknown)}")
        return cls(**data)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=True),
            nn.SiLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=True)
        )

    def forward(self, x):
        return x + self.body(x)


class SENet(nn.Module):
    """Flat conv, two stride-2 downs, residual blocks, two nearest-neighbor ups, sigmoid output"""

    def __init__(self, config: SENetConfig, in_channels: int = 3):
        super().__init__()
        c = config.base_channels
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, c, 7),
            nn.InstanceNorm2d(c, affine=True),
            nn.SiLU()
        ]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(c * mult, c * mult * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(c * mult * 2, affine=True),
                nn.SiLU()
            ]
        layers += [ResidualBlock(c * 4) for _ in range(config.num_residual_blocks)]
        for mult in (4, 2):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c * mult, c * mult // 2, 3, padding=1),
                nn.InstanceNorm2d(c * mult // 2, affine=True),
                nn.SiLU()
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 1, 7), nn.Sigmoid()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Least-squares patch critic with a 70x70 receptive field and H/8 x W/8 logits"""

    def __init__(self, channels: int = SENET_DEFAULTS["discriminator_channels"], in_channels: int = 1):
        super().__init__()
        c = channels
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, c * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c * 2, c * 4, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c * 4, c * 4, 5, stride=1, padding=2),
            nn.SiLU(),
            nn.Conv2d(c * 4, 1, 3, stride=1, padding=1)
        )

    def forward(self, x):
        return self.model(x)


def check_senet_shape(height: int, width: int):
    if height % 4 or width % 4:
        raise ShapeError(f"SE-Net needs sides divisible by 4, got {height}x{width}")


def to_batch(img: ImageTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[H, W, C] image to a [1, C, H, W] tensor"""
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def from_batch(x: torch.Tensor, value_range: str = "unit") -> ImageTensor:
    """[1, C, H, W] tensor back to an image (float32)"""
    data = x.detach().cpu().squeeze(0).permute(1, 2, 0).numpy().astype(np.float32)
    return ImageTensor(data, value_range)


def _state_dtype(state: ModelState) -> torch.dtype:
    return next(iter(state.weights.values())).dtype


def build_senet(state: ModelState, use_ema: bool = True) -> SENet:
    net = SENet(SENetConfig.from_dict(state.config))
    net = net.to(_state_dtype(state))
    state.load_into(net, use_ema=use_ema)
    return net.eval()


def build_discriminator(dstate: ModelState, use_ema: bool = True) -> PatchDiscriminator:
    net = PatchDiscriminator(dstate.config["discriminator_channels"]).to(_state_dtype(dstate))
    dstate.load_into(net, use_ema=use_ema)
    return net.eval()


def senet_forward(state: ModelState, img: ImageTensor, use_ema: bool = True) -> ImageTensor:
    """Structure map of an RGB image

    Args:
        state: SE-Net weights
        img: Unit-range RGB image with sides divisible by 4
        use_ema: Run with the EMA weights

    Returns:
        ImageTensor: Single-channel unit-range map of the same size

    Raises:
        ShapeError: If a side is not divisible by 4
    """
    if img.channels != 3:
        raise ChannelError(f"SE-Net expects an RGB image, got {img.channels} channel(s)")
    check_senet_shape(img.height, img.width)
    net = build_senet(state, use_ema)
    with torch.no_grad():
        out = net(to_batch(img.to_unit(), _state_dtype(state)))
    return from_batch(out.clamp(0.0, 1.0))


def discriminator_forward(dstate: ModelState, s: ImageTensor, use_ema: bool = True) -> np.ndarray:
    """Patch logits [H/8, W/8] for a single-channel structure map"""
    if s.channels != 1:
        raise ChannelError(f"The discriminator expects a single-channel map, got {s.channels}")
    net = build_discriminator(dstate, use_ema)
    with torch.no_grad():
        logits = net(to_batch(s, _state_dtype(dstate)))
    return logits[0, 0].cpu().numpy()


_FEATURE_CACHE: Dict[Tuple[int, torch.dtype], nn.Module] = {}
_FEATURE_CACHE_LOCK = threading.Lock()


def _build_extractor(in_channels: int, dtype: torch.dtype) -> nn.Module:
    generator = torch.Generator().manual_seed(PERCEPTUAL["SEED"] + in_channels)
    layers = []
    previous = in_channels
    for width in PERCEPTUAL["CHANNELS"]:
        conv = nn.Conv2d(previous, width, 3, padding=1)
        with torch.no_grad():
            std = (1.0 / (previous * 9)) ** 0.5
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator, dtype=torch.float64) * std)
            conv.bias.zero_()
        layers += [conv, nn.Tanh()]
        previous = width
    extractor = nn.Sequential(*layers).to(dtype).eval()
    for param in extractor.parameters():
        param.requires_grad_(False)
    return extractor


def perceptual_extractor(in_channels: int, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Frozen, seeded 3-layer tanh conv feature extractor (one per channel count and dtype)

    Safe to call from dataset worker threads: each key is built once.
    """
    key = (in_channels, dtype)
    with _FEATURE_CACHE_LOCK:
        if key not in _FEATURE_CACHE:
            _FEATURE_CACHE[key] = _build_extractor(in_channels, dtype)
        return _FEATURE_CACHE[key]


def _feature_maps(extractor: nn.Module, x: torch.Tensor) -> List[torch.Tensor]:
    maps = []
    for layer in extractor:
        x = layer(x)
        if isinstance(layer, nn.Tanh):
            maps.append(x)
    return maps


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Differentiable perceptual distance between [B, C, H, W] batches

    Squared feature differences are averaged per layer and per scale; with a
    [B, 1, H, W] weight they are averaged over the weighted pixels only.
    """
    if a.shape != b.shape:
        raise ValueError(f"Perceptual inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    extractor = perceptual_extractor(a.shape[1], a.dtype)
    terms = []
    for scale in range(PERCEPTUAL["SCALES"]):
        if scale:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
            if weight is not None:
                weight = F.avg_pool2d(weight, 2)
        for fa, fb in zip(_feature_maps(extractor, a), _feature_maps(extractor, b)):
            squared = ((fa - fb) ** 2).mean(dim=1, keepdim=True)
            if weight is None:
                terms.append(squared.mean())
            else:
                terms.append((squared * weight).sum() / weight.sum().clamp_min(1e-12))
    return torch.stack(terms).mean()


def perceptual_distance(a: ImageTensor, b: ImageTensor, region: Optional[ShadowMask] = None) -> float:
    """Frozen random-feature distance between two images (0 iff their features match)

    Raises:
        ValueError: If shapes differ or the region is empty
    """
    if a.shape != b.shape:
        raise ValueError(f"Images differ in shape: {a.shape} vs {b.shape}")
    weight = None
    if region is not None:
        check_same_size(a, region)
        if region.is_empty():
            raise ValueError("Perceptual distance over an empty region")
        weight = torch.from_numpy(region.as_float(np.float64))[None, None]
    with torch.no_grad():
        value = perceptual_loss(to_batch(a.to_unit(), torch.float64), to_batch(b.to_unit(), torch.float64), weight)
    return float(value)


def _as_tensor(value: Union[ImageTensor, torch.Tensor, np.ndarray]) -> torch.Tensor:
    if isinstance(value, ImageTensor):
        return to_batch(value, torch.float64)
    if isinstance(value, np.ndarray):
        return torch.from_numpy(value)
    return value


def senet_losses(pred, target, dlogits, config: Optional[SENetConfig] = None) -> Dict[str, torch.Tensor]:
    """Generator loss terms

    Args:
        pred: Predicted structure map (tensor [B, 1, H, W] or ImageTensor)
        target: Teacher structure map of the clean image
        dlogits: Discriminator logits for pred
        config: Supplies the loss weights (defaults 0.5 and 0.25)

    Returns:
        dict: rec (L1), perceptual, gan (least squares), total
    """
    config = config or SENetConfig()
    pred, target, dlogits = _as_tensor(pred), _as_tensor(target), _as_tensor(dlogits)
    if pred.shape != target.shape:
        raise ValueError(f"Prediction and target differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")
    rec = (pred - target).abs().mean()
    perceptual = perceptual_loss(pred, target)
    gan = ((dlogits - 1.0) ** 2).mean()
    total = rec + config.lambda_perceptual * perceptual + config.lambda_gan * gan
    return {"rec": rec, "perceptual": perceptual, "gan": gan, "total": total}


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss: real pushed to 1, fake to 0"""
    return 0.5 * (((real_logits - 1.0) ** 2).mean() + (fake_logits ** 2).mean())


def stack_pairs(dataset: Sequence) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack PairedSample inputs and targets into [N, 3, H, W] / [N, 1, H, W] tensors"""
    inputs = np.stack([sample.input.data.transpose(2, 0, 1) for sample in dataset])
    targets = np.stack([sample.target_structure.data.transpose(2, 0, 1) for sample in dataset])
    return torch.from_numpy(inputs.astype(np.float32)), torch.from_numpy(targets.astype(np.float32))


class SENetTrainer:
    """Alternating generator / discriminator training with EMA tracking"""

    def __init__(self, config: SENetConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.generator = apply_kaiming(SENet(config).to(dtype), seed)
        self.discriminator = apply_kaiming(PatchDiscriminator(config.discriminator_channels).to(dtype), seed + 1)
        self.g_optimizer = torch.optim.Adam(self.generator.parameters(), lr=config.learning_rate, betas=ADAM_BETAS)
        self.d_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=config.learning_rate, betas=ADAM_BETAS)
        self.state = ModelState.from_module("senet", config.to_dict(), self.generator, seed=seed)
        self.discriminator_state = ModelState.from_module("discriminator", config.to_dict(), self.discriminator, seed=seed)
        self.history: List[Dict[str, float]] = []

    def train_step(self, inputs: torch.Tensor, targets: torch.Tensor) -> Dict[str, float]:
        """One generator update followed by one discriminator update"""
        self.generator.train()
        pred = self.generator(inputs)

        self.g_optimizer.zero_grad()
        losses = senet_losses(pred, targets, self.discriminator(pred), self.config)
        losses["total"].backward()
        self.g_optimizer.step()

        self.d_optimizer.zero_grad()
        d_loss = discriminator_loss(self.discriminator(targets), self.discriminator(pred.detach()))
        d_loss.backward()
        self.d_optimizer.step()

        step = self.state.step + 1
        decay = effective_ema_decay(self.config.ema_decay, step - 1, self.config.ema_warmup)
        self.state = ema_update(self.state, decay)
        self.state.step = step
        self.discriminator_state = ema_update(self.discriminator_state, decay)
        self.discriminator_state.step = step

        record = {name: float(value) for name, value in losses.items()}
        record["discriminator"] = float(d_loss)
        record["step"] = step
        self.history.append(record)
        if step % self.config.log_every == 0:
            logger.info("SE-Net step %d: total=%.4f rec=%.4f perceptual=%.4f gan=%.4f d=%.4f",
                        step, record["total"], record["rec"], record["perceptual"], record["gan"], record["discriminator"])
        return record

    def fit(self, dataset: Sequence) -> ModelState:
        """Run the configured epochs (or max_steps) over a PairedSample dataset"""
        if not dataset:
            raise ValueError("Cannot train SE-Net on an empty dataset")
        inputs, targets = stack_pairs(dataset)
        check_senet_shape(inputs.shape[2], inputs.shape[3])
        inputs, targets = inputs.to(self.dtype), targets.to(self.dtype)
        order = torch.Generator().manual_seed(int(self.seed))
        logger.info("Training SE-Net on %d samples: epochs=%d batch=%d lr=%g",
                    len(dataset), self.config.epochs, self.config.batch_size, self.config.learning_rate)

        for epoch in range(self.config.epochs):
            permutation = torch.randperm(len(dataset), generator=order)
            for start in range(0, len(dataset), self.config.batch_size):
                if self.config.max_steps is not None and self.state.step >= self.config.max_steps:
                    logger.info("Reached max_steps=%d", self.config.max_steps)
                    return self.state
                index = permutation[start:start + self.config.batch_size]
                self.train_step(inputs[index], targets[index])
            logger.info("SE-Net epoch %d/%d done (step %d)", epoch + 1, self.config.epochs, self.state.step)
        return self.state

    def evaluate(self, dataset: Sequence, use_ema: bool = False) -> float:
        """Mean L1 reconstruction loss of the current generator over a dataset"""
        inputs, targets = stack_pairs(dataset)
        net = build_senet(self.state, use_ema=use_ema)
        with torch.no_grad():
            return float((net(inputs.to(self.dtype)) - targets.to(self.dtype)).abs().mean())


def train_senet(dataset: Sequence, config: Optional[SENetConfig] = None, seed: int = 0) -> ModelState:
    """Train SE-Net and return its final state (see SENetTrainer for the discriminator state)"""
    trainer = SENetTrainer(config or SENetConfig(), seed)
    return trainer.fit(dataset)
