#!/usr/bin/env python3
"""
Conditional U-Net noise predictor and the training loop shared by the
structure-guided inpainting model and the gradient-guided detail model
"""

import math
import logging
from dataclasses import dataclass, asdict, field, fields
from typing import Callable, Dict, List, Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from constants import DIFFUSION_DEFAULTS, EMA_DECAY, ADAM_BETAS
from model_state import ModelState
from diffusion_core import (
    NoiseSchedule, apply_kaiming, diffusion_loss, ema_update, effective_ema_decay, forward_diffuse
)

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3


@dataclass
class CondUNetConfig:
    """Conditional U-Net architecture

    in_channels is x_t (3) + conditioning image (3) + guide map (1) + mask (1).
    attention_resolutions lists level indices; None means the lowest level only.
    """
    base_channels: int = DIFFUSION_DEFAULTS["base_channels"]
    channel_multipliers: Tuple[int, ...] = DIFFUSION_DEFAULTS["channel_multipliers"]
    num_res_blocks: int = DIFFUSION_DEFAULTS["num_res_blocks"]
    time_embed_dim: Optional[int] = None
    attention_resolutions: Optional[Tuple[int, ...]] = None
    in_channels: int = 8
    out_channels: int = IMAGE_CHANNELS

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive integers")
        if self.base_channels < 1 or self.num_res_blocks < 1:
            raise ValueError("base_channels and num_res_blocks must be positive")
        if self.in_channels != 2 * IMAGE_CHANNELS + 2:
            raise ValueError(f"in_channels must be {2 * IMAGE_CHANNELS + 2} (x_t, image, guide, mask), got {self.in_channels}")
        if self.out_channels != IMAGE_CHANNELS:
            raise ValueError(f"out_channels must be {IMAGE_CHANNELS}")
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_channels
        if self.attention_resolutions is None:
            self.attention_resolutions = (len(self.channel_multipliers) - 1,)
        self.attention_resolutions = tuple(int(level) for level in self.attention_resolutions)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["channel_multipliers"] = list(self.channel_multipliers)
        data["attention_resolutions"] = list(self.attention_resolutions)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "CondUNetConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown U-Net settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DiffusionTrainConfig:
    """Training settings for either diffusion model"""
    unet: CondUNetConfig = field(default_factory=CondUNetConfig)
    learning_rate: float = DIFFUSION_DEFAULTS["learning_rate"]
    batch_size: int = DIFFUSION_DEFAULTS["batch_size"]
    max_steps: int = DIFFUSION_DEFAULTS["max_steps"]
    ema_decay: float = EMA_DECAY
    ema_warmup: bool = False
    use_condition: bool = True
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = CondUNetConfig.from_dict(self.unet)
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["unet"] = self.unet.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "DiffusionTrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown diffusion training settings: {sorted(unknown)}")
        return cls(**data)


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, [B] -> [B, dim]"""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """GroupNorm/SiLU residual block with scale-shift timestep modulation"""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Single-head spatial self-attention"""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class CondUNet(nn.Module):
    """Noise predictor eps(x_t, conditions, t) with conditions concatenated at the input"""

    def __init__(self, config: CondUNetConfig):
        super().__init__()
        self.config = config
        base = config.base_channels
        tdim = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(config.in_channels, base, 3, padding=1)

        widths = [base * m for m in config.channel_multipliers]
        levels = len(widths)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = base
        for level, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(ch, width, tdim))
                ch = width
            self.down_blocks.append(blocks)
            self.down_attn.append(AttnBlock(width) if level in config.attention_resolutions else nn.Identity())
            self.downsamples.append(nn.Conv2d(width, width, 3, stride=2, padding=1) if level < levels - 1 else nn.Identity())

        self.mid1 = ResBlock(ch, ch, tdim)
        self.mid_attn = AttnBlock(ch)
        self.mid2 = ResBlock(ch, ch, tdim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(levels)):
            width = widths[level]
            blocks = nn.ModuleList([ResBlock(ch + width, width, tdim)])
            blocks.extend(ResBlock(width, width, tdim) for _ in range(config.num_res_blocks - 1))
            ch = width
            self.up_blocks.append(blocks)
            self.up_attn.append(AttnBlock(width) if level in config.attention_resolutions else nn.Identity())
            self.upsamples.append(nn.Conv2d(width, width, 3, padding=1) if level > 0 else nn.Identity())

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % self.config.downsample_factor or x.shape[3] % self.config.downsample_factor:
            raise ValueError(f"Input sides must be divisible by {self.config.downsample_factor}, got {tuple(x.shape[2:])}")
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for blocks, attn, down in zip(self.down_blocks, self.down_attn, self.downsamples):
            for block in blocks:
                h = block(h, temb)
            h = attn(h)
            skips.append(h)
            h = down(h)

        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)

        for blocks, attn, up in zip(self.up_blocks, self.up_attn, self.upsamples):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb)
            h = attn(h)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def build_unet(state: ModelState, use_ema: bool = True) -> CondUNet:
    """Rebuild a trained network from a diffusion ModelState"""
    config = CondUNetConfig.from_dict(state.config["train"]["unet"])
    dtype = next(iter(state.weights.values())).dtype
    net = CondUNet(config).to(dtype)
    state.load_into(net, use_ema=use_ema)
    return net.eval()


def timestep_batch(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.long()
    return torch.full((batch,), int(t), dtype=torch.long)


class DiffusionTrainer:
    """Epsilon-prediction training with Adam and per-step EMA

    The caller supplies clean targets x0 (signed range) and a batch builder
    returning the [B, 5, H, W] conditioning stack for given sample indices.
    """

    def __init__(self, kind: str, config: DiffusionTrainConfig, schedule: NoiseSchedule, seed: int = 0,
                 dtype: torch.dtype = torch.float32, extra_config: Optional[Dict] = None):
        self.kind = kind
        self.config = config
        self.schedule = schedule
        self.seed = seed
        self.dtype = dtype
        self.network = apply_kaiming(CondUNet(config.unet).to(dtype), seed)
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=config.learning_rate, betas=ADAM_BETAS)
        state_config = {"train": config.to_dict(), "schedule": schedule.to_dict()}
        state_config.update(extra_config or {})
        self.state = ModelState.from_module(kind, state_config, self.network, seed=seed)
        self.generator = torch.Generator().manual_seed(int(seed))
        self.history: List[float] = []

    def loss(self, x0: torch.Tensor, conditions: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        x_t = forward_diffuse(x0, t, eps, self.schedule)
        return diffusion_loss(eps, self.network(torch.cat([x_t, conditions], dim=1), t))

    def train_step(self, x0: torch.Tensor, conditions: torch.Tensor) -> float:
        self.network.train()
        batch = x0.shape[0]
        t = torch.randint(0, self.schedule.T, (batch,), generator=self.generator)
        eps = torch.randn(x0.shape, generator=self.generator, dtype=torch.float64).to(self.dtype)

        self.optimizer.zero_grad()
        loss = self.loss(x0, conditions, t, eps)
        loss.backward()
        self.optimizer.step()

        step = self.state.step + 1
        self.state = ema_update(self.state, effective_ema_decay(self.config.ema_decay, step - 1, self.config.ema_warmup))
        self.state.step = step
        self.history.append(float(loss))
        if step % self.config.log_every == 0:
            logger.info("%s step %d/%d: loss=%.5f", self.kind, step, self.config.max_steps, float(loss))
        return float(loss)

    def fit(self, x0: torch.Tensor, make_conditions: Callable[[torch.Tensor, int], torch.Tensor]) -> ModelState:
        """Train for max_steps over random batches of x0

        Args:
            x0: Clean targets [N, 3, H, W] in the signed range
            make_conditions: (indices, step) -> [B, 5, H, W] conditioning stack
        """
        if x0.shape[0] == 0:
            raise ValueError(f"Cannot train the {self.kind} model on an empty dataset")
        x0 = x0.to(self.dtype)
        logger.info("Training %s model on %d images: steps=%d batch=%d lr=%g",
                    self.kind, x0.shape[0], self.config.max_steps, self.config.batch_size, self.config.learning_rate)
        while self.state.step < self.config.max_steps:
            index = torch.randint(0, x0.shape[0], (self.config.batch_size,), generator=self.generator)
            self.train_step(x0[index], make_conditions(index, self.state.step).to(self.dtype))
        logger.info("Finished %s training at step %d", self.kind, self.state.step)
        return self.state

    def evaluate(self, x0: torch.Tensor, conditions: torch.Tensor, seed: int = 0) -> float:
        """Loss of the raw weights on a fixed batch with seeded timesteps and noise"""
        generator = torch.Generator().manual_seed(int(seed))
        t = torch.randint(0, self.schedule.T, (x0.shape[0],), generator=generator)
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(self.dtype)
        self.network.eval()
        with torch.no_grad():
            return float(self.loss(x0.to(self.dtype), conditions.to(self.dtype), t, eps))


def predict_noise_fn(net: CondUNet, conditions: torch.Tensor) -> Callable[[torch.Tensor, int], torch.Tensor]:
    """Closure over fixed conditions for run_ddim_chain"""
    def predict(x: torch.Tensor, t: int) -> torch.Tensor:
        with torch.no_grad():
            return net(torch.cat([x, conditions], dim=1), timestep_batch(t, x.shape[0]))
    return predict
