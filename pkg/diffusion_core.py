#!/usr/bin/env python3
"""
Diffusion mathematics shared by the inpainting and detail restoration models
Noise schedule, single-step forward corruption, deterministic DDIM reverse
step, epsilon-prediction loss, timestep subsampling, EMA and Kaiming init
"""

import math
import logging
from typing import Callable, Optional, Sequence, Union

import torch
from torch import nn

from constants import SCHEDULE
from model_state import ModelState

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Exception raised for invalid schedule parameters."""
    pass


class TimestepError(ValueError):
    """Exception raised for timesteps outside the schedule or out of order."""
    pass


class NoiseSchedule:
    """Precomputed beta / alpha / alpha_bar tables (64-bit)"""

    def __init__(self, T: int, beta: torch.Tensor):
        self.T = T
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)

    def snr(self) -> torch.Tensor:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) per step"""
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def check_timestep(self, t: int):
        if not 0 <= int(t) < self.T:
            raise TimestepError(f"Timestep {t} outside [0, {self.T})")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": float(self.beta[0]), "beta_max": float(self.beta[-1])}

    def __repr__(self):
        return f"NoiseSchedule(T={self.T}, beta=[{float(self.beta[0]):.2e}, {float(self.beta[-1]):.2e}])"


def make_schedule(T: int = SCHEDULE["T"], beta_min: float = SCHEDULE["BETA_MIN"],
                  beta_max: float = SCHEDULE["BETA_MAX"]) -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max over T steps

    Raises:
        ScheduleError: If T < 2 or the bounds are not 0 < beta_min <= beta_max < 1
    """
    if T < 2:
        raise ScheduleError(f"A schedule needs at least 2 steps, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ScheduleError(f"Invalid beta bounds: {beta_min}, {beta_max}")
    fraction = torch.arange(T, dtype=torch.float64) / (T - 1)
    beta = beta_min * (1.0 - fraction) + beta_max * fraction
    beta[0] = beta_min
    beta[-1] = beta_max
    return NoiseSchedule(T, beta)


def schedule_from_config(config: Optional[dict]) -> NoiseSchedule:
    """Build a schedule from a {"T", "beta_min", "beta_max"} dict"""
    config = config or {}
    return make_schedule(config.get("T", SCHEDULE["T"]),
                         config.get("beta_min", SCHEDULE["BETA_MIN"]),
                         config.get("beta_max", SCHEDULE["BETA_MAX"]))


def _gather(table: torch.Tensor, t: Union[int, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """Pick schedule entries for scalar or per-sample timesteps, broadcastable against like"""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        values = table.to(like.device)[t.long().to(like.device)].to(like.dtype)
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t)].to(dtype=like.dtype, device=like.device)


def _check_timesteps(sched: NoiseSchedule, t: Union[int, torch.Tensor]):
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= sched.T):
            raise TimestepError(f"Timesteps outside [0, {sched.T})")
    else:
        sched.check_timestep(int(t))


def forward_diffuse(x0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps

    Args:
        x0: Clean signal in the signed range
        t: Timestep, scalar or one per batch entry
        eps: Standard normal noise of the same shape
        sched: Noise schedule

    Raises:
        TimestepError: If t is outside [0, T)
    """
    _check_timesteps(sched, t)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    alpha_bar = _gather(sched.alpha_bar, t, x0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def predict_x0(x_t: torch.Tensor, e_t: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Estimate the clean signal from x_t and a noise prediction"""
    sched.check_timestep(t)
    alpha_bar = _gather(sched.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(1.0 - alpha_bar) * e_t) / torch.sqrt(alpha_bar)


def ddim_step(x_t: torch.Tensor, e_t: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM move from step t to step t_prev

    Raises:
        TimestepError: Unless t > t_prev >= 0 and both lie in the schedule
    """
    if not t > t_prev >= 0:
        raise TimestepError(f"DDIM needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    sched.check_timestep(t)
    x0_hat = predict_x0(x_t, e_t, t, sched)
    alpha_bar_prev = _gather(sched.alpha_bar, t_prev, x_t)
    return torch.sqrt(alpha_bar_prev) * x0_hat + torch.sqrt(1.0 - alpha_bar_prev) * e_t


def diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise"""
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"Noise shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return ((eps_true - eps_pred) ** 2).mean()


class TimestepPlan:
    """Strictly decreasing subsequence of [0, T-1] starting at T-1 and ending at 0"""

    def __init__(self, steps: Sequence[int], T: int):
        steps = [int(s) for s in steps]
        if not steps:
            raise TimestepError("A timestep plan needs at least one step")
        if steps[0] != T - 1:
            raise TimestepError(f"Plan must start at {T - 1}, starts at {steps[0]}")
        if len(steps) > 1 and steps[-1] != 0:
            raise TimestepError(f"Plan must end at 0, ends at {steps[-1]}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise TimestepError("Plan steps must be strictly decreasing")
        self.steps = steps
        self.T = T

    def pairs(self):
        """Yield (t, t_prev) with t_prev None for the final step"""
        for index, t in enumerate(self.steps):
            t_prev = self.steps[index + 1] if index + 1 < len(self.steps) else None
            yield t, t_prev

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __repr__(self):
        return f"TimestepPlan(n={len(self.steps)}, first={self.steps[0]}, last={self.steps[-1]})"


def make_timestep_plan(T: int, n_steps: int) -> TimestepPlan:
    """Evenly spaced plan with stride floor(T / n_steps), topped with T - 1

    Raises:
        TimestepError: Unless 1 <= n_steps <= T
    """
    if not 1 <= n_steps <= T:
        raise TimestepError(f"n_steps must lie in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return TimestepPlan([T - 1], T)
    stride = T // n_steps
    ascending = [index * stride for index in range(n_steps - 1)] + [T - 1]
    return TimestepPlan(list(reversed(ascending)), T)


def run_ddim_chain(x_T: torch.Tensor, predict_noise: Callable[[torch.Tensor, int], torch.Tensor],
                   plan: TimestepPlan, sched: NoiseSchedule) -> torch.Tensor:
    """Run the deterministic sampler along a plan and return the x0 estimate

    The last plan entry is mapped straight to x0 (alpha_bar_prev = 1).
    """
    x = x_T
    for t, t_prev in plan.pairs():
        e_t = predict_noise(x, t)
        if t_prev is None:
            x = predict_x0(x, e_t, t, sched)
        else:
            x = ddim_step(x, e_t, t, t_prev, sched)
    return x


def ema_update(state: ModelState, decay: float) -> ModelState:
    """ema <- decay * ema + (1 - decay) * weights, per array

    Returns a new state sharing the raw weights; the EMA tensors are new.
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    new_ema = {}
    with torch.no_grad():
        for name, weight in state.weights.items():
            ema = state.ema_weights[name]
            if not torch.is_floating_point(weight):
                new_ema[name] = weight.detach().clone()
                continue
            new_ema[name] = torch.lerp(ema, weight.detach().to(ema.dtype), 1.0 - decay)
    return ModelState(state.kind, state.config, state.weights, new_ema, step=state.step, seed=state.seed)


def effective_ema_decay(decay: float, step: int, warmup: bool) -> float:
    """EMA decay, optionally ramped up over the first steps"""
    if not warmup:
        return decay
    return min(decay, (1.0 + step) / (10.0 + step))


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) < 2:
        raise ValueError(f"Cannot compute fan-in for shape {tuple(shape)}")
    return int(math.prod(shape[1:]))


def kaiming_init(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Samples from Normal(0, 2 / fan_in), seeded"""
    generator = torch.Generator().manual_seed(int(seed))
    std = math.sqrt(2.0 / fan_in(shape))
    return torch.randn(tuple(shape), generator=generator, dtype=torch.float64).mul_(std).to(dtype)


def apply_kaiming(module: nn.Module, seed: int) -> nn.Module:
    """Kaiming-initialize every conv / linear weight of a module, zero the biases

    Args:
        module: Network to initialize in place
        seed: Base seed; each weight gets its own derived seed
    """
    with torch.no_grad():
        for index, (name, param) in enumerate(module.named_parameters()):
            if name.endswith("bias"):
                param.zero_()
            elif param.ndim >= 2:
                param.copy_(kaiming_init(param.shape, seed * 100003 + index, dtype=param.dtype))
    return module
