#!/usr/bin/env python3
"""
Model state and checkpoint container
Named weights, their exponential moving average and a step counter for every
trainable component, plus the versioned checkpoint file they are stored in
"""

import os
import logging
from typing import Any, Dict, Optional

import torch
from torch import nn

from constants import CHECKPOINT

logger = logging.getLogger(__name__)


class CheckpointError(Exception):
    """Exception raised when a checkpoint file is malformed or incompatible."""
    pass


class MissingCheckpointError(CheckpointError):
    """Exception raised when a required checkpoint file does not exist."""
    pass


class UntrainedModelError(Exception):
    """Exception raised when sampling is requested from a state that was never trained."""
    pass


class ModelState:
    """Weights + EMA weights + step counter for one trainable component"""

    def __init__(self, kind: str, config: Dict[str, Any], weights: Dict[str, torch.Tensor],
                 ema_weights: Optional[Dict[str, torch.Tensor]] = None, step: int = 0, seed: int = 0):
        """Initialize the state

        Args:
            kind: Component tag, one of CHECKPOINT["KINDS"]
            config: Plain-dict echo of the component configuration
            weights: Named weight tensors
            ema_weights: Named EMA tensors (defaults to a copy of weights)
            step: Number of optimizer steps taken
            seed: Seed the component was trained with
        """
        if kind not in CHECKPOINT["KINDS"]:
            raise ValueError(f"Unknown model kind: {kind}")
        if ema_weights is None:
            ema_weights = {name: tensor.detach().clone() for name, tensor in weights.items()}
        if set(weights) != set(ema_weights):
            raise ValueError("Weights and EMA weights must share the same names")
        for name, tensor in weights.items():
            if tuple(tensor.shape) != tuple(ema_weights[name].shape):
                raise ValueError(f"Shape mismatch between weights and EMA for {name}")

        self.kind = kind
        self.config = config
        self.weights = weights
        self.ema_weights = ema_weights
        self.step = step
        self.seed = seed

    @classmethod
    def from_module(cls, kind: str, config: Dict[str, Any], module: nn.Module, seed: int = 0) -> "ModelState":
        """Capture a module; weights share storage with its parameters"""
        weights = dict(module.state_dict())
        return cls(kind, config, weights, seed=seed)

    def load_into(self, module: nn.Module, use_ema: bool = True) -> nn.Module:
        """Copy the (EMA) weights into a module built from this state's config

        Raises:
            CheckpointError: If the stored arrays do not match the module's parameters
        """
        check_manifest(self, module)
        source = self.ema_weights if use_ema else self.weights
        module.load_state_dict(source)
        return module

    def is_trained(self) -> bool:
        return self.step > 0

    def require_trained(self):
        if not self.is_trained():
            raise UntrainedModelError(f"The {self.kind} model has not been trained")

    def __repr__(self):
        return f"ModelState(kind={self.kind!r}, step={self.step}, arrays={len(self.weights)})"


def save_checkpoint(state: ModelState, path: str):
    """Write a state to the versioned checkpoint container"""
    payload = {
        "magic": CHECKPOINT["MAGIC"],
        "version": CHECKPOINT["VERSION"],
        "kind": state.kind,
        "config": state.config,
        "weights": {name: tensor.detach().cpu().clone() for name, tensor in state.weights.items()},
        "ema_weights": {name: tensor.detach().cpu().clone() for name, tensor in state.ema_weights.items()},
        "step": int(state.step),
        "seed": int(state.seed)
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save(payload, path)
    logger.info("Saved %s checkpoint (step %d) to %s", state.kind, state.step, path)


def load_checkpoint(path: str, expected_kind: Optional[str] = None) -> ModelState:
    """Read a checkpoint and validate its header

    Args:
        path: Checkpoint file
        expected_kind: Component tag the caller needs, if any

    Returns:
        ModelState: The stored state

    Raises:
        MissingCheckpointError: If the file does not exist
        CheckpointError: If the header, kind or array manifest is invalid
    """
    if not os.path.exists(path):
        raise MissingCheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT["MAGIC"]:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT["VERSION"]:
        raise CheckpointError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
    kind = payload.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path} holds a {kind} model, expected {expected_kind}")
    for key in ("config", "weights", "ema_weights", "step", "seed"):
        if key not in payload:
            raise CheckpointError(f"{path} is missing the {key} field")

    try:
        state = ModelState(kind, payload["config"], payload["weights"], payload["ema_weights"],
                           step=payload["step"], seed=payload["seed"])
    except ValueError as e:
        raise CheckpointError(f"Invalid checkpoint {path}: {e}") from e
    logger.info("Loaded %s checkpoint (step %d) from %s", kind, state.step, path)
    return state


def check_manifest(state: ModelState, module: nn.Module):
    """Raise CheckpointError unless the state's arrays match the module's parameters"""
    expected = {name: tuple(tensor.shape) for name, tensor in module.state_dict().items()}
    stored = {name: tuple(tensor.shape) for name, tensor in state.weights.items()}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(
            f"Array manifest mismatch for {state.kind}: missing={missing[:5]} extra={extra[:5]}")
