"""Noise-robust vision-language pre-training, desk-scale reimplementation."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import RunConfig, TrainConfig, load_config
from .data import PairedSample, WorldConfig, generate_dataset
from .model import BridgeModel, ModelConfig
from .objectives import citg_loss, citm_loss, generative_loss, itc_loss, nitc_loss, similarity_matrix
from .tensor import Tensor, backward, grad_check

__all__ = [
    "BridgeModel",
    "ModelConfig",
    "PairedSample",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "WorldConfig",
    "backward",
    "citg_loss",
    "citm_loss",
    "generative_loss",
    "generate_dataset",
    "grad_check",
    "itc_loss",
    "load_config",
    "nitc_loss",
    "similarity_matrix",
]
