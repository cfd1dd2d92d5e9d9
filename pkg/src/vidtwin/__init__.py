"""Decoupled video autoencoder with structure and dynamics latents."""

from .config import (
    BackboneConfig,
    DiffusionConfig,
    DynamicsConfig,
    LossWeights,
    ModelConfig,
    RunConfig,
    StructureConfig,
    TrainConfig,
)
from .model import VidTwin, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DiffusionConfig",
    "DynamicsConfig",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "StructureConfig",
    "TrainConfig",
    "VidTwin",
    "load_checkpoint",
    "save_checkpoint",
]
