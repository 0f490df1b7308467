"""Desk-scale unified transformer for image generation and fake-image detection.

One backbone serves flow-matching generation and detection with textual
explanations. Detection tokens attend to generation latents through a
masked self-attention layout, and a second training stage aligns mid-layer
generator features with a frozen detector.
"""
from .model import ModelConfig, UnifiedModel, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_diga, train_gduf

__all__ = ["ModelConfig", "UnifiedModel", "TrainConfig", "load_checkpoint", "save_checkpoint", "train_gduf",
           "train_diga"]
__version__ = "0.1.0"
