"""Desk-scale region-aware multimodal pre-training in numpy.

A frozen base (encoders, Q-Former, toy LM) is extended one modality at a
time with adapter sets: learnable queries, LoRA on attention projections,
an optional box-embedding module and a region regression head.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, RegionBLIP
from .regions import MODALITIES, RegionSpec
from .trainer import TrainConfig, Trainer, extend_incremental, lr_at

__version__ = "0.1.0"

__all__ = [
    "MODALITIES", "ModelConfig", "RegionBLIP", "RegionSpec", "TrainConfig", "Trainer",
    "extend_incremental", "load_checkpoint", "lr_at", "save_checkpoint",
]
