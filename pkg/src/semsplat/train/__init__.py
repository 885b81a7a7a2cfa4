from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import (
    ContrastiveGroups,
    build_contrastive_groups,
    contrastive_loss,
    partition_by_similarity,
    psnr,
    reconstruction_loss,
    smoothing_loss,
    ssim,
)
from .optim import Adam, AdamState, ParamGroup, adam_update
from .phases import NumericalError, Phase1Report, Phase2Result, init_features, phase1_reconstruct, phase2_bootstrap

__all__ = [
    "Adam",
    "AdamState",
    "ContrastiveGroups",
    "NumericalError",
    "ParamGroup",
    "Phase1Report",
    "Phase2Result",
    "TrainConfig",
    "adam_update",
    "build_contrastive_groups",
    "contrastive_loss",
    "init_features",
    "load_checkpoint",
    "partition_by_similarity",
    "phase1_reconstruct",
    "phase2_bootstrap",
    "psnr",
    "save_checkpoint",
    "reconstruction_loss",
    "smoothing_loss",
    "ssim",
]
