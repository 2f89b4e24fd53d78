"""Data-free distillation: losses, the min/max engine and ablation presets."""
from src.distillation.engine import (
    DistillResult,
    Distiller,
    TrainConfig,
    kl_only_baseline_toggle,
    max_stage_step,
    min_stage_step,
    train,
)
from src.distillation.losses import HyperParams, RepresentationPair

__all__ = [
    "DistillResult",
    "Distiller",
    "HyperParams",
    "RepresentationPair",
    "TrainConfig",
    "kl_only_baseline_toggle",
    "max_stage_step",
    "min_stage_step",
    "train",
]
