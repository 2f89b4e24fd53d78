"""Evaluation: accuracy, FID, conditional fidelity and sample export."""
from src.evaluation.export import export_grid, export_tensors
from src.evaluation.metrics import (
    FeatureStats,
    TeacherFeatureExtractor,
    accuracy,
    conditional_fidelity,
    feature_stats,
    fid,
    per_class_fidelity,
)

__all__ = [
    "FeatureStats",
    "TeacherFeatureExtractor",
    "accuracy",
    "conditional_fidelity",
    "export_grid",
    "export_tensors",
    "feature_stats",
    "fid",
    "per_class_fidelity",
]
