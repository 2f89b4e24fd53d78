"""Classifiers, adapter and conditional generator."""
from src.models.generator import (
    ConditionalGenerator,
    ConditionedNoise,
    GeneratorSpec,
    build_generator,
    generate,
    sample_noise,
)
from src.models.nets import (
    Adapter,
    AdapterSpec,
    BNStatsSnapshot,
    Classifier,
    ClassifierSpec,
    PixelNormalizer,
    build_adapter,
    build_classifier,
)

__all__ = [
    "Adapter", "AdapterSpec", "BNStatsSnapshot", "Classifier", "ClassifierSpec",
    "ConditionalGenerator", "ConditionedNoise", "GeneratorSpec", "PixelNormalizer",
    "build_adapter", "build_classifier", "build_generator", "generate", "sample_noise",
]
