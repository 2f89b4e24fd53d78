"""Real-data handling for teacher pre-training and evaluation."""
from src.data.datasets import (
    DatasetSpec,
    build_manifest,
    load_dataset,
    make_loader,
    write_manifest,
    write_split,
)

__all__ = [
    "DatasetSpec",
    "build_manifest",
    "load_dataset",
    "make_loader",
    "write_manifest",
    "write_split",
]
