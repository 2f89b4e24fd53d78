"""Shared fixtures: tiny network specs, a warmed-up teacher and a toy PNG dataset."""
from pathlib import Path

import pytest
import torch

from src.data.datasets import write_manifest, write_split
from src.models.generator import GeneratorSpec
from src.models.nets import ClassifierSpec, build_classifier

NUM_CLASSES = 4
IMAGE_SHAPE = (1, 8, 8)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on the toy dataset")


@pytest.fixture
def teacher_spec():
    return ClassifierSpec(arch_name="cnn-small", num_classes=NUM_CLASSES,
                          input_shape=IMAGE_SHAPE, feature_dim=16)


@pytest.fixture
def student_spec():
    return ClassifierSpec(arch_name="cnn-small", num_classes=NUM_CLASSES,
                          input_shape=IMAGE_SHAPE, feature_dim=8)


@pytest.fixture
def generator_spec():
    return GeneratorSpec(latent_dim=8, num_classes=NUM_CLASSES, output_shape=IMAGE_SHAPE,
                         base_channels=8)


@pytest.fixture
def teacher(teacher_spec):
    """A teacher whose BN running statistics moved away from their (0, 1) init."""
    torch.manual_seed(0)
    model = build_classifier(teacher_spec)
    model.train()
    with torch.no_grad():
        for _ in range(5):
            model(torch.randn(16, *IMAGE_SHAPE) * 2.0 + 0.5)
    return model.eval()


def toy_images(labels: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """[0, 1] images where class c lights up quadrant c, plus a little noise."""
    rng = torch.Generator().manual_seed(seed)
    images = torch.rand(len(labels), *IMAGE_SHAPE, generator=rng) * 0.2
    half = IMAGE_SHAPE[1] // 2
    for i, label in enumerate(labels.tolist()):
        row, col = divmod(label, 2)
        images[i, :, row * half:(row + 1) * half, col * half:(col + 1) * half] += 0.8
    return images.clamp(0, 1)


def make_toy_dataset(root: Path, n_train: int = 24, n_test: int = 8) -> Path:
    for split, per_class, seed in (("train", n_train, 0), ("test", n_test, 1)):
        labels = torch.arange(NUM_CLASSES).repeat_interleave(per_class)
        write_split(root, split, toy_images(labels, seed), labels)
    write_manifest(root)
    return root


@pytest.fixture
def toy_dataset(tmp_path):
    return make_toy_dataset(tmp_path / "toy")
