"""Directory-per-class PNG datasets with a JSON manifest.

Layout::

    <root>/manifest.json
    <root>/<split>/<class name>/<file>.png

Only teacher pre-training and evaluation read these datasets.
"""
import hashlib
import json
import logging
from functools import partial
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, Dataset, Subset
from torchvision import transforms
from torchvision.datasets import ImageFolder

from src.utils.errors import DatasetError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")
IMAGE_SUFFIX = ".png"


class DatasetSpec(BaseModel):
    """Where a split lives and how its images are preprocessed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "mnist"
    root: str
    split: Literal["train", "test"] = "train"
    mean: Tuple[float, ...] = (0.1307,)
    std: Tuple[float, ...] = (0.3081,)
    random_crop_pad: int = Field(0, ge=0)
    horizontal_flip: bool = False

    @model_validator(mode="after")
    def _check(self):
        if len(self.mean) != len(self.std) or not self.mean:
            raise ValueError(f"mean/std need one entry per channel, got {self.mean} / {self.std}")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std entries must be positive, got {self.std}")
        if self.split == "test" and (self.random_crop_pad or self.horizontal_flip):
            raise ValueError("the test split is never augmented")
        return self

    @property
    def augmented(self) -> bool:
        return bool(self.random_crop_pad or self.horizontal_flip)


# ==================== MANIFEST ====================

def _class_dirs(split_dir: Path) -> List[str]:
    return [p.name for p in split_dir.iterdir() if p.is_dir()]


def _sort_classes(names) -> List[str]:
    names = set(names)
    if all(n.isdigit() for n in names):
        return sorted(names, key=int)
    return sorted(names)


def _image_files(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob(f"*{IMAGE_SUFFIX}") if p.is_file())


def compute_checksum(root: Path) -> str:
    """SHA-256 over every image's relative path and byte size."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in _image_files(root):
        digest.update(f"{path.relative_to(root).as_posix()}:{path.stat().st_size}\n".encode())
    return digest.hexdigest()


def build_manifest(root: Path) -> Dict:
    """Scan ``root`` and describe it: classes, per-split counts, image shape, checksum."""
    root = Path(root)
    splits = [s for s in SPLITS if (root / s).is_dir()]
    if not splits:
        raise DatasetError(f"no train/ or test/ directory under {root}")
    classes = _sort_classes(name for s in splits for name in _class_dirs(root / s))
    counts = {
        split: {c: len(list((root / split / c).glob(f"*{IMAGE_SUFFIX}")))
                if (root / split / c).is_dir() else 0 for c in classes}
        for split in splits
    }
    files = _image_files(root)
    if not files:
        raise DatasetError(f"no {IMAGE_SUFFIX} files under {root}")
    with Image.open(files[0]) as first:
        channels = len(first.getbands())
        image_shape = [channels, first.height, first.width]
    return {
        "classes": classes,
        "counts": counts,
        "image_shape": image_shape,
        "checksum": compute_checksum(root),
    }


def write_manifest(root: Path) -> Path:
    manifest = build_manifest(root)
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(root: Path) -> Dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"dataset manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt dataset manifest {path}: {e}") from e


def write_split(root: Path, split: str, images: torch.Tensor, labels: Sequence[int],
                class_names: Optional[Sequence[str]] = None) -> int:
    """Write [0, 1] images (N x C x H x W) as PNGs under ``root/split/<class>/``.

    Returns:
        Number of files written
    """
    if split not in SPLITS:
        raise DatasetError(f"unknown split '{split}', expected one of {SPLITS}")
    labels = [int(label) for label in labels]
    if images.shape[0] != len(labels):
        raise DatasetError(f"{images.shape[0]} images but {len(labels)} labels")
    pixels = (images.clamp(0, 1) * 255).round().to(torch.uint8)
    for index, (image, label) in enumerate(zip(pixels, labels)):
        name = class_names[label] if class_names else str(label)
        class_dir = Path(root) / split / name
        class_dir.mkdir(parents=True, exist_ok=True)
        array = image.permute(1, 2, 0).numpy()
        if array.shape[2] == 1:
            array = array[:, :, 0]
        Image.fromarray(np.ascontiguousarray(array)).save(class_dir / f"{index:06d}{IMAGE_SUFFIX}")
    return len(labels)


# ==================== LOADING ====================

def _load_image(path: str, mode: str) -> Image.Image:
    try:
        with Image.open(path) as image:
            return image.convert(mode)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e


class ManifestImageFolder(ImageFolder):
    """ImageFolder whose class ids follow the manifest's class order."""

    def __init__(self, root: Path, classes: Sequence[str], mode: str, transform=None):
        self._manifest_classes = list(classes)
        super().__init__(str(root), transform=transform, loader=partial(_load_image, mode=mode))

    def find_classes(self, directory):
        present = set(_class_dirs(Path(directory)))
        classes = [c for c in self._manifest_classes if c in present]
        return classes, {c: self._manifest_classes.index(c) for c in classes}


def build_transform(spec: DatasetSpec, image_size: Tuple[int, int]) -> transforms.Compose:
    """Optional augmentation, then to [0, 1], then per-channel standardization."""
    steps = []
    if spec.random_crop_pad:
        steps.append(transforms.RandomCrop(image_size, padding=spec.random_crop_pad))
    if spec.horizontal_flip:
        steps.append(transforms.RandomHorizontalFlip())
    steps += [transforms.ToTensor(), transforms.Normalize(spec.mean, spec.std)]
    return transforms.Compose(steps)


def load_dataset(spec: DatasetSpec, verify: bool = True, subset: Optional[int] = None,
                 seed: int = 0) -> Dataset:
    """Dataset of (normalized image, label) pairs for ``spec.split``.

    Args:
        spec: Location and preprocessing
        verify: Recompute the checksum and compare it with the manifest
        subset: Keep a seeded random subset of this many samples
        seed: Seed of the subset selection

    Raises:
        DatasetError: Missing directory, manifest mismatch or unreadable images
    """
    root = Path(spec.root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    manifest = read_manifest(root)
    split_dir = root / spec.split
    if not split_dir.is_dir():
        raise DatasetError(f"split '{spec.split}' not found: {split_dir}")
    if verify and compute_checksum(root) != manifest["checksum"]:
        raise DatasetError(f"checksum mismatch under {root}; files changed since the manifest")

    channels, height, width = manifest["image_shape"]
    if len(spec.mean) != channels:
        raise DatasetError(
            f"{root} has {channels}-channel images but normalization has {len(spec.mean)} entries"
        )
    dataset = ManifestImageFolder(split_dir, manifest["classes"],
                                  mode="L" if channels == 1 else "RGB",
                                  transform=build_transform(spec, (height, width)))
    logger.info("[DATA] %s/%s: %d images, %d classes", spec.name, spec.split,
                len(dataset), len(manifest["classes"]))
    if subset is not None and subset < len(dataset):
        indices = torch.randperm(len(dataset), generator=torch.Generator().manual_seed(seed))
        dataset = Subset(dataset, indices[:subset].tolist())
    return dataset


def make_loader(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0,
                num_workers: int = 0) -> DataLoader:
    """DataLoader whose shuffle order is fixed by ``seed``.

    Augmentation draws use torch's global generator, so seed it as well for a
    reproducible augmented stream.
    """
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=torch.Generator().manual_seed(seed),
    )
