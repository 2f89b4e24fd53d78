"""Sample export: per-class PNG grids and raw tensors."""
import logging
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import torch
from PIL import Image
from torchvision.utils import make_grid

from src.evaluation.metrics import synthesize
from src.models.generator import ConditionalGenerator
from src.utils.errors import check_label_range

logger = logging.getLogger(__name__)

GRID_PADDING = 2


def to_uint8(images: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] pixels to integers round(255 * (x + 1) / 2) in [0, 255]."""
    scaled = torch.round((images.clamp(-1.0, 1.0) + 1.0) * 127.5)
    return scaled.to(torch.uint8)


def class_samples(generator: ConditionalGenerator, classes: Sequence[int],
                  samples_per_class: int, seed: int = 0) -> Dict[int, torch.Tensor]:
    """Samples per class; class ``c`` always uses noise seed ``seed + c``."""
    labels_tensor = torch.as_tensor(list(classes), dtype=torch.long)
    check_label_range(labels_tensor, generator.num_classes)
    samples = {}
    for class_id in classes:
        labels = torch.full((samples_per_class,), int(class_id), dtype=torch.long)
        samples[int(class_id)] = synthesize(generator, samples_per_class,
                                            seed + int(class_id), labels)
    return samples


def save_grid(rows: Sequence[torch.Tensor], path: Path) -> Path:
    """Write equally sized rows of [-1, 1] images as one PNG, one row per entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples_per_row = rows[0].shape[0]
    tiles = torch.cat(list(rows)).float()
    grid = make_grid(tiles, nrow=samples_per_row, padding=GRID_PADDING, pad_value=-1.0)
    pixels = to_uint8(grid).permute(1, 2, 0).numpy()
    if tiles.shape[1] == 1:
        # make_grid repeats single-channel tiles to RGB
        image = Image.fromarray(np.ascontiguousarray(pixels[:, :, 0]))
    else:
        image = Image.fromarray(np.ascontiguousarray(pixels[:, :, :3]))
    image.save(path, format="PNG")
    return path


def export_grid(generator: ConditionalGenerator, classes: Sequence[int],
                samples_per_class: int, path: Path, seed: int = 0) -> Path:
    """Render ``samples_per_class`` samples for each class as a PNG grid.

    Row ``r`` holds class ``classes[r]``; re-exporting with the same seed
    writes an identical file.
    """
    if not classes or samples_per_class < 1:
        raise ValueError("export_grid needs at least one class and one sample per class")
    samples = class_samples(generator, classes, samples_per_class, seed)
    save_grid([samples[int(c)] for c in classes], path)
    logger.info("[EXPORT] Grid of %d x %d samples -> %s", len(classes), samples_per_class, path)
    return Path(path)


def export_tensors(samples: Dict[int, torch.Tensor], directory: Path) -> Dict[int, Path]:
    """Save each class's raw samples as ``class_<id>.pt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for class_id, images in samples.items():
        paths[class_id] = directory / f"class_{class_id}.pt"
        torch.save(images.clone(), paths[class_id])
    return paths
