"""Convert a locally downloaded torchvision dataset into the PNG-per-class layout.

Nothing is downloaded; point ``--source`` at a directory that already holds the
torchvision files.

    python scripts/export_dataset.py --name mnist --source ~/datasets --dest data/mnist
"""
import argparse
import logging
import sys
from pathlib import Path

import torch
from torchvision import datasets, transforms

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.data.datasets import write_manifest, write_split  # noqa: E402
from src.utils.config import setup_logging  # noqa: E402

logger = logging.getLogger(__name__)

SOURCES = {
    "mnist": datasets.MNIST,
    "fashion-mnist": datasets.FashionMNIST,
    "cifar10": datasets.CIFAR10,
}


def export(name: str, source: Path, dest: Path, limit: int = 0) -> None:
    dataset_cls = SOURCES[name]
    for split, train in (("train", True), ("test", False)):
        dataset = dataset_cls(str(source), train=train, download=False,
                              transform=transforms.ToTensor())
        count = len(dataset) if not limit else min(limit, len(dataset))
        images = torch.stack([dataset[i][0] for i in range(count)])
        labels = [int(dataset[i][1]) for i in range(count)]
        written = write_split(dest, split, images, labels)
        logger.info("[EXPORT] %s/%s: %d images", name, split, written)
    manifest = write_manifest(dest)
    logger.info("[EXPORT] Manifest written to %s", manifest)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--name", choices=sorted(SOURCES), default="mnist")
    parser.add_argument("--source", type=Path, required=True)
    parser.add_argument("--dest", type=Path, required=True)
    parser.add_argument("--limit", type=int, default=0, help="max images per split (0 = all)")
    args = parser.parse_args()
    setup_logging()
    try:
        export(args.name, args.source, args.dest, args.limit)
    except RuntimeError as e:
        # torchvision raises RuntimeError when the files are not present
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
