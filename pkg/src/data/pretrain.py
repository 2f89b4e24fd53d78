"""Teacher pre-training on real data and teacher checkpoint loading."""
import logging
import math
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional

import torch
import torch.nn.functional as F
from tqdm import tqdm

from src.data.datasets import DatasetSpec, load_dataset, make_loader
from src.evaluation.metrics import accuracy
from src.models.nets import (
    BNStatsSnapshot,
    Classifier,
    ClassifierSpec,
    PixelNormalizer,
    build_classifier,
    capture_bn_stats,
)
from src.utils.checkpoint import CheckpointBundle, save_bundle
from src.utils.errors import CheckpointError, DivergenceError

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "bn_snapshot"


class PretrainResult(NamedTuple):
    checkpoint: Path
    snapshot: BNStatsSnapshot
    accuracy: float
    teacher: Classifier


class TeacherCheckpoint(NamedTuple):
    teacher: Classifier
    snapshot: BNStatsSnapshot
    normalizer: PixelNormalizer
    manifest: Dict[str, Any]


def pretrain_teacher(spec: ClassifierSpec, data: DatasetSpec, epochs: int, out: Path, *,
                     test_data: Optional[DatasetSpec] = None, lr: float = 0.05,
                     momentum: float = 0.9, weight_decay: float = 5e-4,
                     batch_size: int = 128, seed: int = 0, device="cpu",
                     subset: Optional[int] = None, verify: bool = True) -> PretrainResult:
    """Train a classifier from scratch, capture its BN statistics and save both.

    Accuracy is measured on ``test_data`` when given, otherwise on the
    un-augmented training split.

    Raises:
        DivergenceError: The training loss became non-finite
    """
    torch.manual_seed(seed)
    device = torch.device(device)
    train_set = load_dataset(data, verify=verify, subset=subset, seed=seed)
    loader = make_loader(train_set, batch_size, shuffle=True, seed=seed)
    model = build_classifier(spec).to(device)

    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum,
                                weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer,
                                                           T_max=max(1, epochs * len(loader)))
    step = 0
    for epoch in tqdm(range(epochs), desc="pretrain", unit="epoch"):
        model.train()
        running = 0.0
        for images, labels in loader:
            images, labels = images.to(device), labels.to(device)
            loss = F.cross_entropy(model(images), labels)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError("pretrain", {"ce": value}, ["ce"], step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            running += value
            step += 1
        logger.info("[PRETRAIN] Epoch %d/%d: loss %.4f", epoch + 1, epochs,
                    running / max(1, len(loader)))

    eval_spec = test_data or data.model_copy(update={"random_crop_pad": 0,
                                                     "horizontal_flip": False})
    eval_set = load_dataset(eval_spec, verify=verify,
                            subset=None if test_data else subset, seed=seed)
    acc = accuracy(model, make_loader(eval_set, 256))
    snapshot = capture_bn_stats(model)
    logger.info("[PRETRAIN] %s accuracy %.4f (%d BN layers)", eval_spec.split, acc, len(snapshot))

    checkpoint = save_bundle(
        out,
        {"teacher": model},
        {
            "kind": "teacher",
            "specs": {"teacher": spec.model_dump(mode="json")},
            "normalization": {"mean": list(data.mean), "std": list(data.std)},
            "dataset": data.name,
            "eval_split": eval_spec.split,
            "accuracy": acc,
            "epochs": epochs,
            "step": step,
            "seed": seed,
        },
        extra_tensors={SNAPSHOT_NAME: snapshot.to_state()},
    )
    return PretrainResult(checkpoint, snapshot, acc, model)


def load_teacher(directory: Path, device="cpu", dtype: torch.dtype = torch.float32
                 ) -> TeacherCheckpoint:
    """Rebuild a pre-trained teacher, its BN snapshot and input normalization.

    Raises:
        CheckpointError: Missing bundle or not a teacher bundle
    """
    bundle = CheckpointBundle(directory)
    if bundle.manifest.get("kind") != "teacher":
        raise CheckpointError(f"{directory} is not a teacher checkpoint")
    spec = ClassifierSpec.model_validate(bundle.manifest["specs"]["teacher"])
    teacher = bundle.load_into("teacher", build_classifier(spec))
    teacher = teacher.to(device=device, dtype=dtype).eval()
    snapshot = BNStatsSnapshot.from_state(bundle.tensors(SNAPSHOT_NAME)).to(device, dtype)
    norm = bundle.manifest["normalization"]
    return TeacherCheckpoint(teacher, snapshot, PixelNormalizer(norm["mean"], norm["std"]),
                             bundle.manifest)
