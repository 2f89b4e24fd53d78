"""Checkpoint bundles: a directory with ``manifest.json`` plus one ``.pt`` per network.

Files are written under temporary names and moved into place, manifest last,
so a bundle whose manifest exists is complete.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import torch
import torch.nn as nn

from src.utils.errors import CheckpointError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRAIN_STATE_NAME = "train_state.pt"
FORMAT_VERSION = 1


def _atomic_save(obj: Any, path: Path) -> None:
    tmp_path = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp_path)
    os.replace(tmp_path, path)


def save_bundle(directory: Path, networks: Mapping[str, nn.Module],
                manifest: Dict[str, Any],
                extra_tensors: Optional[Mapping[str, Any]] = None,
                train_state: Optional[Dict[str, Any]] = None) -> Path:
    """Write a bundle.

    Args:
        directory: Bundle directory (created if missing)
        networks: name -> module; each saved as ``<name>.pt`` state dict
        manifest: JSON-serializable description (specs, step, seed, ...)
        extra_tensors: name -> tensor map saved as ``<name>.pt`` (e.g. a BN snapshot)
        train_state: Optimizer/scheduler/RNG state for resuming

    Returns:
        The bundle directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, module in networks.items():
        _atomic_save(module.state_dict(), directory / f"{name}.pt")
        files[name] = f"{name}.pt"
    for name, value in (extra_tensors or {}).items():
        _atomic_save(value, directory / f"{name}.pt")
        files[name] = f"{name}.pt"
    if train_state is not None:
        _atomic_save(train_state, directory / TRAIN_STATE_NAME)

    full_manifest = dict(manifest)
    full_manifest["format_version"] = FORMAT_VERSION
    full_manifest["files"] = files
    full_manifest["has_train_state"] = train_state is not None
    manifest_path = directory / MANIFEST_NAME
    tmp_path = manifest_path.with_name(MANIFEST_NAME + ".tmp")
    tmp_path.write_text(json.dumps(full_manifest, indent=2))
    os.replace(tmp_path, manifest_path)
    logger.info("[CHECKPOINT] Saved %s (%s)", directory, ", ".join(sorted(files)))
    return directory


class CheckpointBundle:
    """Read side of a bundle directory."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        manifest_path = self.directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
        try:
            self.manifest: Dict[str, Any] = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {e}") from e

    def __contains__(self, name: str) -> bool:
        return name in self.manifest.get("files", {})

    def _load(self, name: str, weights_only: bool = True) -> Any:
        if name not in self:
            raise CheckpointError(f"checkpoint {self.directory} has no entry '{name}'")
        path = self.directory / self.manifest["files"][name]
        try:
            return torch.load(path, map_location="cpu", weights_only=weights_only)
        except (OSError, RuntimeError) as e:
            raise CheckpointError(f"cannot read {path}: {e}") from e

    def state_dict(self, name: str) -> Dict[str, torch.Tensor]:
        return self._load(name)

    def load_into(self, name: str, module: nn.Module) -> nn.Module:
        module.load_state_dict(self.state_dict(name))
        return module

    def tensors(self, name: str) -> Any:
        return self._load(name)

    def train_state(self) -> Dict[str, Any]:
        path = self.directory / TRAIN_STATE_NAME
        if not self.manifest.get("has_train_state") or not path.exists():
            raise CheckpointError(f"checkpoint {self.directory} has no training state")
        try:
            # scheduler state holds a Counter, which weights_only loading rejects
            return torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError) as e:
            raise CheckpointError(f"cannot read {path}: {e}") from e
