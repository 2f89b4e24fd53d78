"""Seeding, determinism switches and numeric mode."""
import logging
import os
import random
import warnings

import numpy as np
import torch

from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
}


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch (CPU and CUDA) generators."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def configure_determinism(enabled: bool) -> None:
    """Force deterministic kernels (slower) or restore the defaults."""
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        warnings.warn(
            "Deterministic mode is on. This turns on deterministic kernels, "
            "which can slow down training considerably.",
            stacklevel=2,
        )
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled


def resolve_dtype(name: str) -> torch.dtype:
    """Map a config dtype name to a torch dtype."""
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown dtype '{name}', expected one of {sorted(DTYPES)}"
        ) from None


def resolve_device(name: str) -> torch.device:
    """Return the requested device, falling back to CPU when CUDA is absent."""
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("[DEVICE] %s requested but CUDA is unavailable, using cpu", name)
        return torch.device("cpu")
    return torch.device(name)
