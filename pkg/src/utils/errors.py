"""Error types raised across the toolkit.

Each error also derives from the closest builtin so callers that only know
about ``ValueError``/``IndexError``/``OSError`` keep working.
"""
from typing import Any, Dict, List, Optional


class DistillError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DistillError, ValueError):
    """Invalid or inconsistent configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        if len(self.problems) == 1:
            message = self.problems[0]
        else:
            message = "Configuration errors:\n" + "\n".join(f"- {p}" for p in self.problems)
        super().__init__(message)


class DimensionError(DistillError, ValueError):
    """Tensor shape does not match what a network or loss expects."""


class PreconditionError(DistillError, ValueError):
    """An operation was called outside its domain (e.g. batch too small)."""


class StructureError(DistillError, ValueError):
    """Two structures that must line up (layer lists, models) do not."""


class LabelRangeError(DistillError, IndexError):
    """A class id lies outside [0, num_classes - 1]."""


class DatasetError(DistillError, OSError):
    """Dataset directory is missing, malformed or corrupt."""


class CheckpointError(DistillError, OSError):
    """Checkpoint bundle is missing or unreadable."""


class DivergenceError(DistillError, RuntimeError):
    """A loss became non-finite during training.

    Attributes:
        record: The loss record of the failing step (component -> value)
        components: Names of the components that were not finite
    """

    def __init__(self, stage: str, record: Dict[str, Any], components: List[str],
                 step: Optional[int] = None):
        self.stage = stage
        self.record = dict(record)
        self.components = list(components)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"{stage} loss diverged{where}: non-finite {', '.join(components)} "
            f"(record={self.record})"
        )


def check_label_range(labels, num_classes: int) -> None:
    """Raise ``LabelRangeError`` unless every label is in [0, num_classes - 1]."""
    if labels.numel() == 0:
        return
    low = int(labels.min())
    high = int(labels.max())
    if low < 0 or high >= num_classes:
        raise LabelRangeError(
            f"label out of range: got [{low}, {high}], expected [0, {num_classes - 1}]"
        )
