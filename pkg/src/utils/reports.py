"""Evaluation reports and the per-step metrics log."""
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class EvaluationReport(BaseModel):
    """JSON evaluation report written by ``eval`` and at the end of ``distill``.

    FID fields stay ``None`` when no real dataset is configured; ``fid_notice``
    then says why.
    """

    model_config = ConfigDict(extra="forbid")

    accuracy: Optional[float] = Field(None, ge=0, le=1)
    teacher_accuracy: Optional[float] = Field(None, ge=0, le=1)
    fid: Optional[float] = Field(None, ge=0)
    fid_noise: Optional[float] = Field(None, ge=0)
    fid_notice: Optional[str] = None
    conditional_fidelity: float = Field(ge=0, le=1)
    per_class_fidelity: Dict[str, float] = Field(default_factory=dict)
    n_samples: int = Field(ge=0)
    extractor_id: str
    seed: int
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())


def write_report(report: EvaluationReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    return path


def read_report(path: Path) -> EvaluationReport:
    return EvaluationReport.model_validate_json(Path(path).read_text())


class MetricsLog:
    """JSON-lines file with one record per optimizer step."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")
            f.flush()

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        if not self.path.exists():
            return
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def read(self) -> List[Dict[str, Any]]:
        return list(self)

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def truncate(self, steps: int) -> None:
        """Keep only records whose ``step`` is below ``steps`` (used on resume)."""
        kept = [r for r in self if r.get("step", 0) < steps]
        with open(self.path, "w") as f:
            for record in kept:
                f.write(json.dumps(record) + "\n")
