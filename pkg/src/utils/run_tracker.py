"""Run tracking for CLI commands and ablation cells.

One JSON file per run under ``<out>/runs/`` so an interrupted ablation matrix
can see which cells already completed.
"""

import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class RunStatus:
    """Run status constants"""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class RunRecord:
    """Run data structure"""
    def __init__(
        self,
        run_id: str,
        command: str,
        status: str = RunStatus.PENDING,
        result: Optional[Dict[str, Any]] = None,
        error: Optional[str] = None,
        metadata: Optional[Dict[str, Any]] = None
    ):
        self.run_id = run_id
        self.command = command
        self.status = status
        self.result = result or {}
        self.error = error
        self.metadata = metadata or {}
        self.created_at = time.time()
        self.updated_at = time.time()

    def to_dict(self) -> dict:
        return {
            'run_id': self.run_id,
            'command': self.command,
            'status': self.status,
            'result': self.result,
            'error': self.error,
            'metadata': self.metadata,
            'created_at': self.created_at,
            'updated_at': self.updated_at
        }

    @staticmethod
    def from_dict(data: dict) -> 'RunRecord':
        record = RunRecord(
            run_id=data['run_id'],
            command=data['command'],
            status=data['status'],
            result=data.get('result'),
            error=data.get('error'),
            metadata=data.get('metadata')
        )
        record.created_at = data.get('created_at', time.time())
        record.updated_at = data.get('updated_at', time.time())
        return record


class FileRunTracker:
    """Persists each run as ``<storage_dir>/<run_id>.json``."""

    def __init__(self, storage_dir: Path):
        self.storage_dir = Path(storage_dir)
        self.storage_dir.mkdir(parents=True, exist_ok=True)

    def _get_run_path(self, run_id: str) -> Path:
        return self.storage_dir / f"{run_id}.json"

    def create_run(self, run_id: str, command: str,
                   metadata: Optional[Dict] = None) -> RunRecord:
        record = RunRecord(run_id=run_id, command=command, metadata=metadata)
        self._save_run(record)
        return record

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        run_path = self._get_run_path(run_id)
        if not run_path.exists():
            return None

        try:
            with open(run_path, 'r') as f:
                data = json.load(f)
            return RunRecord.from_dict(data)
        except (OSError, json.JSONDecodeError, KeyError) as e:
            logger.warning("[RUNS] Could not read run %s: %s", run_id, e)
            return None

    def update_run(self, run_id: str, **updates) -> Optional[RunRecord]:
        record = self.get_run(run_id)
        if not record:
            return None

        for key, value in updates.items():
            if hasattr(record, key):
                setattr(record, key, value)

        record.updated_at = time.time()
        self._save_run(record)
        return record

    def start(self, run_id: str, command: str, metadata: Optional[Dict] = None) -> RunRecord:
        """Create (or reset) a run and mark it running."""
        record = self.create_run(run_id, command, metadata)
        return self.update_run(record.run_id, status=RunStatus.RUNNING)

    def complete(self, run_id: str, result: Optional[Dict[str, Any]] = None) -> Optional[RunRecord]:
        return self.update_run(run_id, status=RunStatus.COMPLETED, result=result or {})

    def fail(self, run_id: str, error: str) -> Optional[RunRecord]:
        return self.update_run(run_id, status=RunStatus.FAILED, error=error)

    def is_completed(self, run_id: str) -> bool:
        record = self.get_run(run_id)
        return record is not None and record.status == RunStatus.COMPLETED

    def _save_run(self, record: RunRecord):
        run_path = self._get_run_path(record.run_id)
        tmp_path = run_path.with_suffix(".json.tmp")
        with open(tmp_path, 'w') as f:
            json.dump(record.to_dict(), f, indent=2)
        os.replace(tmp_path, run_path)
