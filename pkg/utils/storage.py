"""
Artifact Storage Module
Handles persistence of models, reports and result tables to an output directory
"""
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def _json_default(value: Any) -> Any:
    """Fallback encoder for numpy scalars and arrays"""
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "item"):
        return value.item()
    return str(value)


def _finite(value: Any) -> Any:
    """Replace NaN and infinities by None so the output stays strict JSON"""
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, np.ndarray):
        return _finite(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def dumps_json(payload: Any) -> str:
    """Serialize with full float precision and stable key order"""
    return json.dumps(_finite(payload), allow_nan=False, indent=2, sort_keys=True, default=_json_default)


def atomic_write_text(path: Path, content: str) -> Path:
    """Write content to a temp file next to path, then rename over it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


class ArtifactStore:
    """Manages experiment artifacts in a local output directory"""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self._ensure_dir()

    def _ensure_dir(self):
        """Ensure the output directory exists"""
        if not self.output_dir.exists():
            logger.info(f"Creating output directory: {self.output_dir}")
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _get_path(self, name: str) -> Path:
        return self.output_dir / name

    def _get_checkpoint_path(self, run_id: str) -> Path:
        return self.output_dir / "_checkpoints" / f"{run_id}.json"

    def write_json(self, name: str, payload: Any) -> Path:
        """
        Write a JSON artifact atomically

        Returns:
            Path to the written file
        """
        path = atomic_write_text(self._get_path(name), dumps_json(payload) + "\n")
        logger.info(f"Wrote {path}")
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """Write a table as UTF-8 CSV atomically"""
        content = frame.to_csv(index=False, lineterminator="\n")
        path = atomic_write_text(self._get_path(name), content)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_text(self, name: str, content: str) -> Path:
        path = atomic_write_text(self._get_path(name), content)
        logger.debug(f"Wrote {path}")
        return path

    def read_json(self, name: str) -> Optional[Dict[str, Any]]:
        """Read a JSON artifact, None when it does not exist"""
        path = self._get_path(name)
        if not path.exists():
            logger.warning(f"Artifact not found: {path}")
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def write_checkpoint(self, run_id: str, checkpoint_data: Dict[str, Any]) -> Path:
        """
        Write a checkpoint with partial results of a run

        Args:
            run_id: Identifier of the run (usually the config fingerprint)
            checkpoint_data: Partial state, e.g. finished grid records

        Returns:
            Path to the checkpoint file
        """
        checkpoint = {
            "run_id": run_id,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "data": checkpoint_data,
        }
        path = atomic_write_text(self._get_checkpoint_path(run_id), dumps_json(checkpoint) + "\n")
        logger.info(f"Wrote checkpoint to {path}")
        return path

    def read_checkpoint(self, run_id: str) -> Optional[Dict[str, Any]]:
        path = self._get_checkpoint_path(run_id)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def list_artifacts(self) -> List[str]:
        """List artifact names, checkpoints excluded"""
        return sorted(
            p.name for p in self.output_dir.iterdir()
            if p.is_file() and not p.name.startswith(".")
        )

    def summary(self) -> Dict[str, Any]:
        """Get summary of stored artifacts"""
        summary = {"output_dir": str(self.output_dir), "artifacts": {}, "total_size_bytes": 0}
        for name in self.list_artifacts():
            size = self._get_path(name).stat().st_size
            summary["artifacts"][name] = size
            summary["total_size_bytes"] += size
        return summary
