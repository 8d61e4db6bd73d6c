"""Report files: sorted-key JSON, versioned CSV, digests and the timings sidecar."""

import csv
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Union

from pydantic import BaseModel

from .. import __version__
from ..models import SCHEMA_VERSION, RunManifest
from ..utils import get_logger, InputOutputError
from ..workbench import checkpoint_digest

logger = get_logger(__name__)

PathLike = Union[str, Path]


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def input_digest(path: PathLike) -> str:
    """sha256 of a file, or of manifest + weights for a checkpoint directory."""
    path = Path(path)
    if path.is_dir():
        return checkpoint_digest(path)
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as e:
        raise InputOutputError(f"cannot read {path}: {e}", path=str(path))


def build_manifest(command: str, config: Mapping[str, Any], inputs: Mapping[str, Optional[PathLike]],
                   seed: int) -> RunManifest:
    return RunManifest(
        command=command,
        config=dict(config),
        input_digests={name: input_digest(path) for name, path in sorted(inputs.items()) if path is not None},
        tool_version=__version__,
        seed=seed,
    )


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputOutputError(f"cannot create {path.parent}: {e}", path=str(path))


def dumps(data: Union[BaseModel, Mapping[str, Any]]) -> str:
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, data: Union[BaseModel, Mapping[str, Any]]) -> Path:
    path = Path(path)
    _ensure_parent(path)
    try:
        path.write_text(dumps(data), encoding="utf-8")
    except OSError as e:
        raise InputOutputError(f"cannot write {path}: {e}", path=str(path))
    logger.info("Report written", path=str(path))
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Every CSV carries ``schema_version`` as its first column."""
    path = Path(path)
    _ensure_parent(path)
    columns = ["schema_version"] + [c for c in header if c != "schema_version"]
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({"schema_version": SCHEMA_VERSION, **row})
    except OSError as e:
        raise InputOutputError(f"cannot write {path}: {e}", path=str(path))
    logger.info("CSV written", path=str(path))
    return path


def timings_path(report_path: PathLike) -> Path:
    report_path = Path(report_path)
    return report_path.with_name(report_path.name + ".timings.json")


def write_timings(report_path: PathLike, started_at: str, phases: Mapping[str, float],
                  finished_at: Optional[str] = None) -> Path:
    """Wall-clock data lives next to the report so the report itself stays reproducible."""
    return write_json(timings_path(report_path), {
        "started_at": started_at,
        "finished_at": finished_at or utc_now(),
        "phase_seconds": dict(phases),
    })
