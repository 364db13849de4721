"""
Report files and run manifests.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

import structlog
from pydantic import BaseModel, ConfigDict

from errors import ContractError

log = structlog.get_logger()

FORMATS = ("csv", "json")
TIMING_COLUMNS = ("seconds",)
MANIFEST_NAME = "manifest.json"


def _cell(value: Any) -> Any:
    """Normalise one value: bools to ints, floats to 6 significant digits."""
    if isinstance(value, bool):
        return int(value)
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float):
        return float(f"{value:.6g}") if math.isfinite(value) else value
    return value


def _columns(rows: Sequence[Mapping[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    return columns


def _text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_report(results: Sequence[Mapping[str, Any]], path: Union[str, Path], fmt: str = "csv") -> Path:
    """Write rows as CSV or JSON with stable key order.

    Columns follow first appearance across the rows; floats are written with
    6 significant digits so CSV and JSON carry the same values.
    """
    if fmt not in FORMATS:
        raise ContractError(f"format must be one of {FORMATS}, got {fmt!r}")
    if not results:
        raise ContractError("refusing to write an empty report")
    columns = _columns(results)
    rows = [{c: _cell(row.get(c)) for c in columns} for row in results]
    if fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_text(row[c]) for c in columns])
        text = buf.getvalue()
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    log.debug("report written", path=str(path), rows=len(rows), fmt=fmt)
    return path


def artifact_hash(path: Union[str, Path], exclude_columns: Iterable[str] = TIMING_COLUMNS) -> str:
    """sha256 of a file; CSV files are hashed without their timing columns."""
    path = Path(path)
    data = path.read_bytes()
    excluded = set(exclude_columns)
    if path.suffix == ".csv" and excluded:
        reader = csv.reader(io.StringIO(data.decode("utf-8")))
        rows = list(reader)
        if rows:
            keep = [i for i, name in enumerate(rows[0]) if name not in excluded]
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            for row in rows:
                writer.writerow([row[i] for i in keep if i < len(row)])
            data = buf.getvalue().encode("utf-8")
    return hashlib.sha256(data).hexdigest()


class RunManifest(BaseModel):
    """Everything needed to re-run a subcommand and check its outputs."""

    model_config = ConfigDict(extra="forbid")

    subcommand: str
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    artifact_hashes: Dict[str, str] = {}

    @classmethod
    def for_outputs(cls, subcommand: str, config: Dict[str, Any], seed: int, inputs: Mapping[str, str],
                    outputs: Mapping[str, Path]) -> "RunManifest":
        return cls(
            subcommand=subcommand, config=config, seed=seed, inputs=dict(inputs),
            outputs={name: Path(p).name for name, p in outputs.items()},
            artifact_hashes={name: artifact_hash(p) for name, p in outputs.items()},
        )

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
