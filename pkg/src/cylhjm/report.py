"""JSON check reports and CSV detail tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

SCHEMA_VERSION = "1.0.0"


def report_schema_version() -> str:
    return SCHEMA_VERSION


def report_schema() -> dict:
    text = (resources.files("cylhjm") / "schemas" / f"report-{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    jsonschema.validate(report, report_schema())


@dataclass
class Check:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": bool(self.passed), "metrics": _plain(self.metrics)}


@dataclass
class Table:
    """A CSV detail table."""

    name: str
    header: Sequence[str]
    rows: list

    def write(self, directory: Path) -> Path:
        return write_csv(Path(directory) / f"{self.name}.csv", self.header, self.rows)


def _plain(value: Any) -> Any:
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    return value


def build_report(scenario: str, scenario_hash: str, subcommand: str, checks: Iterable[Check], files=()) -> dict:
    checks = [c.to_dict() for c in checks]
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario_hash": scenario_hash,
        "scenario": scenario,
        "subcommand": subcommand,
        "passed": all(c["pass"] for c in checks),
        "files": sorted(str(f) for f in files),
        "checks": checks,
    }


def write_report(path: Path, report: dict) -> Path:
    validate_report(report)
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def format_cell(value: Any) -> str:
    """Fixed 17-significant-digit floats so identical runs give identical bytes."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def write_json(path: Path, data: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(data), indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path
