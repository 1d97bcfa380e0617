from __future__ import annotations
import csv
import json
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from packaging.specifiers import SpecifierSet
from packaging.version import InvalidVersion, Version

from .errors import SchemaVersionError

SCHEMA_VERSION = "1.0"
SUPPORTED_SCHEMAS = SpecifierSet(">=1,<2")


def to_serializable(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: to_serializable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {_key(k): to_serializable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [to_serializable(x) for x in items]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def check_schema(data: dict, source: str) -> Version:
    """Validate the ``schema_version`` field of a loaded document."""
    raw = data.get("schema_version") if isinstance(data, dict) else None
    if raw is None:
        raise SchemaVersionError(f"{source}: missing schema_version")
    try:
        version = Version(str(raw))
    except InvalidVersion as e:
        raise SchemaVersionError(f"{source}: invalid schema_version '{raw}': {e}") from e
    if version not in SUPPORTED_SCHEMAS:
        raise SchemaVersionError(
            f"{source}: schema_version {version} not in supported range {SUPPORTED_SCHEMAS}"
        )
    return version


def dump_json(obj: Any, path: Path) -> None:
    """Write ``obj`` as deterministic JSON (sorted keys, trailing newline)."""
    text = json.dumps(to_serializable(obj), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, np.generic):
        return _fmt(value.item())
    return value


def _key(key: Any) -> str:
    if isinstance(key, Enum):
        return str(key.value)
    return str(key)

