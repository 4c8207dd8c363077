"""
Helpers for writing run artifacts as structured text.
- CSV files with a fixed column order
- JSON documents with sorted keys (byte-stable for identical content)
- Config hashing for artifact directories
- UTC run stamps for manifests and generated file names
"""

from __future__ import annotations

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import pandas as pd

logger = logging.getLogger(__name__)


def save_csv(df: pd.DataFrame, path: Path, columns: Sequence[str]) -> Path:
    """Save ``df`` to ``path`` with exactly ``columns`` in that order.

    Missing columns are added empty, as the ingestion flows always did, so
    downstream readers can rely on the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = df.copy()
    for c in columns:
        if c not in df.columns:
            df[c] = None
    df = df[list(columns)]
    df.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    logger.info(f"Saved {len(df)} rows to {path}")
    return path


def write_json(payload: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON encoding of ``payload``."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run_stamp(stamp: Optional[str] = None) -> str:
    """A given non-blank stamp is kept; otherwise UTC now as YYYYMMDD_HHMMSS."""
    if stamp and stamp.strip():
        return stamp
    return datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")


def join_ints(values: Iterable[int]) -> str:
    return " ".join(str(int(v)) for v in values)


def split_ints(cell: Any) -> list[int]:
    if cell is None or (isinstance(cell, float) and pd.isna(cell)):
        return []
    text = str(cell).strip()
    return [int(tok) for tok in text.split()] if text else []


def _json_default(value: Any) -> Any:
    # numpy scalars, paths and infinities show up in reports
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
