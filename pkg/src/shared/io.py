"""Report writers: JSON and CSV with floats at six significant digits."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import pandas as pd

from src.shared.errors import ConfigError

LOGGER = logging.getLogger(__name__)

REPORT_DIGITS = 6


def round_sig(value: float, digits: int = REPORT_DIGITS) -> float:
    if value == 0 or not math.isfinite(value):
        return value
    return float(f"{value:.{digits}g}")


def round_floats(payload: Any, digits: int = REPORT_DIGITS) -> Any:
    """Recursively round every float in a JSON-like structure."""
    if isinstance(payload, bool) or payload is None:
        return payload
    if isinstance(payload, float):
        return round_sig(payload, digits)
    if isinstance(payload, Mapping):
        return {key: round_floats(value, digits) for key, value in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [round_floats(value, digits) for value in payload]
    if hasattr(payload, "item"):  # numpy scalars
        return round_floats(payload.item(), digits)
    return payload


def ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, payload: Any) -> Path:
    ensure_parent(path)
    text = json.dumps(round_floats(payload), indent=2, default=str)
    path.write_text(text + "\n", encoding="utf-8")
    LOGGER.info("Wrote %s", path)
    return path


def read_json(path: Path) -> Any:
    require_files([path])
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path: Path, rows: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], columns: Sequence[str] = ()) -> Path:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=list(columns) or None)
    ensure_parent(path)
    frame.to_csv(path, index=False, float_format=f"%.{REPORT_DIGITS}g")
    LOGGER.info("Wrote %s", path)
    return path


def require_files(paths: Iterable[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError("required input files are missing", missing=missing)


__all__ = ["REPORT_DIGITS", "ensure_parent", "read_json", "require_files", "round_floats", "round_sig", "write_csv", "write_json"]
