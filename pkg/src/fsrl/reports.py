"""Deterministic CSV/JSON writers. Every file gets the producing config alongside it."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence


def fmt(value: Any) -> str:
    """Stable text for a CSV cell: shortest round-trip floats, empty for None/NaN."""
    if value is None:
        return ""
    if hasattr(value, "item"):  # numpy scalar; np.float64 is also a float, so unwrap first
        return fmt(value.item())
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def config_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Mapping[str, Any] | Sequence[Any]],
    config: Mapping | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row.get(h) for h in header] if isinstance(row, Mapping) else list(row)
            w.writerow([fmt(v) for v in values])
    if config is not None:
        write_json(config_sidecar(path), {"config": config})
    return path


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o: Any):
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
