"""Deterministic report serialization.

Reports are JSON with sorted keys, floats at 17 significant digits and no
timestamps, so identical runs produce byte-identical files; tables go to CSV
sidecars with the same float format.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

__all__ = ["dumps", "write_json", "write_csv"]


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    return f"{x:.17g}"


def _serialize(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') \
            .replace("\n", "\\n").replace("\t", "\\t") + '"'
    if isinstance(obj, np.ndarray):
        return _serialize(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_serialize(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        return "{" + ", ".join(f'{_serialize(str(k))}: {_serialize(v)}'
                               for k, v in items) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _serialize(obj) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def write_csv(rows: list[dict], path, columns: list[str] | None = None) -> None:
    """Plain CSV with 17-significant-digit floats and a fixed column order."""
    if columns is None:
        columns = list(rows[0]) if rows else []

    def cell(v) -> str:
        if v is None:
            return ""
        if isinstance(v, (float, np.floating)):
            return "" if math.isnan(float(v)) else f"{float(v):.17g}"
        if isinstance(v, (bool, np.bool_)):
            return "1" if v else "0"
        return str(v)

    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(cell(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")
