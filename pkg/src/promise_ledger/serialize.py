"""JSON and CSV output with round-trip float formatting.

Floats are written with 17 significant digits so that parsing the text
recovers the exact binary value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, is_dataclass
from typing import Any, Sequence

import numpy as np


def format_float(value: float) -> str:
    """17-significant-digit representation (``nan``/``inf`` spelled out)."""
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


class _Float17:
    """Marker that lets the JSON encoder emit a preformatted number."""

    def __init__(self, text: str):
        self.text = text


def to_jsonable(obj: Any) -> Any:
    """Convert numpy arrays, tuples and dataclasses to JSON-ready values."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else format_float(v)
    return obj


def dumps(obj: Any) -> str:
    """JSON text with every finite float written at 17 significant digits."""
    data = to_jsonable(obj)

    def render(v: Any, indent: int) -> str:
        pad = "  " * (indent + 1)
        end = "  " * indent
        if isinstance(v, float):
            return format_float(v)
        if isinstance(v, dict):
            if not v:
                return "{}"
            items = [f"{pad}{json.dumps(k)}: {render(x, indent + 1)}" for k, x in v.items()]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(v, list):
            if not v:
                return "[]"
            if all(not isinstance(x, (dict, list)) for x in v):
                return "[" + ", ".join(render(x, indent + 1) for x in v) + "]"
            items = [f"{pad}{render(x, indent + 1)}" for x in v]
            return "[\n" + ",\n".join(items) + "\n" + end + "]"
        return json.dumps(v)

    return render(data, 0) + "\n"


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """CSV text with a header row; floats at 17 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row[c]
            out.append(format_float(v) if isinstance(v, (float, np.floating)) else v)
        writer.writerow(out)
    return buf.getvalue()
