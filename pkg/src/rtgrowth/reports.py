"""Deterministic report writers: canonical JSON and CSV.

Floats are serialized with 17 significant digits so every value round-trips
exactly; keys are sorted and line endings are LF, making reports
byte-identical across repeated runs with the same configuration.
"""

from __future__ import annotations

import json
import math

import numpy as np


def fmt17(x: float) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    x = float(x)
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return f"{x:.17g}"


def _canon(obj, indent: int) -> str:
    pad = "  " * indent
    pad_in = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for k in sorted(obj):
            items.append(f'{pad_in}{json.dumps(str(k))}: '
                         f'{_canon(obj[k], indent + 1)}')
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        if not seq:
            return "[]"
        items = [f"{pad_in}{_canon(v, indent + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt17(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_json(path, obj) -> None:
    text = _canon(obj, 0) + "\n"
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_csv(path, header, rows) -> None:
    """Rows of numbers; floats at 17 significant digits, LF endings."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, str):
                    cells.append(v)
                elif isinstance(v, (int, np.integer)) and not isinstance(v, bool):
                    cells.append(str(int(v)))
                else:
                    cells.append(f"{float(v):.17g}")
            fh.write(",".join(cells) + "\n")
