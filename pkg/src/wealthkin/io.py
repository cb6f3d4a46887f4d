"""CSV and JSON export.

CSV files carry a one-line comma-separated header followed by rows of
numbers written with ``repr(float)``, which round-trips exactly.  Integer
columns are written without a decimal point and read back as integers, so
read_csv followed by write_csv reproduces a file byte for byte.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Dict, Sequence

import numpy as np


_INT = re.compile(r"-?\d+")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header: Sequence[str], columns: Sequence) -> Path:
    path = Path(path)
    cols = [np.asarray(c).ravel() for c in columns]
    n = {c.size for c in cols}
    if len(n) != 1:
        raise ValueError("all CSV columns must have the same length")
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> Dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    header = text[0].split(",")
    if len(text) == 1:
        return {h: np.zeros(0) for h in header}
    cells = [line.split(",") for line in text[1:]]
    out = {}
    for k, h in enumerate(header):
        col = [row[k] for row in cells]
        if all(_INT.fullmatch(v) for v in col):
            out[h] = np.array([int(v) for v in col], dtype=np.int64)
        else:
            out[h] = np.array([float(v) for v in col])
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path
