"""Atomic CSV/JSON writers used by every module that emits a report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _fmt(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return value


def csv_bytes(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue().encode()


def write_csv(path, rows, columns):
    atomic_write_bytes(path, csv_bytes(rows, columns))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json_default(obj):
    import numpy as np

    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def json_bytes(doc):
    return (json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def write_json(path, doc):
    atomic_write_bytes(path, json_bytes(doc))


def config_hash(doc):
    """Stable SHA-256 of a JSON-able config document."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canon.encode()).hexdigest()
