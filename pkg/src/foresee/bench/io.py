"""Deterministic CSV output.

Floats are written with ``%.16e``, i.e. 17 significant digits. Wall-clock
columns carry a ``time_`` prefix so reproducibility checks can drop them.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.16e"
TIMING_PREFIX = "time_"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def strip_timing(path) -> bytes:
    """CSV bytes with every timing column removed."""
    header, rows = read_csv(path)
    keep = [i for i, h in enumerate(header) if not h.startswith(TIMING_PREFIX)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([header[i] for i in keep])
    for r in rows:
        w.writerow([r[i] for i in keep])
    return buf.getvalue().encode()


def moment_header(n, prefix=""):
    cols = ["step"]
    cols += [f"{prefix}mean_{i}" for i in range(n)]
    cols += [f"{prefix}cov_{i}_{j}" for i in range(n) for j in range(n)]
    cols += [f"{prefix}skew_{i}" for i in range(n)]
    cols += [f"{prefix}kurt_{i}" for i in range(n)]
    return cols


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(type(v).__name__)
