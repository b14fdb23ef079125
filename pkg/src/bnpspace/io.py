"""CSV tables written and read by the command line tools.

Floats are written with 17 significant digits so a round trip is exact.
Cluster labels are 1-based on disk.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import DataError


def fmt(x) -> str:
    return "%.17g" % x


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_table(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        return header, [row for row in reader if row]


def write_labels(path, spot_ids, z0) -> None:
    """Write 0-based labels as 1-based ``spot_id,label`` rows."""
    write_table(path, ["spot_id", "label"], [[s, int(k) + 1] for s, k in zip(spot_ids, z0)])


def read_labels(path):
    """Return ``(spot_ids, labels)`` with labels as written (not shifted)."""
    _, rows = read_table(path)
    try:
        return [r[0] for r in rows], np.array([int(r[1]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: expected spot_id,label rows") from exc


def write_vector(path, ids, values, id_name: str, value_name: str, integer: bool = False) -> None:
    conv = (lambda v: str(int(v))) if integer else fmt
    write_table(path, [id_name, value_name], [[i, conv(v)] for i, v in zip(ids, values)])


def read_vector(path):
    _, rows = read_table(path)
    try:
        return [r[0] for r in rows], np.array([float(r[1]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: expected id,value rows") from exc


def write_matrix(path, row_ids, col_ids, values, corner: str = "id") -> None:
    values = np.asarray(values)
    conv = (lambda v: str(int(v))) if np.issubdtype(values.dtype, np.integer) else fmt
    write_table(path, [corner, *col_ids], ([r, *map(conv, row)] for r, row in zip(row_ids, values)))


def read_matrix(path):
    header, rows = read_table(path)
    try:
        return [r[0] for r in rows], header[1:], np.array([[float(v) for v in r[1:]] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric matrix entry") from exc


def write_ppm(path, spot_ids, ppm, cutoff: float = 0.01) -> None:
    """Upper-triangle ``spot_i,spot_j,value`` triplets for entries above ``cutoff``."""
    i, j = np.nonzero(np.triu(ppm > cutoff, k=1))
    write_table(path, ["spot_i", "spot_j", "value"],
                ([spot_ids[a], spot_ids[b], fmt(ppm[a, b])] for a, b in zip(i, j)))
