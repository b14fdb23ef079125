"""Count matrices, spatial neighbor graphs and size factors.

Counts are held spots x genes. Spot coordinates are in platform units and
the neighbor graph is stored as CSR-style neighbor lists so that the
sampler kernels can walk them without touching a dense n x n matrix.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DENSE_CSV = "dense-csv"
SPARSE_MTX = "sparse-mtx"


class DataError(ValueError):
    """Raised for malformed or invalid input data."""


def _check_ids(ids, kind):
    seen = set()
    for pos, label in enumerate(ids):
        if label in seen:
            raise DataError(f"duplicate {kind} id {label!r} at position {pos + 1}")
        seen.add(label)


@dataclass(frozen=True)
class CountMatrix:
    values: np.ndarray
    spot_ids: tuple
    gene_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DataError("count matrix must be two-dimensional")
        if values.dtype.kind not in "iu":
            if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
                raise DataError("count matrix entries must be integers")
        values = values.astype(np.int64)
        if np.any(values < 0):
            i, j = np.argwhere(values < 0)[0]
            raise DataError(f"negative count {values[i, j]} at spot row {i + 1}, gene column {j + 1}")
        n, p = values.shape
        if n < 2 or p < 1:
            raise DataError(f"count matrix needs n >= 2 and p >= 1, got {n} x {p}")
        spot_ids = tuple(str(s) for s in self.spot_ids)
        gene_ids = tuple(str(g) for g in self.gene_ids)
        if len(spot_ids) != n or len(gene_ids) != p:
            raise DataError(
                f"id lengths ({len(spot_ids)}, {len(gene_ids)}) do not match matrix shape {values.shape}"
            )
        _check_ids(spot_ids, "spot")
        _check_ids(gene_ids, "gene")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spot_ids", spot_ids)
        object.__setattr__(self, "gene_ids", gene_ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def subset(self, spots=None, genes=None) -> "CountMatrix":
        spots = np.arange(self.n) if spots is None else np.asarray(spots)
        genes = np.arange(self.p) if genes is None else np.asarray(genes)
        return CountMatrix(
            self.values[np.ix_(spots, genes)],
            tuple(self.spot_ids[i] for i in spots),
            tuple(self.gene_ids[j] for j in genes),
        )

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (
            self.spot_ids == other.spot_ids
            and self.gene_ids == other.gene_ids
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class SpatialGraph:
    """Symmetric binary adjacency with zero diagonal.

    ``indptr``/``indices`` follow the CSR convention: the neighbors of spot
    ``i`` are ``indices[indptr[i]:indptr[i + 1]]``, sorted and unique.
    """

    coords: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    threshold: float

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_dense(self) -> np.ndarray:
        g = np.zeros((self.n, self.n), dtype=np.int8)
        for i in range(self.n):
            g[i, self.neighbors(i)] = 1
        return g

    @classmethod
    def from_edges(cls, n: int, edges, coords=None, threshold=float("nan")) -> "SpatialGraph":
        """Build a graph from an iterable of undirected (i, j) pairs."""
        rows, cols = [], []
        for i, j in edges:
            if i == j:
                raise DataError(f"self loop at spot {i}")
            rows += [i, j]
            cols += [j, i]
        mat = scipy.sparse.coo_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n)
        ).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        if coords is None:
            coords = np.full((n, 2), np.nan)
        return cls(np.asarray(coords, dtype=float), mat.indptr.astype(np.int64),
                   mat.indices.astype(np.int64), float(threshold))


@dataclass(frozen=True)
class SizeFactors:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise DataError("size factors must be finite and positive")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)


# ---------------------------------------------------------------------------
# Loading and writing
# ---------------------------------------------------------------------------

def _parse_count(text, path, line, column):
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"{path}: line {line}, column {column}: cannot parse {text!r} as an integer count") from None
    if value < 0:
        raise DataError(f"{path}: line {line}, column {column}: negative count {value}")
    return value


def _read_dense_csv(path: Path) -> CountMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        gene_ids = [g.strip() for g in header[1:]]
        rows, spot_ids = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line_no}: expected {len(header)} fields, found {len(row)}"
                )
            spot_ids.append(row[0].strip())
            rows.append([_parse_count(cell.strip(), path, line_no, col)
                         for col, cell in enumerate(row[1:], start=2)])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return CountMatrix(np.array(rows, dtype=np.int64), spot_ids, gene_ids)


def _read_id_file(path: Path) -> list:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def _read_sparse_mtx(path: Path, spots_path: Path, genes_path: Path) -> CountMatrix:
    try:
        info = scipy.io.mminfo(str(path))
        mat = scipy.io.mmread(str(path))
    except Exception as exc:  # scipy raises a mix of ValueError/IndexError on bad files
        raise DataError(f"{path}: not a valid Matrix Market file ({exc})") from exc
    n_rows, n_cols, _, fmt, field_kind, _ = info
    if fmt != "coordinate":
        raise DataError(f"{path}: expected coordinate format, found {fmt}")
    if field_kind not in ("integer", "real"):
        raise DataError(f"{path}: unsupported field type {field_kind}")
    coo = scipy.sparse.coo_matrix(mat)
    bad = np.flatnonzero(coo.data < 0)
    if bad.size:
        k = bad[0]
        raise DataError(
            f"{path}: negative count {coo.data[k]} at row {coo.row[k] + 1}, column {coo.col[k] + 1}"
        )
    if np.any(coo.data != np.round(coo.data)):
        k = np.flatnonzero(coo.data != np.round(coo.data))[0]
        raise DataError(f"{path}: non-integer value at row {coo.row[k] + 1}, column {coo.col[k] + 1}")
    keys = coo.row.astype(np.int64) * n_cols + coo.col
    if len(np.unique(keys)) != len(keys):
        raise DataError(f"{path}: duplicate coordinate entries")
    spot_ids = _read_id_file(spots_path)
    gene_ids = _read_id_file(genes_path)
    if len(spot_ids) != n_rows or len(gene_ids) != n_cols:
        raise DataError(
            f"{path}: matrix is {n_rows} x {n_cols} but id files list "
            f"{len(spot_ids)} spots and {len(gene_ids)} genes"
        )
    values = np.zeros((n_rows, n_cols), dtype=np.int64)
    values[coo.row, coo.col] = coo.data.astype(np.int64)
    return CountMatrix(values, spot_ids, gene_ids)


def sidecar_paths(path) -> tuple[Path, Path]:
    """Default id files for a Matrix Market file: ``<stem>.spots.txt`` and ``<stem>.genes.txt``."""
    path = Path(path)
    stem = path.with_suffix("")
    return Path(f"{stem}.spots.txt"), Path(f"{stem}.genes.txt")


def load_counts(path, format: str = DENSE_CSV, spots_path=None, genes_path=None) -> CountMatrix:
    """Read a spots x genes count matrix.

    ``dense-csv``: header row of gene ids, first column spot ids.
    ``sparse-mtx``: Matrix Market coordinate file (rows are spots, 1-based)
    with one-label-per-line sidecar files for spot and gene ids.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if format == DENSE_CSV:
        return _read_dense_csv(path)
    if format == SPARSE_MTX:
        default_spots, default_genes = sidecar_paths(path)
        return _read_sparse_mtx(path, Path(spots_path or default_spots), Path(genes_path or default_genes))
    raise DataError(f"unknown count format {format!r}")


def write_counts(counts: CountMatrix, path, format: str = DENSE_CSV) -> None:
    path = Path(path)
    if format == DENSE_CSV:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["spot_id", *counts.gene_ids])
            for sid, row in zip(counts.spot_ids, counts.values):
                writer.writerow([sid, *row.tolist()])
    elif format == SPARSE_MTX:
        coo = scipy.sparse.coo_matrix(counts.values)
        scipy.io.mmwrite(str(path), coo, field="integer")
        spots_path, genes_path = sidecar_paths(path)
        spots_path.write_text("".join(f"{s}\n" for s in counts.spot_ids))
        genes_path.write_text("".join(f"{g}\n" for g in counts.gene_ids))
    else:
        raise DataError(f"unknown count format {format!r}")


def load_coords(path, spot_ids=None) -> np.ndarray:
    """Read ``spot_id,x,y`` rows; reorder to ``spot_ids`` when given."""
    path = Path(path)
    ids, xy = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if line_no == 1:
                try:
                    float(row[1])
                except (ValueError, IndexError):
                    continue  # header
            if len(row) != 3:
                raise DataError(f"{path}: line {line_no}: expected spot_id,x,y")
            try:
                xy.append((float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path}: line {line_no}: non-numeric coordinate") from None
            ids.append(row[0].strip())
    _check_ids(ids, "spot")
    coords = np.array(xy, dtype=float).reshape(-1, 2)
    if spot_ids is None:
        return coords
    index = {sid: k for k, sid in enumerate(ids)}
    missing = [s for s in spot_ids if s not in index]
    if missing:
        raise DataError(f"{path}: no coordinates for spots {missing[:5]}")
    return coords[[index[s] for s in spot_ids]]


def write_coords(path, spot_ids, coords) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["spot_id", "x", "y"])
        for sid, (x, y) in zip(spot_ids, coords):
            writer.writerow([sid, repr(float(x)), repr(float(y))])


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def quality_control(
    counts: CountMatrix,
    min_spot_total: int = 100,
    max_gene_zero_prop: float = 0.9,
    min_gene_max: int = 10,
    gene_rule: str = "and",
) -> CountMatrix:
    """Drop low-depth spots, then uninformative genes.

    A spot is dropped when its total count is below ``min_spot_total``.
    Among the remaining spots a gene is dropped when its zero proportion
    exceeds ``max_gene_zero_prop`` and (``gene_rule="and"``) or
    (``gene_rule="or"``) its maximum count is below ``min_gene_max``.
    """
    if min_spot_total < 0 or min_gene_max < 0:
        raise DataError("QC thresholds must be nonnegative")
    if not 0.0 <= max_gene_zero_prop <= 1.0:
        raise DataError("max_gene_zero_prop must lie in [0, 1]")
    if gene_rule not in ("and", "or"):
        raise DataError(f"gene_rule must be 'and' or 'or', got {gene_rule!r}")

    y = counts.values
    keep_spots = np.flatnonzero(y.sum(axis=1) >= min_spot_total)
    y = y[keep_spots]
    if len(keep_spots) < 2:
        raise DataError(f"degenerate after QC: {len(keep_spots)} spots remain")
    zero_prop = (y == 0).mean(axis=0)
    too_sparse = zero_prop > max_gene_zero_prop
    too_low = y.max(axis=0) < min_gene_max
    drop = (too_sparse & too_low) if gene_rule == "and" else (too_sparse | too_low)
    keep_genes = np.flatnonzero(~drop)
    if len(keep_genes) < 1:
        raise DataError("degenerate after QC: no genes remain")
    logger.info("QC kept %d/%d spots and %d/%d genes",
                len(keep_spots), counts.n, len(keep_genes), counts.p)
    return counts.subset(keep_spots, keep_genes)


def compute_size_factors(counts: CountMatrix) -> SizeFactors:
    totals = counts.values.sum(axis=1)
    if np.any(totals <= 0):
        i = int(np.flatnonzero(totals <= 0)[0])
        raise DataError(
            f"spot {counts.spot_ids[i]!r} has zero total count; run quality_control first"
        )
    log_totals = np.log(totals.astype(float))
    return SizeFactors(np.exp(log_totals - log_totals.mean()))


DEFAULT_THRESHOLD_FACTOR = 1.2


def default_threshold(coords) -> float:
    """1.2 times the median nearest-neighbor distance.

    Any factor in (1, sqrt(2)) keeps exactly the first neighbor shell: four
    neighbors on a square lattice and six on a triangular one.
    """
    coords = np.asarray(coords, dtype=float)
    dist, _ = cKDTree(coords).query(coords, k=2)
    return DEFAULT_THRESHOLD_FACTOR * float(np.median(dist[:, 1]))


def build_adjacency(coords, c0: float | None = None) -> SpatialGraph:
    """Neighbors are spot pairs at Euclidean distance strictly below ``c0``."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError("coordinates must be an n x 2 array")
    if not np.all(np.isfinite(coords)):
        i = int(np.flatnonzero(~np.isfinite(coords).all(axis=1))[0])
        raise DataError(f"non-finite coordinate for spot {i + 1}")
    if c0 is None:
        c0 = default_threshold(coords)
    if not c0 > 0:
        raise DataError("adjacency threshold c0 must be positive")
    n = len(coords)
    tree = cKDTree(coords)
    # query_pairs uses <=; strict inequality is enforced below
    pairs = tree.query_pairs(math.nextafter(c0, 0.0), output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
        pairs = pairs[d < c0]
        if np.any(d[d < c0] == 0):
            warnings.warn("duplicate coordinates found; coincident spots are treated as neighbors",
                          stacklevel=2)
    graph = SpatialGraph.from_edges(n, map(tuple, pairs), coords=coords, threshold=c0)
    return graph
