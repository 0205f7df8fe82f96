"""dataset.py.

Vector corpora: loading and saving, held-out query splits, exact k-NN
ground truth and the Euclidean distance kernel shared by the search and
the evaluation code.

Supported on-disk formats:
 - fvecs: each record is a little-endian int32 'd' followed by 'd'
        little-endian float32 values.
 - raw-f32: a header of two little-endian uint64 values (n, d), followed
        by n*d little-endian float32 values.
 - csv: one vector per line, comma separated.
"""
import os
import struct
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

# Local Imports
from autoforest.utils import ForestError, calculate_checksum, logger, map_in_threads


class LoadError(ForestError):
    """Error implying a corpus or ground-truth file could not be read."""


VECTOR_FORMATS = ("fvecs", "raw-f32", "csv")
"""Names of the supported vector file formats."""


_EXTENSION_MAPPING = {
    ".fvecs": "fvecs",
    ".f32": "raw-f32",
    ".bin": "raw-f32",
    ".csv": "csv",
    ".txt": "csv",
}

_RAW_HEADER = struct.Struct("<QQ")


class DataMatrix(object):
    """Immutable row-major matrix of n float32 vectors in d dimensions."""

    def __init__(self, values):
        arr = np.array(values, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 2:
            raise ValueError(
                "Expected a 2-D matrix, got {} dimension(s).".format(arr.ndim)
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("Empty matrix of shape {}.".format(arr.shape))
        if not np.all(np.isfinite(arr)):
            raise ValueError("Matrix contains NaN or infinite values.")
        arr.setflags(write=False)
        self._values = arr
        self._checksum = None

    @property
    def n(self) -> int:
        return self._values.shape[0]

    @property
    def d(self) -> int:
        return self._values.shape[1]

    @property
    def values(self) -> np.ndarray:
        """The read-only (n, d) float32 array."""
        return self._values

    @property
    def checksum(self) -> str:
        """Hex digest identifying this exact corpus (shape and bytes)."""
        if self._checksum is None:
            tag = "{}x{}".format(self.n, self.d).encode("utf-8")
            self._checksum = calculate_checksum(tag, self._values.tobytes())
        return self._checksum

    def take(self, rows) -> "DataMatrix":
        return DataMatrix(self._values[np.asarray(rows, dtype=np.int64)])

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return "DataMatrix(n={}, d={})".format(self.n, self.d)


class GroundTruth(object):
    """Exact k nearest neighbors for a batch of queries.

    Each row holds k corpus indices sorted by ascending distance, ties
    broken by ascending index.
    """

    def __init__(self, rows):
        arr = np.array(rows, dtype=np.int64, copy=True)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError("Ground truth must be a (queries, k) matrix.")
        arr.setflags(write=False)
        self._rows = arr

    @property
    def k(self) -> int:
        return self._rows.shape[1]

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    def __len__(self) -> int:
        return self._rows.shape[0]

    def save_csv(self, path: str):
        np.savetxt(path, self._rows, fmt="%d", delimiter=",")

    @classmethod
    def load_csv(cls, path: str) -> "GroundTruth":
        try:
            rows = np.loadtxt(path, dtype=np.int64, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise LoadError("Cannot read ground truth {}: {}".format(path, exc)) from exc
        return cls(rows)


@dataclass(frozen=True)
class QueryEvaluation:
    """Recall in [0, 1] and the elapsed seconds per query."""

    recall: float
    elapsed: float


#
# Loaders
#
def infer_format(path: str) -> str:
    _, ext = os.path.splitext(path)
    fmt = _EXTENSION_MAPPING.get(ext.lower())
    if not fmt:
        raise ValueError(
            "Cannot infer the vector format of {}; pass one of: {}".format(
                path, ", ".join(VECTOR_FORMATS)
            )
        )
    return fmt


def _read_fvecs(path: str) -> np.ndarray:
    size = os.path.getsize(path)
    if size == 0 or size % 4:
        raise LoadError("{}: size {} is not a whole number of records.".format(path, size))
    words = np.fromfile(path, dtype="<i4")
    d = int(words[0])
    if d <= 0 or words.size % (d + 1):
        raise LoadError("{}: inconsistent record length.".format(path))
    records = words.reshape(-1, d + 1)
    if np.any(records[:, 0] != d):
        raise LoadError("{}: inconsistent record length.".format(path))
    return np.ascontiguousarray(records[:, 1:]).view("<f4")


def _read_raw_f32(path: str) -> np.ndarray:
    with open(path, "rb") as stm:
        header = stm.read(_RAW_HEADER.size)
        if len(header) != _RAW_HEADER.size:
            raise LoadError("{}: truncated header.".format(path))
        n, d = _RAW_HEADER.unpack(header)
        if n < 1 or d < 1:
            raise LoadError("{}: invalid shape ({}, {}).".format(path, n, d))
        values = np.fromfile(stm, dtype="<f4")
    if values.size != n * d:
        raise LoadError(
            "{}: expected {} floats, found {}.".format(path, n * d, values.size)
        )
    return values.reshape(n, d)


def _read_csv(path: str) -> np.ndarray:
    try:
        values = np.loadtxt(path, dtype=np.float64, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise LoadError("{}: {}".format(path, exc)) from exc
    # float32 overflow turns into inf, which the finiteness check rejects.
    with np.errstate(over="ignore"):
        return values.astype(np.float32)


_READERS: Dict[str, Callable[[str], np.ndarray]] = {
    "fvecs": _read_fvecs,
    "raw-f32": _read_raw_f32,
    "csv": _read_csv,
}


def load_vectors(path: str, fmt: Optional[str] = None) -> DataMatrix:
    """Load every record of the file, in file order, into a DataMatrix."""
    fmt = fmt or infer_format(path)
    reader = _READERS.get(fmt)
    if not reader:
        raise ValueError("Unrecognized vector format: {}".format(fmt))
    try:
        values = reader(path)
    except OSError as exc:
        raise LoadError("Cannot read {}: {}".format(path, exc)) from exc
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise LoadError("{}: no vectors found.".format(path))
    if not np.all(np.isfinite(values)):
        raise LoadError("{}: contains NaN or infinite values.".format(path))
    logger.debug("Loaded %s (%s): n=%d, d=%d", path, fmt, *values.shape)
    return DataMatrix(values)


def save_vectors(data: DataMatrix, path: str, fmt: Optional[str] = None):
    """Write the corpus in one of VECTOR_FORMATS (inverse of load_vectors)."""
    fmt = fmt or infer_format(path)
    values = data.values
    if fmt == "fvecs":
        records = np.empty((data.n, data.d + 1), dtype="<i4")
        records[:, 0] = data.d
        records[:, 1:] = values.astype("<f4").view("<i4")
        records.tofile(path)
    elif fmt == "raw-f32":
        with open(path, "wb") as stm:
            stm.write(_RAW_HEADER.pack(data.n, data.d))
            values.astype("<f4").tofile(stm)
    elif fmt == "csv":
        # '%.9g' is enough digits to round-trip any float32.
        np.savetxt(path, values, fmt="%.9g", delimiter=",")
    else:
        raise ValueError("Unrecognized vector format: {}".format(fmt))


def make_fixture(
    n: int = 10000, d: int = 64, clusters: int = 16, seed: int = 2019
) -> DataMatrix:
    """Return the bundled synthetic corpus: a seeded mixture of Gaussians."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 10.0, size=(clusters, d))
    spreads = rng.uniform(2.0, 6.0, size=clusters)
    labels = rng.integers(0, clusters, size=n)
    noise = rng.standard_normal(size=(n, d))
    return DataMatrix(centers[labels] + noise * spreads[labels, None])


#
# Query Splits
#
def split_indices(
    n: int, m_val: int, m_test: int, seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return disjoint (train, validation, test) row indices.

    Train indices stay in ascending (file) order.
    """
    if m_val < 0 or m_test < 0:
        raise ValueError("Query counts must be non-negative.")
    if m_val + m_test >= n:
        raise ValueError(
            "m_val + m_test = {} leaves no training points out of n = {}.".format(
                m_val + m_test, n
            )
        )
    perm = np.random.default_rng(seed).permutation(n)
    validation = perm[:m_val]
    test = perm[m_val : m_val + m_test]
    train = np.sort(perm[m_val + m_test :])
    return train, validation, test


def split_queries(
    data: DataMatrix, m_val: int, m_test: int, seed: int
) -> Tuple[DataMatrix, Optional[DataMatrix], Optional[DataMatrix]]:
    """Split the corpus into (train, validation, test); empty parts are None."""
    train, validation, test = split_indices(data.n, m_val, m_test, seed)
    return (
        data.take(train),
        data.take(validation) if m_val else None,
        data.take(test) if m_test else None,
    )


#
# Distances
#
def _as_query(q, d: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (d,):
        raise ValueError(
            "Query has shape {}, expected ({},).".format(q.shape, d)
        )
    return q


def euclidean_distance(u: Sequence[float], v: Sequence[float]) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(
            "Dimension mismatch: {} vs {}.".format(u.shape, v.shape)
        )
    diff = u - v
    return float(np.sqrt(np.dot(diff, diff)))


def squared_distances(values: np.ndarray, q: np.ndarray, rows=None) -> np.ndarray:
    """Squared Euclidean distances from q to the given rows (all if None).

    Every caller goes through this kernel so that the exact search and
    the candidate search rank points identically.
    """
    block = values if rows is None else values[rows]
    diff = block.astype(np.float64) - q.astype(np.float64)
    diff *= diff
    return diff.sum(axis=1)


def select_nearest(rows: np.ndarray, dists: np.ndarray, k: int) -> np.ndarray:
    """Return the (at most) k rows with smallest distance, ties by index."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size > k:
        kth = np.partition(dists, k - 1)[k - 1]
        keep = dists <= kth
        rows = rows[keep]
        dists = dists[keep]
    order = np.lexsort((rows, dists))[:k]
    return rows[order]


def exact_knn(data: DataMatrix, q, k: int) -> np.ndarray:
    """Indices of the k nearest corpus points, ascending distance."""
    if k < 1 or k > data.n:
        raise ValueError("k must be in [1, {}], got {}.".format(data.n, k))
    q = _as_query(q, data.d)
    dists = squared_distances(data.values, q)
    return select_nearest(np.arange(data.n), dists, k)


def ground_truth(
    data: DataMatrix, queries: DataMatrix, k: int, workers: Optional[int] = None
) -> GroundTruth:
    """Exact k-NN for every query row, evaluated concurrently per query."""
    if queries.d != data.d:
        raise ValueError(
            "Queries have d={}, corpus has d={}.".format(queries.d, data.d)
        )
    rows = map_in_threads(
        lambda q: exact_knn(data, q, k), list(queries.values), workers
    )
    return GroundTruth(np.vstack(rows))


def recall(returned, truth_row) -> float:
    """Fraction of the true neighbors present in 'returned'.

    Short results simply count their missing neighbors as misses.
    """
    truth_row = np.asarray(truth_row)
    hits = np.intersect1d(np.asarray(returned, dtype=np.int64), truth_row).size
    return hits / truth_row.size
