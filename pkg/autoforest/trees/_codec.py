"""_codec.py.

Versioned binary layout for forests.

Layout (all little-endian):
 - header: magic, version, n, d, T, depth, tree type, shared flag, nnz,
        m_top, sparsity, pca_dims, learning_rate, pca_iterations, seed,
        vote threshold, then the corpus checksum (length-prefixed ascii).
 - per tree: tree index (uint32), permutation (n x int32), cuts
        (2^depth - 1 x float64), direction indices (rows x nnz int32) and
        weights (rows x nnz float64), where rows is depth for trees that
        share a direction per level and 2^depth - 1 otherwise.

The same forest always serializes to the same bytes.
"""
import io
import struct
from typing import Any, BinaryIO, Dict, Union

import numpy as np

# Local Imports
from autoforest.utils import ForestError
from autoforest.dataset import DataMatrix
from autoforest.trees._core import Forest, SplitRule, Tree, TreeType


class IndexFormatError(ForestError):
    """Error implying the bytes are not a readable index."""


class IndexMismatchError(ForestError):
    """Error implying the index was built over a different corpus."""


MAGIC = b"AFOREST\x00"
VERSION = 1

_HEADER = struct.Struct("<8sHQQIIBBIIdIdIQI")
_CHECKSUM_LEN = struct.Struct("<B")
_TREE_INDEX = struct.Struct("<I")

_TYPE_CODES = {TreeType.RKD: 0, TreeType.RP: 1, TreeType.PCA: 2}
_CODE_TYPES = {code: tree_type for tree_type, code in _TYPE_CODES.items()}


def _write_forest(stm: BinaryIO, forest: Forest):
    rule = forest.rule
    data = forest.data
    nnz = forest.trees[0].dir_indices.shape[1]
    stm.write(
        _HEADER.pack(
            MAGIC,
            VERSION,
            data.n,
            data.d,
            forest.n_trees,
            forest.depth,
            _TYPE_CODES[rule.variant],
            1 if rule.shared_levels else 0,
            nnz,
            rule.m_top,
            rule.sparsity,
            rule.pca_dims,
            rule.learning_rate,
            rule.pca_iterations,
            forest.seed,
            forest.vote_threshold,
        )
    )
    checksum = data.checksum.encode("ascii")
    stm.write(_CHECKSUM_LEN.pack(len(checksum)))
    stm.write(checksum)
    for tree in forest.trees:
        stm.write(_TREE_INDEX.pack(tree.tree_index))
        stm.write(tree.permutation.astype("<i4").tobytes())
        stm.write(tree.cuts.astype("<f8").tobytes())
        stm.write(tree.dir_indices.astype("<i4").tobytes())
        stm.write(tree.dir_weights.astype("<f8").tobytes())


def dump_forest(forest: Forest) -> bytes:
    stm = io.BytesIO()
    _write_forest(stm, forest)
    return stm.getvalue()


def save_forest(forest: Forest, path: str):
    with open(path, "wb") as stm:
        _write_forest(stm, forest)


def _read_exact(stm: BinaryIO, size: int) -> bytes:
    chunk = stm.read(size)
    if len(chunk) != size:
        raise IndexFormatError("Truncated index: wanted {} bytes.".format(size))
    return chunk


def _read_array(stm: BinaryIO, dtype: str, count: int) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    return np.frombuffer(_read_exact(stm, itemsize * count), dtype=dtype)


def _read_header(stm: BinaryIO) -> Dict[str, Any]:
    fields = _HEADER.unpack(_read_exact(stm, _HEADER.size))
    if fields[0] != MAGIC:
        raise IndexFormatError("Not an index file (bad magic).")
    if fields[1] != VERSION:
        raise IndexFormatError("Unsupported index version: {}".format(fields[1]))
    code = fields[6]
    if code not in _CODE_TYPES:
        raise IndexFormatError("Unknown tree type code: {}".format(code))
    (length,) = _CHECKSUM_LEN.unpack(_read_exact(stm, _CHECKSUM_LEN.size))
    checksum = _read_exact(stm, length).decode("ascii")
    return dict(
        version=fields[1],
        n=fields[2],
        d=fields[3],
        n_trees=fields[4],
        depth=fields[5],
        tree_type=_CODE_TYPES[code].value,
        shared_levels=bool(fields[7]),
        nnz=fields[8],
        m_top=fields[9],
        sparsity=fields[10],
        pca_dims=fields[11],
        learning_rate=fields[12],
        pca_iterations=fields[13],
        seed=fields[14],
        vote_threshold=fields[15],
        checksum=checksum,
    )


def read_header(path: str) -> Dict[str, Any]:
    """Return the header fields of the index at 'path' as a dict."""
    with open(path, "rb") as stm:
        return _read_header(stm)


def _read_forest(stm: BinaryIO, data: DataMatrix) -> Forest:
    header = _read_header(stm)
    if header["n"] != data.n or header["d"] != data.d:
        raise IndexMismatchError(
            "Index was built for n={}, d={}; corpus has n={}, d={}.".format(
                header["n"], header["d"], data.n, data.d
            )
        )
    if header["checksum"] != data.checksum:
        raise IndexMismatchError("Index was built over a different corpus.")

    rule = SplitRule(
        variant=header["tree_type"],
        m_top=header["m_top"],
        sparsity=header["sparsity"],
        pca_dims=header["pca_dims"],
        learning_rate=header["learning_rate"],
        pca_iterations=header["pca_iterations"],
        shared_levels=header["shared_levels"],
    )
    depth = header["depth"]
    nnz = header["nnz"]
    n_internal = 2**depth - 1
    n_dirs = depth if rule.shares_levels else n_internal
    trees = []
    for _ in range(header["n_trees"]):
        (tree_index,) = _TREE_INDEX.unpack(_read_exact(stm, _TREE_INDEX.size))
        permutation = _read_array(stm, "<i4", data.n)
        cuts = _read_array(stm, "<f8", n_internal)
        dir_indices = _read_array(stm, "<i4", n_dirs * nnz).reshape(n_dirs, nnz)
        dir_weights = _read_array(stm, "<f8", n_dirs * nnz).reshape(n_dirs, nnz)
        trees.append(
            Tree(
                data.n,
                depth,
                permutation,
                cuts,
                dir_indices,
                dir_weights,
                rule.shares_levels,
                tree_index,
            )
        )
    if stm.read(1):
        raise IndexFormatError("Trailing bytes after the last tree.")
    return Forest(data, trees, rule, header["seed"], depth, header["vote_threshold"])


def load_forest(source: Union[str, bytes], data: DataMatrix) -> Forest:
    """Load an index from a path (or raw bytes) and bind it to 'data'.

    Raises IndexMismatchError when n, d or the checksum of 'data' differ
    from what the index was built over.
    """
    if isinstance(source, (bytes, bytearray)):
        return _read_forest(io.BytesIO(source), data)
    with open(source, "rb") as stm:
        return _read_forest(stm, data)
