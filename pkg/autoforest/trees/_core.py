"""_core.py.

Core types for randomized space-partitioning trees.

Every tree is an implicit complete binary tree in heap layout: node 0 is
the root and node i has children 2i+1 and 2i+2. The tree keeps one
permutation of the corpus indices arranged so that each node owns a
contiguous range of it; the ranges only depend on (n, depth) because
every split is a median split sending ceil(size/2) points to the left.
"""
import enum
import math
import functools
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

# Local Imports
from autoforest.utils import ForestError, ceil_div
from autoforest.dataset import DataMatrix


class DegenerateSplit(ForestError):
    """Error implying every projection of a node is identical."""


class TreeType(str, enum.Enum):
    """The direction-generation strategies."""

    RKD = "rkd"
    """Randomized k-d tree: a coordinate among the top-variance ones."""

    RP = "rp"
    """Random projection tree: a sparse random unit vector."""

    PCA = "pca"
    """Randomized PCA tree: approximate leading principal component."""


@dataclass(frozen=True)
class SplitRule:
    """Tree-type dependent tuning parameters.

    'sparsity' and 'pca_dims' default to 1/sqrt(d) and ceil(sqrt(d)); call
    resolve(d) to fill them in for a given dimensionality.
    """

    variant: TreeType = TreeType.RP
    m_top: int = 5
    sparsity: Optional[float] = None
    pca_dims: Optional[int] = None
    learning_rate: float = 0.01
    pca_iterations: int = 20
    shared_levels: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", TreeType(self.variant))
        if self.m_top < 1:
            raise ValueError("m_top must be >= 1, got {}.".format(self.m_top))
        if self.sparsity is not None and not 0 < self.sparsity <= 1:
            raise ValueError(
                "sparsity must be in (0, 1], got {}.".format(self.sparsity)
            )
        if self.pca_dims is not None and self.pca_dims < 1:
            raise ValueError("pca_dims must be >= 1, got {}.".format(self.pca_dims))
        if not self.learning_rate > 0:
            raise ValueError(
                "learning_rate must be > 0, got {}.".format(self.learning_rate)
            )
        if self.pca_iterations < 1:
            raise ValueError(
                "pca_iterations must be >= 1, got {}.".format(self.pca_iterations)
            )

    @property
    def shares_levels(self) -> bool:
        """Whether every node of a level uses the same direction."""
        return self.variant is TreeType.RP and self.shared_levels

    def resolve(self, d: int) -> "SplitRule":
        """Return a copy with every default filled in for dimension d.

        NOTE: m_top and pca_dims are clamped to d so that low-dimensional
        corpora work with the defaults.
        """
        sparsity = self.sparsity if self.sparsity is not None else 1.0 / math.sqrt(d)
        pca_dims = self.pca_dims
        if pca_dims is None:
            pca_dims = math.ceil(math.sqrt(d))
        return replace(
            self,
            m_top=min(self.m_top, d),
            sparsity=min(1.0, sparsity),
            pca_dims=min(pca_dims, d),
        )

    def nnz(self, d: int) -> int:
        """Number of non-zero components of every direction of the tree."""
        rule = self.resolve(d)
        if rule.variant is TreeType.RKD:
            return 1
        if rule.variant is TreeType.PCA:
            return rule.pca_dims
        # Guard against 1/sqrt(d) * d landing a hair above an integer.
        return max(1, min(d, math.ceil(rule.sparsity * d - 1e-9)))


class Direction(object):
    """Sparse projection direction: (index, weight) pairs sorted by index."""

    __slots__ = ("_indices", "_weights")

    def __init__(self, indices, weights):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if indices.size < 1 or indices.size != weights.size:
            raise ValueError("A direction needs matching, non-empty indices/weights.")
        if indices[0] < 0 or np.any(np.diff(indices) <= 0):
            raise ValueError("Direction indices must be strictly increasing.")
        if not np.any(weights != 0):
            raise ValueError("A direction needs at least one non-zero weight.")
        self._indices = indices
        self._weights = weights

    @classmethod
    def one_hot(cls, index: int) -> "Direction":
        return cls([index], [1.0])

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def __len__(self) -> int:
        return self._indices.size

    def to_dense(self, d: int) -> np.ndarray:
        dense = np.zeros(d, dtype=np.float64)
        dense[self._indices] = self._weights
        return dense

    def __eq__(self, other) -> bool:
        if not isinstance(other, Direction):
            return NotImplemented
        return np.array_equal(self._indices, other._indices) and np.array_equal(
            self._weights, other._weights
        )

    def __repr__(self) -> str:
        return "Direction({})".format(
            ", ".join(
                "{}:{:.4g}".format(i, w) for i, w in zip(self._indices, self._weights)
            )
        )


class Split(NamedTuple):
    """Result of a median split; 'left'/'right' are positions in the input."""

    cut: float
    left: np.ndarray
    right: np.ndarray


#
# Kernels
#
# Projections are computed as an elementwise product followed by a sum
# over the last axis, both while growing and while routing queries, so a
# query identical to a corpus point lands exactly on that point's side.
#
def project(values: np.ndarray, direction: Direction, rows=None) -> np.ndarray:
    """Project the given rows of 'values' (all if None) onto 'direction'."""
    if rows is None:
        gathered = values[:, direction.indices]
    else:
        gathered = values[np.ix_(np.asarray(rows), direction.indices)]
    return (gathered * direction.weights).sum(axis=1)


def project_query(q: np.ndarray, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Project one vector onto a stack of (.., nnz) sparse directions."""
    return (q[indices] * weights).sum(axis=-1)


def median_split(projections, keys=None) -> Split:
    """Split at the ceil(size/2)-th smallest projection.

    Ties are broken by 'keys' (the original corpus indices; positions if
    None) so the left child always receives exactly ceil(size/2) points.
    """
    proj = np.asarray(projections, dtype=np.float64)
    if proj.size < 2:
        raise ValueError("A median split needs at least 2 values.")
    if keys is None:
        keys = np.arange(proj.size)
    if proj.max() == proj.min():
        raise DegenerateSplit("All {} projections are identical.".format(proj.size))
    order = np.lexsort((keys, proj))
    n_left = ceil_div(proj.size, 2)
    return Split(float(proj[order[n_left - 1]]), order[:n_left], order[n_left:])


def index_order_split(projections, keys) -> Split:
    """Fallback split of a degenerate node by ascending key."""
    proj = np.asarray(projections, dtype=np.float64)
    order = np.argsort(np.asarray(keys), kind="stable")
    n_left = ceil_div(proj.size, 2)
    return Split(float(proj[order[n_left - 1]]), order[:n_left], order[n_left:])


def max_depth(n: int) -> int:
    """floor(log2 n): the deepest level where every node holds a point."""
    return n.bit_length() - 1


def level_of(node: int) -> int:
    return (node + 1).bit_length() - 1


@functools.lru_cache(maxsize=64)
def node_ranges(n: int, depth: int) -> np.ndarray:
    """Return the (start, end) permutation range of every heap node."""
    count = 2 ** (depth + 1) - 1
    ranges = np.empty((count, 2), dtype=np.int64)
    ranges[0] = (0, n)
    for node in range(2**depth - 1):
        start, end = ranges[node]
        mid = start + ceil_div(int(end - start), 2)
        ranges[2 * node + 1] = (start, mid)
        ranges[2 * node + 2] = (mid, end)
    ranges.setflags(write=False)
    return ranges


class Tree(object):
    """One grown tree; immutable once built.

    'dir_indices'/'dir_weights' hold one direction per internal node, or
    one per level when the tree shares directions across a level.
    """

    def __init__(
        self,
        n: int,
        depth: int,
        permutation: np.ndarray,
        cuts: np.ndarray,
        dir_indices: np.ndarray,
        dir_weights: np.ndarray,
        shared: bool,
        tree_index: int = 0,
    ):
        n_internal = 2**depth - 1
        n_dirs = depth if shared else n_internal
        if permutation.shape != (n,):
            raise ValueError("Permutation must hold all {} points.".format(n))
        if cuts.shape != (n_internal,):
            raise ValueError("Expected {} cuts, got {}.".format(n_internal, cuts.shape))
        if dir_indices.shape[0] != n_dirs or dir_indices.shape != dir_weights.shape:
            raise ValueError("Expected {} directions.".format(n_dirs))
        self._n = n
        self._depth = depth
        self._permutation = permutation
        self._cuts = cuts
        self._dir_indices = dir_indices
        self._dir_weights = dir_weights
        self._shared = shared
        self._tree_index = tree_index
        for arr in (permutation, cuts, dir_indices, dir_weights):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self._n

    @property
    def depth(self) -> int:
        return self._depth

    @property
    def permutation(self) -> np.ndarray:
        return self._permutation

    @property
    def cuts(self) -> np.ndarray:
        return self._cuts

    @property
    def dir_indices(self) -> np.ndarray:
        return self._dir_indices

    @property
    def dir_weights(self) -> np.ndarray:
        return self._dir_weights

    @property
    def shared(self) -> bool:
        return self._shared

    @property
    def tree_index(self) -> int:
        """Position of this tree in its forest; part of its seed."""
        return self._tree_index

    @property
    def node_ranges(self) -> np.ndarray:
        return node_ranges(self._n, self._depth)

    def direction_row(self, node: int) -> int:
        return level_of(node) if self._shared else node

    def direction(self, node: int) -> Direction:
        row = self.direction_row(node)
        return Direction(self._dir_indices[row], self._dir_weights[row])

    def node_points(self, node: int) -> np.ndarray:
        start, end = self.node_ranges[node]
        return self._permutation[start:end]

    def leaf_sizes(self) -> np.ndarray:
        ranges = self.node_ranges[2**self._depth - 1 :]
        return ranges[:, 1] - ranges[:, 0]

    def project_at(self, node: int, q: np.ndarray) -> float:
        row = self.direction_row(node)
        return float(
            project_query(q, self._dir_indices[row], self._dir_weights[row])
        )

    def child_towards(self, node: int, q: np.ndarray) -> Tuple[int, int, float]:
        """Return (child taken, sibling left behind, |projection - cut|)."""
        proj = self.project_at(node, q)
        cut = self._cuts[node]
        margin = abs(proj - cut)
        if proj <= cut:
            return 2 * node + 1, 2 * node + 2, margin
        return 2 * node + 2, 2 * node + 1, margin

    def truncate(self, depth: int) -> "Tree":
        """Return this tree pruned to 'depth'; the arrays are shared."""
        if not 1 <= depth <= self._depth:
            raise ValueError(
                "Cannot prune a depth-{} tree to depth {}.".format(self._depth, depth)
            )
        if depth == self._depth:
            return self
        n_dirs = depth if self._shared else 2**depth - 1
        return Tree(
            self._n,
            depth,
            self._permutation,
            self._cuts[: 2**depth - 1],
            self._dir_indices[:n_dirs],
            self._dir_weights[:n_dirs],
            self._shared,
            self._tree_index,
        )


def descend(
    q: np.ndarray,
    cuts: np.ndarray,
    dir_indices: np.ndarray,
    dir_weights: np.ndarray,
    depth: int,
    shared: bool,
) -> np.ndarray:
    """Return the heap node reached at level 'depth' in each stacked tree.

    'cuts' is (T, nodes). Directions are (T, rows, nnz), with one row per
    level when 'shared' and one per node otherwise. All trees step
    together, one vectorized step per level.
    """
    tree_ids = np.arange(cuts.shape[0])
    nodes = np.zeros(cuts.shape[0], dtype=np.int64)
    for level in range(depth):
        rows = level if shared else nodes
        proj = project_query(
            q, dir_indices[tree_ids, rows], dir_weights[tree_ids, rows]
        )
        nodes = 2 * nodes + 1 + (proj > cuts[tree_ids, nodes])
    return nodes


def traverse(tree: Tree, q, depth: Optional[int] = None) -> Tuple[int, int]:
    """Return the permutation range of q's node at level 'depth'.

    The query goes left iff its projection is <= the node's cut.
    """
    if depth is None:
        depth = tree.depth
    if not 0 <= depth <= tree.depth:
        raise ValueError("Depth {} outside [0, {}].".format(depth, tree.depth))
    q = np.asarray(q, dtype=np.float32)
    node = 0
    for _ in range(depth):
        node, _, _ = tree.child_towards(node, q)
    start, end = tree.node_ranges[node]
    return int(start), int(end)


class Forest(object):
    """T independent trees of a common depth over one corpus."""

    def __init__(
        self,
        data: DataMatrix,
        trees: List[Tree],
        rule: SplitRule,
        seed: int,
        depth: int,
        vote_threshold: int = 1,
    ):
        if not trees:
            raise ValueError("A forest needs at least one tree.")
        for tree in trees:
            if tree.depth != depth or tree.n != data.n:
                raise ValueError("All trees must share the depth and the corpus.")
        self._data = data
        self._trees = list(trees)
        self._rule = rule.resolve(data.d)
        self._seed = seed
        self._depth = depth
        self._vote_threshold = vote_threshold
        self._stacked = None

    @property
    def data(self) -> DataMatrix:
        return self._data

    @property
    def trees(self) -> List[Tree]:
        return list(self._trees)

    @property
    def rule(self) -> SplitRule:
        return self._rule

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def depth(self) -> int:
        return self._depth

    @property
    def n_trees(self) -> int:
        return len(self._trees)

    @property
    def vote_threshold(self) -> int:
        """Default vote threshold stored with the index (e.g. after tuning)."""
        return self._vote_threshold

    def __len__(self) -> int:
        return len(self._trees)

    def _stacked_arrays(self):
        # Built once, on first use; racing threads compute the same arrays.
        if self._stacked is None:
            self._stacked = (
                np.stack([t.cuts for t in self._trees]),
                np.stack([t.dir_indices for t in self._trees]),
                np.stack([t.dir_weights for t in self._trees]),
            )
        return self._stacked

    def route(self, q, depth: Optional[int] = None) -> np.ndarray:
        """Return the heap node reached at level 'depth' in every tree.

        All trees descend together, one vectorized step per level.
        """
        if depth is None:
            depth = self._depth
        if not 0 <= depth <= self._depth:
            raise ValueError("Depth {} outside [0, {}].".format(depth, self._depth))
        q = np.asarray(q, dtype=np.float32)
        cuts, dir_indices, dir_weights = self._stacked_arrays()
        return descend(
            q, cuts, dir_indices, dir_weights, depth, self._rule.shares_levels
        )

    def leaves(self, q, depth: Optional[int] = None) -> List[np.ndarray]:
        """Return q's node points (at level 'depth') in every tree."""
        nodes = self.route(q, depth)
        ranges = node_ranges(self._data.n, self._depth)
        return [
            tree.permutation[ranges[node, 0] : ranges[node, 1]]
            for tree, node in zip(self._trees, nodes)
        ]

    def subset(self, n_trees: int, depth: int) -> "Forest":
        """Return the first 'n_trees' trees pruned to 'depth'."""
        if not 1 <= n_trees <= len(self._trees):
            raise ValueError(
                "n_trees must be in [1, {}], got {}.".format(len(self._trees), n_trees)
            )
        if not 1 <= depth <= self._depth:
            raise ValueError(
                "depth must be in [1, {}], got {}.".format(self._depth, depth)
            )
        if n_trees == len(self._trees) and depth == self._depth:
            return self
        trees = [tree.truncate(depth) for tree in self._trees[:n_trees]]
        return Forest(
            self._data, trees, self._rule, self._seed, depth, self._vote_threshold
        )

    def with_vote_threshold(self, vote_threshold: int) -> "Forest":
        if vote_threshold < 1:
            raise ValueError("vote_threshold must be >= 1.")
        return Forest(
            self._data, self._trees, self._rule, self._seed, self._depth, vote_threshold
        )

    def __repr__(self) -> str:
        return "Forest({}, T={}, depth={}, n={}, d={})".format(
            self._rule.variant.value,
            len(self._trees),
            self._depth,
            self._data.n,
            self._data.d,
        )
