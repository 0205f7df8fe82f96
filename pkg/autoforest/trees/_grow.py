"""_grow.py.

Growing trees and forests.

Randomness is keyed by position, never by visiting order: node i of
tree t draws from SeedSequence(seed, spawn_key=(t, 0, i)) and the shared
direction of level j from SeedSequence(seed, spawn_key=(t, 1, j)). A
node's key is the heap id, which encodes the branches taken from the
root, so growing to depth l reproduces exactly the top l levels of any
deeper tree grown with the same seed.
"""
import time
from typing import Optional

import numpy as np

# Local Imports
from autoforest.utils import logger, map_in_threads
from autoforest.dataset import DataMatrix
from autoforest.trees._core import (
    DegenerateSplit,
    Direction,
    Forest,
    SplitRule,
    Split,
    Tree,
    index_order_split,
    level_of,
    max_depth,
    median_split,
    node_ranges,
    project,
)
from autoforest.trees._directions import AbstractDirectionGenerator, create_generator


MAX_SPLIT_RETRIES = 3
"""Fresh directions tried on a degenerate node before splitting by index."""


_NODE_STREAM = 0
_LEVEL_STREAM = 1


def _rng_for(seed: int, tree_index: int, stream: int, position: int):
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(tree_index, stream, position))
    )


def _split_node(
    values: np.ndarray,
    rows: np.ndarray,
    generator: AbstractDirectionGenerator,
    rng: np.random.Generator,
):
    node_values = values[rows]
    for _ in range(1 + MAX_SPLIT_RETRIES):
        direction = generator.generate(node_values, rng)
        proj = project(node_values, direction)
        try:
            return direction, median_split(proj, keys=rows)
        except DegenerateSplit:
            continue
    logger.debug("Degenerate node of %d points; splitting by index.", rows.size)
    return direction, index_order_split(proj, rows)


def _split_shared(values: np.ndarray, rows: np.ndarray, direction: Direction) -> Split:
    proj = project(values, direction, rows)
    try:
        return median_split(proj, keys=rows)
    except DegenerateSplit:
        # The level direction is fixed, so retrying cannot help.
        logger.debug("Degenerate node of %d points; splitting by index.", rows.size)
        return index_order_split(proj, rows)


def grow_tree(
    data: DataMatrix, depth: int, rule: SplitRule, seed: int = 0, tree_index: int = 0
) -> Tree:
    """Grow one tree of the given depth with median splits."""
    limit = max_depth(data.n)
    if not 1 <= depth <= limit:
        raise ValueError(
            "depth must be in [1, {}] for n = {}, got {}.".format(limit, data.n, depth)
        )
    if seed < 0:
        raise ValueError("seed must be non-negative, got {}.".format(seed))
    rule = rule.resolve(data.d)
    generator = create_generator(rule, data.d)
    shared = rule.shares_levels
    values = data.values

    n_internal = 2**depth - 1
    n_dirs = depth if shared else n_internal
    permutation = np.arange(data.n, dtype=np.int32)
    cuts = np.empty(n_internal, dtype=np.float64)
    dir_indices = np.empty((n_dirs, generator.nnz), dtype=np.int32)
    dir_weights = np.empty((n_dirs, generator.nnz), dtype=np.float64)
    ranges = node_ranges(data.n, depth)

    # Heap order visits the levels top-down.
    for node in range(n_internal):
        start, end = ranges[node]
        rows = permutation[start:end].copy()
        if shared:
            level = level_of(node)
            if node == 2**level - 1:
                direction = generator.random_direction(
                    _rng_for(seed, tree_index, _LEVEL_STREAM, level)
                )
                dir_indices[level] = direction.indices
                dir_weights[level] = direction.weights
            split = _split_shared(values, rows, direction)
        else:
            rng = _rng_for(seed, tree_index, _NODE_STREAM, node)
            direction, split = _split_node(values, rows, generator, rng)
            dir_indices[node] = direction.indices
            dir_weights[node] = direction.weights
        cuts[node] = split.cut
        permutation[start:end] = rows[np.concatenate((split.left, split.right))]

    return Tree(
        data.n,
        depth,
        permutation,
        cuts,
        dir_indices,
        dir_weights,
        shared,
        tree_index,
    )


def grow_forest(
    data: DataMatrix,
    n_trees: int,
    depth: int,
    rule: SplitRule,
    seed: int = 0,
    workers: Optional[int] = None,
) -> Forest:
    """Grow 'n_trees' independent trees; tree t is seeded by (seed, t).

    Trees are built concurrently when more than one worker is configured;
    the result does not depend on the worker count.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1, got {}.".format(n_trees))
    rule = rule.resolve(data.d)
    started = time.perf_counter()
    trees = map_in_threads(
        lambda t: grow_tree(data, depth, rule, seed, t), range(n_trees), workers
    )
    logger.info(
        "Grew %d %s trees of depth %d over n=%d in %.3fs",
        n_trees,
        rule.variant.value,
        depth,
        data.n,
        time.perf_counter() - started,
    )
    return Forest(data, trees, rule, seed, depth)
