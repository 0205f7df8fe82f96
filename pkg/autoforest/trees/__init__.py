"""autoforest.trees module.

Randomized space-partitioning trees and forests.
"""
from autoforest.trees._core import (
    # Core Types
    TreeType,
    SplitRule,
    Direction,
    Split,
    Tree,
    Forest,
    DegenerateSplit,
    # Kernels
    project,
    project_query,
    median_split,
    index_order_split,
    node_ranges,
    max_depth,
    level_of,
    descend,
    traverse,
)
from autoforest.trees._directions import (
    AbstractDirectionGenerator,
    RandomizedKDGenerator,
    RandomProjectionGenerator,
    RandomizedPCAGenerator,
    sample_covariance,
    leading_direction,
    generate_direction,
    # Registry of the available tree types.
    get_available_tree_types,
    create_generator,
)
from autoforest.trees._grow import MAX_SPLIT_RETRIES, grow_tree, grow_forest
from autoforest.trees._codec import (
    IndexFormatError,
    IndexMismatchError,
    dump_forest,
    save_forest,
    load_forest,
    read_header,
)
