"""_directions.py.

Direction generators, one per tree type.

Each generator implements 'generate(node_values, rng)', the abstract
direction choice of the tree-growing recursion: it sees the (m, d)
values of the points in the node and a generator seeded for that node.
"""
from abc import ABC, abstractmethod
from typing import Dict, List, Type

import numpy as np

# Local Imports
from autoforest.dataset import DataMatrix
from autoforest.trees._core import Direction, SplitRule, TreeType


class AbstractDirectionGenerator(ABC):
    """Base interface for choosing split directions.

    Subclasses only decide *which* direction to use; projecting and
    splitting are shared. All directions made by one generator have the
    same number of non-zero components (see SplitRule.nnz).
    """

    def __init__(self, rule: SplitRule, d: int):
        self._rule = rule.resolve(d)
        self._d = d
        self._nnz = self._rule.nnz(d)

    @property
    def rule(self) -> SplitRule:
        return self._rule

    @property
    def nnz(self) -> int:
        return self._nnz

    @abstractmethod
    def generate(self, node_values: np.ndarray, rng: np.random.Generator) -> Direction:
        """Return the split direction for a node holding 'node_values'."""
        pass

    def random_direction(self, rng: np.random.Generator) -> Direction:
        """Sparse random unit vector with 'nnz' Gaussian components.

        This is also the fallback for nodes whose points are all identical,
        where data-dependent directions are undefined.
        """
        dims = np.sort(rng.choice(self._d, size=self._nnz, replace=False))
        while True:
            weights = rng.standard_normal(self._nnz)
            norm = np.linalg.norm(weights)
            if norm > 0:
                return Direction(dims, weights / norm)


class RandomProjectionGenerator(AbstractDirectionGenerator):
    """Sparse random projections; the node's data is not looked at."""

    def generate(self, node_values, rng):
        return self.random_direction(rng)


class RandomizedKDGenerator(AbstractDirectionGenerator):
    """Coordinate axis drawn uniformly among the 'm_top' highest-variance ones."""

    def generate(self, node_values, rng):
        variances = node_values.var(axis=0, ddof=1, dtype=np.float64)
        if not np.any(variances > 0):
            return self.random_direction(rng)
        top = np.argsort(-variances, kind="stable")[: self._rule.m_top]
        return Direction.one_hot(int(top[rng.integers(top.size)]))


class RandomizedPCAGenerator(AbstractDirectionGenerator):
    """Approximate leading principal component over 'pca_dims' random dims."""

    def generate(self, node_values, rng):
        dims = np.sort(rng.choice(self._d, size=self._rule.pca_dims, replace=False))
        cov = sample_covariance(node_values[:, dims])
        if not np.any(np.diag(cov) > 0):
            return self.random_direction(rng)
        weights = leading_direction(
            cov, self._rule.learning_rate, self._rule.pca_iterations
        )
        return Direction(dims, weights)


def sample_covariance(values: np.ndarray) -> np.ndarray:
    """Sample covariance of the rows of 'values', centered by their mean."""
    centered = values.astype(np.float64)
    centered -= centered.mean(axis=0)
    return centered.T @ centered / max(1, values.shape[0] - 1)


MAX_ITERATION_FACTOR = 50
"""Cap on the ascent steps, as a multiple of the requested iterations."""


def leading_direction(
    cov: np.ndarray, learning_rate: float, iterations: int, tolerance: float = 1e-8
) -> np.ndarray:
    """Gradient-ascent estimate of the leading eigenvector of 'cov'.

    Each step is w <- w + step * cov @ w followed by renormalization,
    where step is 'learning_rate' but never less than the inverse of the
    starting Rayleigh quotient, so the ascent moves at the same pace
    whatever the scale of the data. The start is the covariance column of
    the highest-variance coordinate, i.e. one power step from that axis.

    At least 'iterations' steps are taken. After that the ascent stops
    once the Rayleigh quotient grows by less than 'tolerance' (relative)
    in a step.
    """
    start = int(np.argmax(np.diag(cov)))
    w = cov[:, start].copy()
    w /= np.linalg.norm(w)
    quotient = float(w @ cov @ w)
    step = max(learning_rate, 1.0 / quotient) if quotient > 0 else learning_rate
    for iteration in range(iterations * MAX_ITERATION_FACTOR):
        w += step * (cov @ w)
        w /= np.linalg.norm(w)
        previous, quotient = quotient, float(w @ cov @ w)
        if iteration + 1 >= iterations and quotient - previous <= tolerance * abs(quotient):
            break
    return w


#
# Generator Registry
#
_GENERATOR_MAPPING: Dict[TreeType, Type[AbstractDirectionGenerator]] = {
    TreeType.RKD: RandomizedKDGenerator,
    TreeType.RP: RandomProjectionGenerator,
    TreeType.PCA: RandomizedPCAGenerator,
}


def get_available_tree_types() -> List[str]:
    return [tree_type.value for tree_type in _GENERATOR_MAPPING]


def create_generator(rule: SplitRule, d: int) -> AbstractDirectionGenerator:
    generator_type = _GENERATOR_MAPPING.get(rule.variant)
    if not generator_type:
        raise ValueError("Unrecognized tree type: {}".format(rule.variant))
    return generator_type(rule, d)


def generate_direction(
    data: DataMatrix, rows, rule: SplitRule, rng: np.random.Generator
) -> Direction:
    """Choose the split direction for the node holding 'rows' of 'data'."""
    generator = create_generator(rule, data.d)
    return generator.generate(data.values[np.asarray(rows)], rng)
