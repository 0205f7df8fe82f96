"""search.py.

k-NN queries against a Forest.

Two candidate-selection strategies are supported:
 - voting: a point is a candidate if it shares q's leaf in at least v of
        the T trees.
 - priority queue: q's T leaves plus 'b' extra branches, chosen across
        all trees by the smallest |projection - cut| margin.
Either way the answer is the exact k-NN of q within the candidate set.
"""
import enum
import heapq
import itertools
import threading
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

# Local Imports
from autoforest.utils import logger, map_in_threads
from autoforest.dataset import (
    DataMatrix,
    GroundTruth,
    QueryEvaluation,
    recall,
    select_nearest,
    squared_distances,
)
from autoforest.trees import Forest, level_of


class Strategy(str, enum.Enum):
    VOTING = "voting"
    PRIORITY = "priority"


@dataclass(frozen=True)
class SearchParams:
    """Query-time parameters.

    'vote_threshold' is only read by voting search and 'extra_branches'
    only by priority search. 'depth' optionally searches the trees as if
    they were pruned to that level.
    """

    k: int = 10
    strategy: Strategy = Strategy.VOTING
    vote_threshold: int = 1
    extra_branches: int = 0
    depth: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.k < 1:
            raise ValueError("k must be >= 1, got {}.".format(self.k))
        if self.vote_threshold < 1:
            raise ValueError(
                "vote_threshold must be >= 1, got {}.".format(self.vote_threshold)
            )
        if self.extra_branches < 0:
            raise ValueError(
                "extra_branches must be >= 0, got {}.".format(self.extra_branches)
            )
        if self.depth is not None and self.depth < 0:
            raise ValueError("depth must be >= 0, got {}.".format(self.depth))

    @classmethod
    def voting(cls, k: int, vote_threshold: int = 1, depth: Optional[int] = None):
        return cls(k, Strategy.VOTING, vote_threshold=vote_threshold, depth=depth)

    @classmethod
    def priority(cls, k: int, extra_branches: int = 0, depth: Optional[int] = None):
        return cls(k, Strategy.PRIORITY, extra_branches=extra_branches, depth=depth)


class CandidateSet(object):
    """Distinct corpus indices, kept in ascending order."""

    def __init__(self, indices):
        self._indices = np.unique(np.asarray(indices, dtype=np.int64))

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    @property
    def size(self) -> int:
        return self._indices.size

    def __len__(self) -> int:
        return self._indices.size

    def __contains__(self, index) -> bool:
        pos = np.searchsorted(self._indices, index)
        return bool(pos < self._indices.size and self._indices[pos] == index)

    def issubset(self, other: "CandidateSet") -> bool:
        return np.isin(self._indices, other._indices).all()


class VoteCounter(object):
    """Reusable array of n vote counters.

    The touched list lets reset() clear only what was incremented, so a
    counter costs O(candidates) per query instead of O(n).
    """

    def __init__(self, n: int):
        self._votes = np.zeros(n, dtype=np.int32)
        self._touched: List[np.ndarray] = []

    @property
    def size(self) -> int:
        return self._votes.size

    def add(self, points: np.ndarray) -> np.ndarray:
        """Give one vote to each of 'points' (distinct) and return their tallies."""
        self._votes[points] += 1
        self._touched.append(points)
        return self._votes[points]

    def add_leaves(self, leaves: List[np.ndarray]) -> np.ndarray:
        """Give one vote per leaf to each of its points in a single pass.

        A point may sit in several leaves. Returns the sorted distinct
        points voted for.
        """
        if not leaves:
            return np.empty(0, dtype=np.int64)
        points, counts = np.unique(np.concatenate(leaves), return_counts=True)
        self._votes[points] += counts.astype(np.int32)
        self._touched.append(points)
        return points

    def elected(self, threshold: int) -> np.ndarray:
        """Return the sorted points with at least 'threshold' votes."""
        if not self._touched:
            return np.empty(0, dtype=np.int64)
        if len(self._touched) == 1:
            touched = np.sort(self._touched[0])
        else:
            touched = np.unique(np.concatenate(self._touched))
        return touched[self._votes[touched] >= threshold]

    def reset(self):
        for points in self._touched:
            self._votes[points] = 0
        self._touched.clear()


_scratch = threading.local()


def thread_counter(n: int) -> VoteCounter:
    """Return this thread's scratch counter for a corpus of n points."""
    # One counter per thread; queries on different threads never share one.
    counter = getattr(_scratch, "counter", None)
    if counter is None or counter.size != n:
        counter = VoteCounter(n)
        _scratch.counter = counter
    return counter


def elect(counter: VoteCounter, leaves: List[np.ndarray], vote_threshold: int) -> np.ndarray:
    """Return the points found in at least 'vote_threshold' of 'leaves'.

    The counter is left empty afterwards.
    """
    try:
        counter.add_leaves(leaves)
        return counter.elected(vote_threshold)
    finally:
        counter.reset()


def _as_query(forest: Forest, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (forest.data.d,):
        raise ValueError(
            "Query has shape {}, expected ({},).".format(q.shape, forest.data.d)
        )
    return q


def _final_search(forest: Forest, q: np.ndarray, candidates: CandidateSet, k: int):
    if not candidates.size:
        return np.empty(0, dtype=np.int64)
    dists = squared_distances(forest.data.values, q, candidates.indices)
    return select_nearest(candidates.indices, dists, k)


#
# Voting Search
#
def candidates_voting(
    forest: Forest, q, vote_threshold: int, depth: Optional[int] = None
) -> CandidateSet:
    """Points sharing q's node (at 'depth') in at least 'vote_threshold' trees.

    A threshold above the number of trees simply elects nobody.
    """
    q = _as_query(forest, q)
    counter = thread_counter(forest.data.n)
    return CandidateSet(elect(counter, forest.leaves(q, depth), vote_threshold))


def query_voting(forest: Forest, q, params: SearchParams) -> np.ndarray:
    """Exact k-NN within the voting candidates; may return fewer than k."""
    if params.strategy is not Strategy.VOTING:
        raise ValueError("query_voting needs a voting strategy.")
    q = _as_query(forest, q)
    candidates = candidates_voting(forest, q, params.vote_threshold, params.depth)
    return _final_search(forest, q, candidates, params.k)


#
# Priority Queue Search
#
def candidates_priority(
    forest: Forest, q, extra_branches: int, depth: Optional[int] = None
) -> CandidateSet:
    """Union of q's leaves and of 'extra_branches' best unexplored branches.

    One heap, keyed by |projection - cut|, is shared by all trees. Every
    descent, including those started from a popped branch, pushes the
    sibling it leaves behind. Equal margins pop in insertion order.
    """
    q = _as_query(forest, q)
    if depth is None:
        depth = forest.depth
    if not 0 <= depth <= forest.depth:
        raise ValueError("Depth {} outside [0, {}].".format(depth, forest.depth))
    trees = forest.trees
    heap = []
    order = itertools.count()
    leaves = []

    def _descend(tree_pos: int, node: int):
        tree = trees[tree_pos]
        while level_of(node) < depth:
            node, sibling, margin = tree.child_towards(node, q)
            heapq.heappush(heap, (margin, next(order), tree_pos, sibling))
        leaves.append(tree.node_points(node))

    for tree_pos in range(len(trees)):
        _descend(tree_pos, 0)
    for _ in range(extra_branches):
        if not heap:
            break
        _, _, tree_pos, node = heapq.heappop(heap)
        _descend(tree_pos, node)
    return CandidateSet(np.concatenate(leaves))


def query_priority(forest: Forest, q, params: SearchParams) -> np.ndarray:
    if params.strategy is not Strategy.PRIORITY:
        raise ValueError("query_priority needs a priority strategy.")
    q = _as_query(forest, q)
    candidates = candidates_priority(forest, q, params.extra_branches, params.depth)
    return _final_search(forest, q, candidates, params.k)


def query(forest: Forest, q, params: SearchParams) -> np.ndarray:
    if params.strategy is Strategy.VOTING:
        return query_voting(forest, q, params)
    return query_priority(forest, q, params)


def query_batch(
    forest: Forest,
    queries: DataMatrix,
    params: SearchParams,
    workers: Optional[int] = None,
) -> List[np.ndarray]:
    return map_in_threads(
        lambda q: query(forest, q, params), list(queries.values), workers
    )


def evaluate_queries(
    forest: Forest,
    queries: DataMatrix,
    truth: GroundTruth,
    params: SearchParams,
    repeats: int = 3,
) -> QueryEvaluation:
    """Mean recall and per-query time over a batch.

    The first pass is a warm-up that also provides the answers for the
    recall; the time is the median over 'repeats' timed passes of the mean
    per-query time.
    """
    if len(truth) != queries.n:
        raise ValueError(
            "Ground truth has {} rows for {} queries.".format(len(truth), queries.n)
        )
    if truth.k != params.k:
        raise ValueError(
            "Ground truth has k={}, search uses k={}.".format(truth.k, params.k)
        )
    rows = list(queries.values)
    answers = [query(forest, q, params) for q in rows]
    mean_recall = float(
        np.mean([recall(answer, truth_row) for answer, truth_row in zip(answers, truth.rows)])
    )
    timings = []
    for _ in range(max(1, repeats)):
        started = time.perf_counter()
        for q in rows:
            query(forest, q, params)
        timings.append((time.perf_counter() - started) / len(rows))
    elapsed = float(np.median(timings))
    logger.debug(
        "Evaluated %s on %d queries: recall=%.3f, %.6fs/query",
        params,
        len(rows),
        mean_recall,
        elapsed,
    )
    return QueryEvaluation(mean_recall, elapsed)
