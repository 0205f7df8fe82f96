"""autotune.py.

Parameter tuning for voting search.

One maximal forest (max_trees trees of depth max_depth) is grown once.
Every validation query is then routed through it a single time, and for
every lattice cell (depth, trees, votes) the tuner counts how many true
neighbors and how many corpus points would be elected. Thanks to the
prefix structure of the forest (the first T trees pruned to a depth are
themselves a valid forest) the counts for all cells come out of one
incremental pass per depth. Averaged over the queries they give the
expected recall and candidate set size of every cell, and the fitted
time model turns the latter into an expected query time.
"""
import json
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

# Local Imports
from autoforest.utils import ForestError, logger, map_in_threads
from autoforest.dataset import DataMatrix, ground_truth
from autoforest.trees import (
    Forest,
    SplitRule,
    Tree,
    TreeType,
    grow_forest,
    max_depth as _max_depth,
    node_ranges,
    traverse,
)
from autoforest.search import VoteCounter, thread_counter
from autoforest.timemodel import (
    TimeModel,
    TimeModelPlan,
    fit_time_model,
    predict_time,
)


class TuningError(ForestError):
    """Error implying the tuning inputs or results are unusable."""


DEFAULT_MAX_TREES = 64
DEFAULT_VALIDATION_QUERIES = 100
SHALLOWEST_DEPTH_OFFSET = 8
"""The default min_depth sits this many levels above the maximal depth."""


@dataclass(frozen=True)
class TuningLimits:
    """The lattice searched: trees 1..max_trees, depths min_depth..max_depth
    and vote thresholds 1..max_votes, for k neighbors.
    """

    max_trees: int
    min_depth: int
    max_depth: int
    max_votes: int
    k: int

    def __post_init__(self):
        if self.max_trees < 1:
            raise ValueError("max_trees must be >= 1, got {}.".format(self.max_trees))
        if not 1 <= self.min_depth <= self.max_depth:
            raise ValueError(
                "Need 1 <= min_depth <= max_depth, got {} and {}.".format(
                    self.min_depth, self.max_depth
                )
            )
        if not 1 <= self.max_votes <= self.max_trees:
            raise ValueError(
                "max_votes must be in [1, max_trees], got {}.".format(self.max_votes)
            )
        if self.k < 1:
            raise ValueError("k must be >= 1, got {}.".format(self.k))

    @classmethod
    def for_corpus(
        cls,
        n: int,
        k: int,
        max_trees: int = DEFAULT_MAX_TREES,
        min_depth: Optional[int] = None,
        max_depth: Optional[int] = None,
        max_votes: Optional[int] = None,
    ) -> "TuningLimits":
        """Fill in the defaults for a corpus of n points.

        max_depth is floor(log2 n), min_depth sits 8 levels higher (at
        least 1) and max_votes equals max_trees.
        """
        deepest = _max_depth(n)
        if deepest < 1:
            raise ValueError("A corpus of {} point(s) cannot be split.".format(n))
        if max_depth is None:
            max_depth = deepest
        if min_depth is None:
            min_depth = max(1, min(max_depth, deepest - SHALLOWEST_DEPTH_OFFSET))
        if max_votes is None:
            max_votes = max_trees
        limits = cls(max_trees, min_depth, max_depth, max_votes, k)
        limits.check(n)
        return limits

    def check(self, n: int):
        if self.max_depth > _max_depth(n):
            raise ValueError(
                "max_depth {} exceeds floor(log2 n) = {}.".format(
                    self.max_depth, _max_depth(n)
                )
            )
        if self.k > n:
            raise ValueError("k = {} exceeds the corpus size {}.".format(self.k, n))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.max_depth - self.min_depth + 1, self.max_trees, self.max_votes)

    @property
    def depths(self) -> range:
        return range(self.min_depth, self.max_depth + 1)


class ElectionTensor(object):
    """Counts of elected points per (depth, trees, votes) cell.

    Entry (depth - min_depth, T - 1, v - 1) is the number of points with
    at least v votes among the first T trees pruned to 'depth'.
    """

    def __init__(self, limits: TuningLimits, counts: Optional[np.ndarray] = None):
        if counts is None:
            counts = np.zeros(limits.shape, dtype=np.int64)
        elif counts.shape != limits.shape:
            raise ValueError(
                "Counts of shape {} do not match {}.".format(counts.shape, limits.shape)
            )
        self._limits = limits
        self._counts = counts

    @property
    def limits(self) -> TuningLimits:
        return self._limits

    @property
    def counts(self) -> np.ndarray:
        return self._counts

    def at(self, n_trees: int, depth: int, votes: int) -> int:
        return int(
            self._counts[depth - self._limits.min_depth, n_trees - 1, votes - 1]
        )

    def __add__(self, other: "ElectionTensor") -> "ElectionTensor":
        return ElectionTensor(self._limits, self._counts + other._counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ElectionTensor):
            return NotImplemented
        return np.array_equal(self._counts, other._counts)


#
# Vote Counting
#
def _reached_counts(tallies: np.ndarray, max_votes: int) -> np.ndarray:
    # Component v - 1 counts the points whose tally just became v.
    return np.bincount(tallies, minlength=max_votes + 1)[1 : max_votes + 1]


def count_votes(
    tree: Tree,
    depth: int,
    q,
    members: Optional[np.ndarray],
    votes: VoteCounter,
    max_votes: Optional[int] = None,
) -> np.ndarray:
    """Vote for the member points of q's node at 'depth' in one tree.

    'members' holds the indices of the points to count (None counts every
    point). Returns a vector whose component v - 1 is the number of
    points whose tally reached exactly v in this call. Summed over the
    trees processed so far, component v - 1 is the number of points with
    at least v votes, since tallies only grow by one per tree.
    """
    start, end = traverse(tree, q, depth)
    points = tree.permutation[start:end]
    if members is not None:
        points = points[np.isin(points, members)]
    tallies = votes.add(points)
    if max_votes is None:
        max_votes = int(tallies.max()) if tallies.size else 1
    return _reached_counts(tallies, max_votes)


def count_elected(
    forest: Forest, limits: TuningLimits, q, members: Optional[np.ndarray]
) -> ElectionTensor:
    """Election counts of the member points for every lattice cell.

    A single running vector per depth accumulates the count_votes
    increments over the trees; its value after tree T is the row (T, .).
    """
    _check_forest(forest, limits)
    q = np.asarray(q, dtype=np.float32)
    trees = forest.trees[: limits.max_trees]
    counter = thread_counter(forest.data.n)
    tensor = ElectionTensor(limits)
    try:
        for row, depth in enumerate(limits.depths):
            running = np.zeros(limits.max_votes, dtype=np.int64)
            for t, tree in enumerate(trees):
                running += count_votes(
                    tree, depth, q, members, counter, limits.max_votes
                )
                tensor.counts[row, t] = running
            counter.reset()
    finally:
        counter.reset()
    return tensor


def _count_both(
    forest: Forest, limits: TuningLimits, q: np.ndarray, truth_row: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return the (true neighbor, all point) election counts in one pass.

    q is routed once to the deepest level; its node at a shallower level
    is an ancestor of that leaf. Each point's tally is shared by both
    counts, the true neighbors are simply tagged.
    """
    n = forest.data.n
    trees = forest.trees[: limits.max_trees]
    ranges = node_ranges(n, forest.depth)
    leaves = forest.route(q, forest.depth)[: limits.max_trees]
    counter = thread_counter(n)
    found = np.zeros(limits.shape, dtype=np.int64)
    elected = np.zeros(limits.shape, dtype=np.int64)
    try:
        for row, depth in enumerate(limits.depths):
            nodes = ((leaves + 1) >> (forest.depth - depth)) - 1
            found_run = np.zeros(limits.max_votes, dtype=np.int64)
            elected_run = np.zeros(limits.max_votes, dtype=np.int64)
            for t, (tree, node) in enumerate(zip(trees, nodes)):
                start, end = ranges[node]
                points = tree.permutation[start:end]
                tallies = counter.add(points)
                elected_run += _reached_counts(tallies, limits.max_votes)
                found_run += _reached_counts(
                    tallies[np.isin(points, truth_row)], limits.max_votes
                )
                found[row, t] = found_run
                elected[row, t] = elected_run
            counter.reset()
    finally:
        counter.reset()
    return found, elected


def _check_forest(forest: Forest, limits: TuningLimits):
    if forest.n_trees < limits.max_trees or forest.depth < limits.max_depth:
        raise ValueError(
            "Forest (T={}, depth={}) is smaller than the limits (T={}, depth={}).".format(
                forest.n_trees, forest.depth, limits.max_trees, limits.max_depth
            )
        )


#
# Tuning
#
@dataclass
class TuningResult:
    """Per-cell estimates over the lattice of 'limits'.

    The grids are indexed (depth - min_depth, T - 1, v - 1).
    """

    recall_grid: np.ndarray
    candidate_grid: np.ndarray
    time_grid: np.ndarray
    forest: Forest
    limits: TuningLimits
    model: TimeModel
    timings: Dict[str, float] = field(default_factory=dict)

    def cell(self, n_trees: int, depth: int, votes: int) -> Tuple[float, float, float]:
        """Return (recall, mean candidates, seconds) of one cell."""
        pos = (depth - self.limits.min_depth, n_trees - 1, votes - 1)
        return (
            float(self.recall_grid[pos]),
            float(self.candidate_grid[pos]),
            float(self.time_grid[pos]),
        )

    def to_frame(self) -> pd.DataFrame:
        """One row per cell, in (depth, trees, votes) order."""
        depth, trees, votes = _lattice(self.limits)
        return pd.DataFrame(
            dict(
                depth=depth,
                trees=trees,
                votes=votes,
                recall=self.recall_grid.ravel(),
                candidates=self.candidate_grid.ravel(),
                seconds=self.time_grid.ravel(),
            )
        )

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)

    def to_dict(self, selected: Optional["SelectedParams"] = None) -> dict:
        return dict(
            limits=asdict(self.limits),
            tree_type=self.forest.rule.variant.value,
            seed=self.forest.seed,
            grid_order=["depth", "trees", "votes"],
            recall_grid=self.recall_grid.ravel().tolist(),
            candidate_grid=self.candidate_grid.ravel().tolist(),
            time_grid=self.time_grid.ravel().tolist(),
            model=self.model.to_dict(),
            timings=dict(self.timings),
            selected=asdict(selected) if selected is not None else None,
        )

    def save_json(self, path: str, selected: Optional["SelectedParams"] = None):
        with open(path, "w") as stm:
            json.dump(self.to_dict(selected), stm, indent=2)


def _lattice(limits: TuningLimits) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (depth, trees, votes) coordinates of every cell."""
    rows, trees, votes = np.indices(limits.shape).reshape(3, -1)
    return rows + limits.min_depth, trees + 1, votes + 1


def generate_index_auto(
    data: DataMatrix,
    queries: DataMatrix,
    k: int,
    limits: Optional[TuningLimits] = None,
    rule: Optional[SplitRule] = None,
    model: Optional[TimeModel] = None,
    seed: int = 0,
    workers: Optional[int] = None,
    plan: Optional[TimeModelPlan] = None,
) -> TuningResult:
    """Grow the maximal forest and estimate every lattice cell.

    When no time model is supplied, one is fitted for this corpus.
    """
    if queries is None or queries.n < 1:
        raise TuningError("Tuning needs at least one validation query.")
    if queries.d != data.d:
        raise ValueError(
            "Queries have d={}, corpus has d={}.".format(queries.d, data.d)
        )
    if limits is None:
        limits = TuningLimits.for_corpus(data.n, k)
    if limits.k != k:
        raise ValueError("Limits were made for k={}, not k={}.".format(limits.k, k))
    limits.check(data.n)
    rule = (rule or SplitRule()).resolve(data.d)
    timings = {}

    started = time.perf_counter()
    forest = grow_forest(
        data, limits.max_trees, limits.max_depth, rule, seed=seed, workers=workers
    )
    timings["build"] = time.perf_counter() - started

    started = time.perf_counter()
    truth = ground_truth(data, queries, k, workers)
    timings["ground_truth"] = time.perf_counter() - started

    started = time.perf_counter()
    partials = map_in_threads(
        lambda i: _count_both(forest, limits, queries.values[i], truth.rows[i]),
        range(queries.n),
        workers,
    )
    found = sum(part[0] for part in partials)
    elected = sum(part[1] for part in partials)
    timings["counting"] = time.perf_counter() - started

    if model is None:
        started = time.perf_counter()
        model = fit_time_model(data.d, data.n, limits, rule, plan)
        timings["time_model"] = time.perf_counter() - started
    elif model.d and model.d != data.d:
        logger.warning(
            "Time model was fitted for d=%d, corpus has d=%d.", model.d, data.d
        )

    recall_grid = found / float(k * queries.n)
    candidate_grid = elected / float(queries.n)
    depth, trees, _ = _lattice(limits)
    time_grid = predict_time(
        model,
        trees,
        depth,
        data.n,
        candidate_grid.ravel(),
        rkd=rule.variant is TreeType.RKD,
    ).reshape(limits.shape)

    logger.info(
        "Tuned %s over %d queries: build %.3fs, ground truth %.3fs, counting %.3fs",
        limits,
        queries.n,
        timings["build"],
        timings["ground_truth"],
        timings["counting"],
    )
    return TuningResult(
        recall_grid, candidate_grid, time_grid, forest, limits, model, timings
    )


#
# Targets And Selection
#
@dataclass(frozen=True)
class RecallTarget:
    """Reach at least this recall as fast as possible."""

    recall: float

    def __post_init__(self):
        if not 0 < self.recall <= 1:
            raise ValueError("Recall target must be in (0, 1], got {}.".format(self.recall))


@dataclass(frozen=True)
class TimeTarget:
    """Stay within this many seconds per query with the best recall."""

    seconds: float

    def __post_init__(self):
        if not self.seconds > 0:
            raise ValueError("Time target must be > 0, got {}.".format(self.seconds))


Target = Union[RecallTarget, TimeTarget]

_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6}
_TARGET_RE = re.compile(r"^\s*(recall|time)\s*=\s*([0-9.eE+-]+)\s*(s|ms|us)?\s*$")


def parse_target(text: str) -> Target:
    """Parse 'recall=0.9' or 'time=0.5ms' (units s, ms, us; default s)."""
    match = _TARGET_RE.match(text)
    if not match:
        raise ValueError(
            "Invalid target {!r}; expected recall=<r> or time=<t>[s|ms|us].".format(text)
        )
    kind, raw, unit = match.groups()
    try:
        value = float(raw)
    except ValueError:
        raise ValueError("Invalid number in target {!r}.".format(text))
    if kind == "recall":
        if unit:
            raise ValueError("A recall target takes no unit: {!r}.".format(text))
        return RecallTarget(value)
    return TimeTarget(value * _TIME_UNITS[unit or "s"])


@dataclass(frozen=True)
class SelectedParams:
    n_trees: int
    depth: int
    vote_threshold: int
    est_recall: float
    est_time: float
    target_met: bool = True


def select_parameters(result: TuningResult, target: Target) -> SelectedParams:
    """Pick the best cell for 'target'.

    A recall target picks the fastest cell reaching it; a time target
    picks the highest recall within it. Remaining ties go to the lower
    time, then fewer trees, then the deeper trees, then fewer votes. When
    no cell qualifies, the closest miss is returned with target_met
    False: the highest recall for a recall target, the fastest cell for a
    time target.
    """
    recalls = result.recall_grid.ravel()
    times = result.time_grid.ravel()
    if recalls.size == 0:
        raise TuningError("Cannot select parameters from an empty grid.")
    depth, trees, votes = _lattice(result.limits)
    tie_keys = (votes, -depth, trees, times)

    if isinstance(target, RecallTarget):
        qualifying = recalls >= target.recall
        primary = None
        fallback = -recalls
    elif isinstance(target, TimeTarget):
        qualifying = times <= target.seconds
        primary = -recalls
        fallback = None
    else:
        raise ValueError("Unknown target: {!r}".format(target))

    met = bool(qualifying.any())
    if met:
        candidates = np.flatnonzero(qualifying)
        extra = primary
    else:
        candidates = np.arange(recalls.size)
        extra = fallback
    keys = tie_keys if extra is None else tie_keys + (extra,)
    # lexsort sorts by the last key first.
    order = np.lexsort(tuple(key[candidates] for key in keys))
    best = int(candidates[order[0]])

    selected = SelectedParams(
        n_trees=int(trees[best]),
        depth=int(depth[best]),
        vote_threshold=int(votes[best]),
        est_recall=float(recalls[best]),
        est_time=float(times[best]),
        target_met=met,
    )
    if met:
        logger.info("Selected %s for %s", selected, target)
    else:
        logger.warning("No cell meets %s; falling back to %s", target, selected)
    return selected


def subset_index(forest: Forest, n_trees: int, depth: int) -> Forest:
    """The first 'n_trees' trees pruned to 'depth'; nothing is rebuilt."""
    return forest.subset(n_trees, depth)


def tuned_index(result: TuningResult, selected: SelectedParams) -> Forest:
    """The selected subset, carrying the selected vote threshold."""
    return subset_index(result.forest, selected.n_trees, selected.depth).with_vote_threshold(
        selected.vote_threshold
    )
