"""timemodel.py.

Expected query time as a sum of three fitted linear components:
 - projection: routing the query, linear in z = T * depth (the number of
        sparse directions the query is projected onto).
 - voting: linear in y = T * n0, the votes cast, with n0 = ceil(n / 2^depth).
 - distance: linear in |S|, the mean candidate set size.

Each component is measured by a small timing experiment on a ladder of
workloads and fitted with the Theil-Sen estimator, which shrugs off the
occasional scheduler hiccup in the measurements. The routing and voting
experiments run the same code a query runs.
"""
import contextlib
import datetime
import json
import os
import time
from dataclasses import asdict, dataclass
from functools import partial
from typing import TYPE_CHECKING, Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# Local Imports
from autoforest.utils import ForestError, ceil_div, logger
from autoforest.dataset import select_nearest, squared_distances
from autoforest.trees import SplitRule, TreeType, descend
from autoforest.search import VoteCounter, elect

if TYPE_CHECKING:
    from autoforest.autotune import TuningLimits


class FitError(ForestError):
    """Error implying a linear fit could not be made or is missing."""


Point = Tuple[float, float]


@dataclass(frozen=True)
class LinearFit:
    """Seconds as 'intercept' + 'slope' * predictor."""

    intercept: float
    slope: float

    def __post_init__(self):
        if not (np.isfinite(self.intercept) and np.isfinite(self.slope)):
            raise FitError("Non-finite fit: {}".format(self))

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class TimeModelPlan:
    """How the timing experiments are run.

    Each rung of a ladder is measured 'repetitions' times; every
    measurement is the mean over 'inner_loops' calls and is kept as a
    separate point for the fit.
    """

    rungs: int = 8
    repetitions: int = 5
    inner_loops: int = 20
    warmup: bool = True
    pin_cpu: bool = True
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.rungs < 2:
            raise ValueError("rungs must be >= 2, got {}.".format(self.rungs))
        if self.repetitions < 1 or self.inner_loops < 1:
            raise ValueError("repetitions and inner_loops must be >= 1.")


def _utc_timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclass
class TimeModel:
    """Fitted time components for corpora of dimensionality 'd'."""

    projection: Optional[LinearFit] = None
    voting: Optional[LinearFit] = None
    distance: Optional[LinearFit] = None
    d: int = 0
    timestamp: str = ""

    @property
    def is_fitted(self) -> bool:
        return None not in (self.projection, self.voting, self.distance)

    def to_dict(self) -> dict:
        if not self.is_fitted:
            raise FitError("Cannot export an unfitted time model.")
        return dict(
            projection=asdict(self.projection),
            voting=asdict(self.voting),
            distance=asdict(self.distance),
            d=self.d,
            timestamp=self.timestamp,
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "TimeModel":
        try:
            return cls(
                projection=LinearFit(**obj["projection"]),
                voting=LinearFit(**obj["voting"]),
                distance=LinearFit(**obj["distance"]),
                d=int(obj["d"]),
                timestamp=str(obj.get("timestamp", "")),
            )
        except (KeyError, TypeError) as exc:
            raise FitError("Malformed time model: {}".format(exc)) from exc

    def save(self, path: str):
        with open(path, "w") as stm:
            json.dump(self.to_dict(), stm, indent=2)

    @classmethod
    def load(cls, path: str) -> "TimeModel":
        with open(path, "r") as stm:
            try:
                obj = json.load(stm)
            except json.JSONDecodeError as exc:
                raise FitError("{} is not a time model: {}".format(path, exc)) from exc
        return cls.from_dict(obj)


def _median(values: np.ndarray) -> float:
    # np.median averages the two central values of an even count.
    return float(np.median(values))


def theil_sen(points: Iterable[Point]) -> LinearFit:
    """Fit y = intercept + slope * x with the pairwise-median estimator.

    The slope is the median of the slopes of all pairs with distinct x;
    the intercept is the median of y - slope * x.
    """
    arr = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] < 2:
        raise FitError("Theil-Sen needs at least 2 points, got {}.".format(arr.shape[0]))
    x, y = arr[:, 0], arr[:, 1]
    i, j = np.triu_indices(x.size, k=1)
    dx = x[j] - x[i]
    keep = dx != 0
    if not np.any(keep):
        raise FitError("Theil-Sen needs at least 2 distinct x values.")
    slope = _median((y[j] - y[i])[keep] / dx[keep])
    intercept = _median(y - slope * x)
    return LinearFit(intercept, slope)


#
# Timing Experiments
#
@contextlib.contextmanager
def pinned_to_one_cpu(enabled: bool = True):
    """Pin the calling process to a single CPU for the duration.

    Platforms without sched_setaffinity run unpinned.
    """
    if not enabled or not hasattr(os, "sched_setaffinity"):
        yield
        return
    previous = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(previous)})
    except OSError:
        logger.debug("Could not pin to one CPU; timing unpinned.")
        yield
        return
    try:
        yield
    finally:
        os.sched_setaffinity(0, previous)


def _time_workload(
    sizes: Sequence[int],
    prepare: Callable[[int], Tuple[int, Callable[[], object]]],
    plan: TimeModelPlan,
) -> List[Point]:
    # prepare() returns the workload size it actually built with the run.
    points = []
    with pinned_to_one_cpu(plan.pin_cpu):
        for requested in sizes:
            size, run = prepare(int(requested))
            if plan.warmup:
                run()
            for _ in range(plan.repetitions):
                started = time.perf_counter()
                for _ in range(plan.inner_loops):
                    run()
                elapsed = (time.perf_counter() - started) / plan.inner_loops
                points.append((float(size), elapsed))
    return points


def _check_sizes(sizes: Sequence[int]):
    if len(sizes) < 2:
        raise ValueError("At least 2 sample sizes are needed, got {}.".format(len(sizes)))
    if min(sizes) < 0:
        raise ValueError("Sample sizes must be non-negative.")


def measure_projection_times(
    d: int,
    sparsity: float,
    sample_sizes: Sequence[int],
    plan: Optional[TimeModelPlan] = None,
    depth: int = 8,
    shared: bool = True,
) -> List[Point]:
    """Time routing one query through z = T * depth sparse directions.

    The query descends T random trees of 'depth' levels with the same
    per-level loop a Forest routes with, so z is rounded up to a multiple
    of 'depth'. Directions have ceil(sparsity * d) non-zero components,
    the count trees of that sparsity use.
    """
    _check_sizes(sample_sizes)
    if depth < 1:
        raise ValueError("depth must be >= 1, got {}.".format(depth))
    plan = plan or TimeModelPlan()
    rng = np.random.default_rng(plan.seed)
    nnz = max(1, min(d, int(np.ceil(sparsity * d - 1e-9))))
    rows = depth if shared else 2**depth - 1
    q = rng.standard_normal(d).astype(np.float32)

    def _prepare(z: int):
        n_trees = ceil_div(z, depth)
        cuts = rng.standard_normal((n_trees, 2**depth - 1))
        indices = np.sort(rng.integers(0, d, size=(n_trees, rows, nnz)), axis=-1)
        weights = rng.standard_normal((n_trees, rows, nnz))
        run = partial(descend, q, cuts, indices.astype(np.int32), weights, depth, shared)
        return n_trees * depth, run

    return _time_workload(sample_sizes, _prepare, plan)


def measure_voting_times(
    counter_size: int,
    sample_sizes: Sequence[int],
    plan: Optional[TimeModelPlan] = None,
    depth: int = 8,
) -> List[Point]:
    """Time electing candidates from y = T * n0 votes, n0 = ceil(n / 2^depth).

    The T leaves are slices of a shuffled corpus order, counted and
    elected by the same code a voting query runs, so y is rounded up to
    a multiple of n0.
    """
    _check_sizes(sample_sizes)
    if depth < 0:
        raise ValueError("depth must be >= 0, got {}.".format(depth))
    plan = plan or TimeModelPlan()
    rng = np.random.default_rng(plan.seed)
    counter = VoteCounter(counter_size)
    leaf_size = ceil_div(counter_size, 2**depth)
    order = rng.permutation(counter_size)

    def _prepare(y: int):
        n_trees = ceil_div(y, leaf_size)
        starts = rng.integers(0, counter_size - leaf_size + 1, size=n_trees)

        def _run():
            elect(counter, [order[start : start + leaf_size] for start in starts], 2)

        return n_trees * leaf_size, _run

    return _time_workload(sample_sizes, _prepare, plan)


def measure_distance_times(
    d: int,
    sample_sizes: Sequence[int],
    plan: Optional[TimeModelPlan] = None,
) -> List[Point]:
    """Time the exact k-NN of one query among |S| random d-vectors."""
    _check_sizes(sample_sizes)
    plan = plan or TimeModelPlan()
    rng = np.random.default_rng(plan.seed)
    values = rng.standard_normal((max(1, max(sample_sizes)), d)).astype(np.float32)
    q = rng.standard_normal(d).astype(np.float32)

    def _prepare(size: int):
        rows = np.sort(rng.choice(values.shape[0], size=size, replace=False))

        def _run():
            if rows.size:
                select_nearest(rows, squared_distances(values, q, rows), plan.k)

        return size, _run

    return _time_workload(sample_sizes, _prepare, plan)


def predict_time(
    model: TimeModel, n_trees, depth, n: int, mean_candidates, rkd: bool = False
):
    """Expected seconds per query; arguments broadcast as numpy arrays.

    The projection term is left out for RKD trees, whose coordinate-axis
    routing costs next to nothing.
    """
    if not model.is_fitted:
        raise FitError("predict_time needs a fitted time model.")
    n_trees = np.asarray(n_trees, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.int64)
    leaf_size = -(-n // (2 ** depth))
    total = model.voting(n_trees * leaf_size) + model.distance(mean_candidates)
    if not rkd:
        total = total + model.projection(n_trees * depth)
    if total.ndim == 0:
        return float(total)
    return total


#
# Fitting
#
def geometric_ladder(low: int, high: int, rungs: int) -> List[int]:
    """Distinct integers spread geometrically over [low, high]."""
    low = max(1, int(low))
    high = max(low + 1, int(high))
    ladder = np.unique(np.rint(np.geomspace(low, high, rungs)).astype(np.int64))
    return [int(x) for x in ladder]


def _fit_component(name: str, points: List[Point]) -> LinearFit:
    fit = theil_sen(points)
    if fit.slope < 0:
        logger.warning("Fitted %s time has a negative slope: %s", name, fit)
    logger.debug("Fitted %s time: %s", name, fit)
    return fit


def fit_time_model(
    d: int,
    n: int,
    limits: "TuningLimits",
    rule: SplitRule,
    plan: Optional[TimeModelPlan] = None,
) -> TimeModel:
    """Measure and fit all three components over the tuning lattice.

    The ladders span the workloads reachable from the smallest forest
    (one tree at the shallowest depth) to the largest one.
    """
    plan = plan or TimeModelPlan()
    rule = rule.resolve(d)
    started = time.perf_counter()
    # RKD routing uses one-component directions; the fit sees that too.
    sparsity = rule.nnz(d) / d if rule.variant is not TreeType.RKD else 1.0 / d

    # Per-level and per-tree costs are not proportional to z or y, so both
    # are measured at the middle depth of the lattice.
    depth = (limits.min_depth + limits.max_depth) // 2
    z_sizes = [
        trees * depth for trees in geometric_ladder(1, limits.max_trees, plan.rungs)
    ]
    y_sizes = geometric_ladder(
        ceil_div(n, 2**limits.max_depth),
        limits.max_trees * ceil_div(n, 2**limits.min_depth),
        plan.rungs,
    )
    s_sizes = geometric_ladder(1, n, plan.rungs)

    model = TimeModel(
        projection=_fit_component(
            "projection",
            measure_projection_times(
                d, sparsity, z_sizes, plan, depth=depth, shared=rule.shares_levels
            ),
        ),
        voting=_fit_component(
            "voting", measure_voting_times(n, y_sizes, plan, depth=depth)
        ),
        distance=_fit_component("distance", measure_distance_times(d, s_sizes, plan)),
        d=d,
        timestamp=_utc_timestamp(),
    )
    logger.info("Fitted the time model in %.3fs", time.perf_counter() - started)
    return model
