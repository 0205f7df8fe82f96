"""bench.py.

Recall versus query time sweeps.

For every tree type one forest of the largest requested size is grown;
every smaller (trees, depth) configuration is a prefix subset of it, so
the build cost is paid once per tree type. Each configuration is then
measured on held-out test queries with voting and/or priority search,
and optionally compared with the autotuned parameters for some targets.
"""
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import pandas as pd

# Local Imports
from autoforest.utils import logger
from autoforest.dataset import DataMatrix, GroundTruth
from autoforest.trees import SplitRule, grow_forest
from autoforest.search import SearchParams, Strategy, evaluate_queries
from autoforest.timemodel import TimeModel, TimeModelPlan
from autoforest.autotune import (
    RecallTarget,
    Target,
    TuningLimits,
    generate_index_auto,
    select_parameters,
    tuned_index,
)


AUTOTUNE_STRATEGY = "autotune"


@dataclass(frozen=True)
class BenchRow:
    """One measured configuration.

    'param' is the vote threshold for voting rows and the number of extra
    branches for priority rows.
    """

    tree_type: str
    strategy: str
    n_trees: int
    depth: int
    param: int
    recall: float
    seconds: float
    build_seconds: float
    tuning_seconds: float = 0.0
    target: str = ""


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def add(self, row: BenchRow):
        self.rows.append(row)

    def sorted_rows(self) -> List[BenchRow]:
        """Rows ordered by recall, then by time."""
        return sorted(self.rows, key=lambda row: (row.recall, row.seconds))

    def to_frame(self) -> pd.DataFrame:
        columns = list(BenchRow.__dataclass_fields__)
        return pd.DataFrame([asdict(row) for row in self.sorted_rows()], columns=columns)

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)

    def save_json(self, path: str):
        with open(path, "w") as stm:
            json.dump([asdict(row) for row in self.sorted_rows()], stm, indent=2)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class BenchGrid:
    """The configurations to sweep."""

    tree_types: Sequence[str]
    strategies: Sequence[str]
    trees: Sequence[int]
    depths: Sequence[int]
    votes: Sequence[int] = (1,)
    branches: Sequence[int] = (0,)
    targets: Sequence[Target] = ()

    def __post_init__(self):
        for name in ("tree_types", "strategies", "trees", "depths"):
            if not getattr(self, name):
                raise ValueError("The bench grid needs at least one of '{}'.".format(name))
        for strategy in self.strategies:
            Strategy(strategy)


def _describe(target: Target) -> str:
    if isinstance(target, RecallTarget):
        return "recall={}".format(target.recall)
    return "time={}s".format(target.seconds)


def run_bench(
    corpus: DataMatrix,
    test: DataMatrix,
    truth: GroundTruth,
    grid: BenchGrid,
    rule: SplitRule,
    seed: int = 0,
    repeats: int = 3,
    validation: Optional[DataMatrix] = None,
    model: Optional[TimeModel] = None,
    plan: Optional[TimeModelPlan] = None,
    workers: Optional[int] = None,
) -> BenchReport:
    """Measure every configuration of 'grid' on the test queries.

    Voting thresholds above the number of trees are skipped. Autotuned
    rows need 'validation' queries.
    """
    k = truth.k
    report = BenchReport()
    for tree_type in grid.tree_types:
        type_rule = replace(rule, variant=tree_type)
        started = time.perf_counter()
        forest = grow_forest(
            corpus, max(grid.trees), max(grid.depths), type_rule, seed, workers
        )
        build_seconds = time.perf_counter() - started

        for n_trees in sorted(grid.trees):
            for depth in sorted(grid.depths):
                sub = forest.subset(n_trees, depth)
                for strategy in grid.strategies:
                    if Strategy(strategy) is Strategy.VOTING:
                        settings = [
                            (v, SearchParams.voting(k, v)) for v in grid.votes if v <= n_trees
                        ]
                    else:
                        settings = [(b, SearchParams.priority(k, b)) for b in grid.branches]
                    for param, params in settings:
                        result = evaluate_queries(sub, test, truth, params, repeats)
                        report.add(
                            BenchRow(
                                tree_type,
                                Strategy(strategy).value,
                                n_trees,
                                depth,
                                param,
                                result.recall,
                                result.elapsed,
                                build_seconds,
                            )
                        )

        if grid.targets:
            if validation is None:
                raise ValueError("Autotuned bench rows need validation queries.")
            limits = TuningLimits.for_corpus(corpus.n, k, max_trees=max(grid.trees))
            started = time.perf_counter()
            tuning = generate_index_auto(
                corpus,
                validation,
                k,
                limits,
                type_rule,
                model=model,
                seed=seed,
                workers=workers,
                plan=plan,
            )
            total = time.perf_counter() - started
            for target in grid.targets:
                selected = select_parameters(tuning, target)
                index = tuned_index(tuning, selected)
                params = SearchParams.voting(k, selected.vote_threshold)
                result = evaluate_queries(index, test, truth, params, repeats)
                report.add(
                    BenchRow(
                        tree_type,
                        AUTOTUNE_STRATEGY,
                        selected.n_trees,
                        selected.depth,
                        selected.vote_threshold,
                        result.recall,
                        result.elapsed,
                        tuning.timings["build"],
                        total - tuning.timings["build"],
                        _describe(target),
                    )
                )
        logger.info("Benchmarked %s trees: %d rows so far", tree_type, len(report))
    return report
