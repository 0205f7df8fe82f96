"""forest_tool.py.

Command-line tool for autotuned forests with the following verbs:
 - groundtruth: exact k-NN of a query set, written as csv.
 - build: grow a forest with explicit (trees, depth) and save the index.
 - autotune: tune (trees, depth, votes) for a recall or time target and
        save the selected index with a JSON (or csv) tuning report.
 - query: answer a query batch with a saved index.
 - bench: sweep configurations and emit recall versus time rows.
 - inspect: print the header of a saved index as JSON.

Every flag may also come from a YAML run file passed with --config.
Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""
import sys
import json
import time
import logging
import argparse
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

# Local Imports
from autoforest.utils import ForestError, logger
from autoforest.dataset import (
    VECTOR_FORMATS,
    DataMatrix,
    GroundTruth,
    ground_truth,
    load_vectors,
    make_fixture,
    split_indices,
)
from autoforest.trees import (
    SplitRule,
    get_available_tree_types,
    grow_forest,
    load_forest,
    max_depth,
    read_header,
    save_forest,
)
from autoforest.search import SearchParams, Strategy, evaluate_queries, query_batch
from autoforest.timemodel import TimeModel, TimeModelPlan
from autoforest.autotune import (
    DEFAULT_MAX_TREES,
    DEFAULT_VALIDATION_QUERIES,
    TuningLimits,
    generate_index_auto,
    parse_target,
    select_parameters,
    tuned_index,
)
from autoforest.cli._run_file import load_run_file
from autoforest.cli.bench import BenchGrid, run_bench


FIXTURE_NAME = "fixture"
"""Value of --data selecting the built-in synthetic corpus."""

DEFAULT_SPLIT = (DEFAULT_VALIDATION_QUERIES, 100)

DEFAULT_LEAF_LEVELS = 5
"""Without --depth, build stops this many levels above floor(log2 n)."""


class UsageError(Exception):
    """Error implying the arguments are inconsistent; exits with code 2."""


#
# Argument Types
#
def positive_int(value) -> int:
    number = int(value)
    if number < 1:
        raise ValueError("expected a positive integer, got {}".format(value))
    return number


def int_list(value) -> List[int]:
    """Parse '1,2,4' (or a YAML list or a single int) into a list of ints."""
    if isinstance(value, int):
        return [value]
    if isinstance(value, (list, tuple)):
        return [int(item) for item in value]
    return [int(item) for item in str(value).split(",") if item.strip()]


def str_list(value) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(item).strip() for item in value]
    return [item.strip() for item in str(value).split(",") if item.strip()]


def split_spec(value) -> Tuple[int, int]:
    """Parse 'VAL,TEST' into the validation and test query counts."""
    counts = int_list(value)
    if len(counts) != 2 or min(counts) < 0:
        raise ValueError("expected VAL,TEST with non-negative counts, got {}".format(value))
    return counts[0], counts[1]


def target_list(value):
    return [parse_target(item) for item in str_list(value)]


#
# Parser
#
def _add_data_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--data",
        help=(
            "Corpus file (fvecs, raw-f32 or csv), or '{}' for the built-in "
            "synthetic corpus.".format(FIXTURE_NAME)
        ),
    )
    parser.add_argument(
        "--data-format",
        choices=VECTOR_FORMATS,
        default=None,
        help="Format of the vector files; inferred from the extension if omitted.",
    )
    parser.add_argument("--queries", help="File of query vectors.")
    parser.add_argument(
        "--split",
        type=split_spec,
        default=None,
        help=(
            "Hold VAL,TEST random corpus points out as validation and test "
            "queries; the rest is the corpus."
        ),
    )


def _add_tree_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--tree",
        choices=get_available_tree_types(),
        default="rp",
        help="Tree type. Default: %(default)s",
    )
    parser.add_argument("--m-top", type=positive_int, default=5)
    parser.add_argument("--sparsity", type=float, default=None)
    parser.add_argument("--pca-dims", type=positive_int, default=None)
    parser.add_argument("--learning-rate", type=float, default=0.01)
    parser.add_argument("--pca-iterations", type=positive_int, default=20)
    parser.add_argument(
        "--no-shared-levels",
        dest="shared_levels",
        action="store_false",
        help="Draw a direction per node instead of per level (rp trees).",
    )


def _add_common_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--verbose",
        "-v",
        action="count",
        default=0,
        help=("Increase verbosity. This option stacks for increasing verbosity."),
    )
    parser.add_argument("--config", help="YAML run file with flag defaults.")
    parser.add_argument("--seed", type=int, default=0, help="Default: %(default)s")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="autoforest",
        description=(
            "Approximate nearest neighbor search with forests of randomized "
            "trees and automatic tuning of the forest size, depth and vote "
            "threshold."
        ),
    )
    subparsers = parser.add_subparsers(dest="verb", metavar="VERB")
    subparsers.required = True
    verbs = {}

    sub = subparsers.add_parser("groundtruth", help="Compute exact k-NN as csv.")
    _add_common_options(sub)
    _add_data_options(sub)
    sub.add_argument("--k", type=positive_int, default=10)
    sub.add_argument("--out", help="Output csv path.")
    sub.set_defaults(handler=cmd_groundtruth)
    verbs["groundtruth"] = sub

    sub = subparsers.add_parser("build", help="Grow a forest and save the index.")
    _add_common_options(sub)
    _add_data_options(sub)
    _add_tree_options(sub)
    sub.add_argument("--trees", type=positive_int, default=10)
    sub.add_argument("--depth", type=positive_int, default=None)
    sub.add_argument("--votes", type=positive_int, default=1)
    sub.add_argument("--out", help="Output index path.")
    sub.set_defaults(handler=cmd_build)
    verbs["build"] = sub

    sub = subparsers.add_parser("autotune", help="Tune and save an index.")
    _add_common_options(sub)
    _add_data_options(sub)
    _add_tree_options(sub)
    sub.add_argument("--k", type=positive_int, default=10)
    sub.add_argument(
        "--target",
        type=parse_target,
        default=None,
        help="'recall=R' with R in (0, 1], or 'time=T' with unit s, ms or us.",
    )
    sub.add_argument("--tmax", type=positive_int, default=DEFAULT_MAX_TREES)
    sub.add_argument("--lmin", type=positive_int, default=None)
    sub.add_argument("--lmax", type=positive_int, default=None)
    sub.add_argument("--vmax", type=positive_int, default=None)
    sub.add_argument(
        "--include-validation",
        action="store_true",
        help="Keep the validation queries in the tuned corpus.",
    )
    sub.add_argument("--time-model", help="Use this fitted time model (JSON).")
    sub.add_argument("--save-time-model", help="Write the fitted time model here.")
    sub.add_argument("--rungs", type=positive_int, default=8)
    sub.add_argument("--repetitions", type=positive_int, default=5)
    sub.add_argument("--out", help="Output index path.")
    sub.add_argument("--report", help="Tuning report path.")
    sub.add_argument("--format", choices=("json", "csv"), default="json")
    sub.set_defaults(handler=cmd_autotune)
    verbs["autotune"] = sub

    sub = subparsers.add_parser("query", help="Answer queries with a saved index.")
    _add_common_options(sub)
    _add_data_options(sub)
    sub.add_argument("--index", help="Index path.")
    sub.add_argument("--k", type=positive_int, default=10)
    sub.add_argument(
        "--strategy", choices=[s.value for s in Strategy], default="voting"
    )
    sub.add_argument(
        "--votes",
        type=positive_int,
        default=None,
        help="Vote threshold; defaults to the one stored in the index.",
    )
    sub.add_argument("--branches", type=int, default=0)
    sub.add_argument("--depth", type=int, default=None)
    sub.add_argument("--truth", help="Ground truth csv for recall.")
    sub.add_argument("--repeats", type=positive_int, default=3)
    sub.add_argument("--out", help="Write the neighbors here instead of stdout.")
    sub.set_defaults(handler=cmd_query)
    verbs["query"] = sub

    sub = subparsers.add_parser("bench", help="Recall versus time sweeps.")
    _add_common_options(sub)
    _add_data_options(sub)
    _add_tree_options(sub)
    sub.add_argument("--k", type=positive_int, default=10)
    sub.add_argument("--trees-list", dest="trees_list", type=int_list, default=[1, 2, 4, 8, 16])
    sub.add_argument("--depths", type=int_list, default=[8])
    sub.add_argument("--votes-list", dest="votes_list", type=int_list, default=[1, 2, 3])
    sub.add_argument("--branches-list", dest="branches_list", type=int_list, default=[0, 8, 32])
    sub.add_argument("--strategies", type=str_list, default=["voting", "priority"])
    sub.add_argument(
        "--tree-types",
        dest="tree_types",
        type=str_list,
        default=None,
        help="Comma separated tree types; defaults to --tree.",
    )
    sub.add_argument(
        "--targets",
        type=target_list,
        default=[],
        help="Also measure the autotuned parameters for these targets.",
    )
    sub.add_argument("--time-model", help="Fitted time model (JSON) for --targets.")
    sub.add_argument("--repeats", type=positive_int, default=3)
    sub.add_argument("--out", help="Output report path.")
    sub.add_argument("--format", choices=("csv", "json"), default="csv")
    sub.set_defaults(handler=cmd_bench)
    verbs["bench"] = sub

    sub = subparsers.add_parser("inspect", help="Print an index header.")
    _add_common_options(sub)
    sub.add_argument("--index", help="Index path.")
    sub.set_defaults(handler=cmd_inspect)
    verbs["inspect"] = sub

    return parser, verbs


#
# Helpers
#
def _require(options, *names: str):
    missing = ["--" + name.replace("_", "-") for name in names if not getattr(options, name, None)]
    if missing:
        raise UsageError("Missing required option(s): {}".format(", ".join(missing)))


def _load_data(options) -> DataMatrix:
    _require(options, "data")
    if options.data == FIXTURE_NAME:
        return make_fixture()
    return load_vectors(options.data, options.data_format)


@dataclass
class Workload:
    corpus: DataMatrix
    validation: Optional[DataMatrix]
    test: Optional[DataMatrix]


def _load_workload(options, default_split=None, include_validation=False) -> Workload:
    """Corpus and query sets from --data plus --queries or --split.

    Queries read from a file serve as validation queries for tuning and
    as test queries otherwise; the caller picks which one it uses.
    """
    data = _load_data(options)
    split = options.split
    if options.queries:
        if split:
            raise UsageError("Use either --queries or --split, not both.")
        queries = load_vectors(options.queries, options.data_format)
        if queries.d != data.d:
            raise UsageError(
                "Queries have d={}, corpus has d={}.".format(queries.d, data.d)
            )
        return Workload(data, queries, queries)
    split = split or default_split
    if not split:
        raise UsageError("Give the queries with --queries or --split VAL,TEST.")
    m_val, m_test = split
    train, validation, test = split_indices(data.n, m_val, m_test, options.seed)
    corpus_rows = np.sort(np.concatenate((train, validation))) if include_validation else train
    return Workload(
        data.take(corpus_rows),
        data.take(validation) if m_val else None,
        data.take(test) if m_test else None,
    )


def _split_rule(options) -> SplitRule:
    return SplitRule(
        variant=options.tree,
        m_top=options.m_top,
        sparsity=options.sparsity,
        pca_dims=options.pca_dims,
        learning_rate=options.learning_rate,
        pca_iterations=options.pca_iterations,
        shared_levels=options.shared_levels,
    )


def _write_json(obj: Any, path: Optional[str]):
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w") as stm:
            stm.write(text + "\n")
    else:
        print(text)


#
# Verbs
#
def cmd_groundtruth(options) -> int:
    _require(options, "out")
    workload = _load_workload(options)
    queries = workload.test
    if queries is None:
        raise UsageError("The split holds no test queries.")
    truth = ground_truth(workload.corpus, queries, options.k)
    truth.save_csv(options.out)
    logger.info("Wrote %d x %d ground truth to %s", len(truth), truth.k, options.out)
    return 0


def cmd_build(options) -> int:
    _require(options, "out")
    data = _load_data(options)
    if options.split:
        train, _, _ = split_indices(data.n, *options.split, options.seed)
        data = data.take(train)
    depth = options.depth
    if depth is None:
        depth = max(1, max_depth(data.n) - DEFAULT_LEAF_LEVELS)
    forest = grow_forest(data, options.trees, depth, _split_rule(options), options.seed)
    forest = forest.with_vote_threshold(options.votes)
    save_forest(forest, options.out)
    logger.info("Saved %s to %s", forest, options.out)
    return 0


def cmd_autotune(options) -> int:
    _require(options, "target")
    started = time.perf_counter()
    workload = _load_workload(
        options, DEFAULT_SPLIT, include_validation=options.include_validation
    )
    if workload.validation is None:
        raise UsageError("Tuning needs validation queries.")
    corpus = workload.corpus
    limits = TuningLimits.for_corpus(
        corpus.n,
        options.k,
        max_trees=options.tmax,
        min_depth=options.lmin,
        max_depth=options.lmax,
        max_votes=options.vmax,
    )
    model = TimeModel.load(options.time_model) if options.time_model else None
    plan = TimeModelPlan(rungs=options.rungs, repetitions=options.repetitions)
    result = generate_index_auto(
        corpus,
        workload.validation,
        options.k,
        limits,
        _split_rule(options),
        model=model,
        seed=options.seed,
        plan=plan,
    )
    selected = select_parameters(result, options.target)
    elapsed = time.perf_counter() - started
    if options.save_time_model:
        result.model.save(options.save_time_model)

    index = tuned_index(result, selected)
    if options.out:
        save_forest(index, options.out)
        logger.info("Saved %s to %s", index, options.out)

    measured = None
    if workload.test is not None and not options.queries:
        truth = ground_truth(corpus, workload.test, options.k)
        measured = evaluate_queries(
            index, workload.test, truth, SearchParams.voting(options.k, selected.vote_threshold)
        )

    if options.report:
        if options.format == "csv":
            result.save_csv(options.report)
        else:
            report = result.to_dict(selected)
            report["tuning_seconds"] = elapsed
            report["test"] = asdict(measured) if measured else None
            _write_json(report, options.report)

    print(
        "selected: trees={} depth={} votes={}".format(
            selected.n_trees, selected.depth, selected.vote_threshold
        )
    )
    print("estimated recall: {:.3f}".format(selected.est_recall))
    print("estimated time: {:.6f} s/query".format(selected.est_time))
    if measured:
        print("test recall: {:.3f}".format(measured.recall))
        print("test time: {:.6f} s/query".format(measured.elapsed))
    print("tuning time: {:.3f} s".format(elapsed))
    if not selected.target_met:
        print("target not met")
    return 0


def cmd_query(options) -> int:
    _require(options, "index")
    workload = _load_workload(options)
    queries = workload.test
    if queries is None:
        raise UsageError("The split holds no test queries.")
    forest = load_forest(options.index, workload.corpus)
    votes = options.votes if options.votes is not None else forest.vote_threshold
    params = SearchParams(
        options.k,
        options.strategy,
        vote_threshold=votes,
        extra_branches=options.branches,
        depth=options.depth,
    )
    answers = query_batch(forest, queries, params)
    lines = [" ".join(str(i) for i in answer) for answer in answers]
    if options.out:
        with open(options.out, "w") as stm:
            stm.write("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)

    if options.truth:
        truth = GroundTruth.load_csv(options.truth)
        if truth.k < options.k or len(truth) != queries.n:
            raise UsageError(
                "Ground truth of shape {} does not cover {} queries at k={}.".format(
                    truth.rows.shape, queries.n, options.k
                )
            )
        truth = GroundTruth(truth.rows[:, : options.k])
        evaluation = evaluate_queries(forest, queries, truth, params, options.repeats)
        print("recall: {:.3f}".format(evaluation.recall))
        print("time: {:.6f} s/query".format(evaluation.elapsed))
    return 0


def cmd_bench(options) -> int:
    _require(options, "out")
    workload = _load_workload(options, DEFAULT_SPLIT)
    if workload.test is None:
        raise UsageError("Benchmarks need test queries.")
    grid = BenchGrid(
        tree_types=options.tree_types or [options.tree],
        strategies=options.strategies,
        trees=options.trees_list,
        depths=options.depths,
        votes=options.votes_list,
        branches=options.branches_list,
        targets=options.targets,
    )
    truth = ground_truth(workload.corpus, workload.test, options.k)
    report = run_bench(
        workload.corpus,
        workload.test,
        truth,
        grid,
        _split_rule(options),
        seed=options.seed,
        repeats=options.repeats,
        validation=workload.validation,
        model=TimeModel.load(options.time_model) if options.time_model else None,
    )
    if options.format == "json":
        report.save_json(options.out)
    else:
        report.save_csv(options.out)
    logger.info("Wrote %d bench rows to %s", len(report), options.out)
    return 0


def cmd_inspect(options) -> int:
    _require(options, "index")
    _write_json(read_header(options.index), None)
    return 0


#
# Entry Points
#
def _parse(argv: Optional[List[str]]):
    parser, verbs = build_parser()
    options = parser.parse_args(argv)
    if options.config:
        sub = verbs[options.verb]
        try:
            defaults = load_run_file(options.config, options.verb, sub._actions, verbs)
        except (OSError, ValueError) as exc:
            sub.error(str(exc))
        sub.set_defaults(**defaults)
        options = parser.parse_args(argv)
    return parser, verbs[options.verb], options


def main(argv: Optional[List[str]] = None) -> int:
    try:
        _, sub, options = _parse(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 after --help.
        return exc.code if isinstance(exc.code, int) else 2

    # Parse the logging options first.
    logger.setLevel(logging.INFO)
    if options.verbose > 0:
        logger.setLevel(logging.DEBUG)
    logging.basicConfig()

    try:
        return options.handler(options)
    except (UsageError, ValueError) as exc:
        sub.print_usage(sys.stderr)
        logger.error("%s", exc)
        return 2
    except (ForestError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    except Exception:
        logger.exception("Unknown error!")
        return 1


def start():
    sys.exit(main())


if __name__ == "__main__":
    start()
