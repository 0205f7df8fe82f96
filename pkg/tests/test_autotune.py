"""test_autotune.py.

Test Cases for the 'autoforest.autotune' module.
"""
import json
import os
import tempfile
import unittest
import numpy as np
import pandas as pd
# Local Imports
from autoforest.dataset import DataMatrix, ground_truth, recall
from autoforest.trees import SplitRule, TreeType, grow_forest
from autoforest.search import (
    SearchParams,
    VoteCounter,
    candidates_voting,
    query_voting,
)
from autoforest.timemodel import LinearFit, TimeModel, predict_time
from autoforest.autotune import (
    ElectionTensor,
    RecallTarget,
    SelectedParams,
    TimeTarget,
    TuningError,
    TuningLimits,
    TuningResult,
    _count_both,
    count_elected,
    count_votes,
    generate_index_auto,
    parse_target,
    select_parameters,
    subset_index,
    tuned_index,
)


def random_data(n, d, seed=0):
    return DataMatrix(np.random.default_rng(seed).standard_normal((n, d)))


def fake_model(d):
    return TimeModel(
        projection=LinearFit(1e-6, 1e-7),
        voting=LinearFit(1e-6, 1e-8),
        distance=LinearFit(1e-6, 1e-7),
        d=d,
    )


def brute_force_tensor(forest, limits, q, members):
    """Count every lattice cell from scratch with candidates_voting."""
    counts = np.zeros(limits.shape, dtype=np.int64)
    for row, depth in enumerate(limits.depths):
        for t in range(limits.max_trees):
            sub = forest.subset(t + 1, depth)
            for v in range(limits.max_votes):
                elected = candidates_voting(sub, q, v + 1).indices
                if members is not None:
                    elected = elected[np.isin(elected, members)]
                counts[row, t, v] = elected.size
    return ElectionTensor(limits, counts)


def synthetic_result(limits, seed):
    """A TuningResult with random, tie-heavy grids and no forest."""
    rng = np.random.default_rng(seed)
    recalls = np.round(rng.uniform(size=limits.shape), 1)
    times = np.round(rng.uniform(size=limits.shape), 1) + 0.1
    return TuningResult(
        recalls, np.zeros(limits.shape), times, None, limits, fake_model(4))


def scan_best(result, key, qualifies):
    """Exhaustive scan: the minimum of 'key' over qualifying cells."""
    cells = []
    for row, depth in enumerate(result.limits.depths):
        for t in range(result.limits.max_trees):
            for v in range(result.limits.max_votes):
                rec = result.recall_grid[row, t, v]
                sec = result.time_grid[row, t, v]
                if qualifies(rec, sec):
                    cells.append((key(rec, sec, t + 1, depth, v + 1), (t + 1, depth, v + 1)))
    if not cells:
        return None
    return min(cells)[1]


class TuningLimitsTest(unittest.TestCase):

    def test_for_corpus(self):
        limits = TuningLimits.for_corpus(10000, 10)
        self.assertEqual(
            TuningLimits(max_trees=64, min_depth=5, max_depth=13, max_votes=64, k=10),
            limits)
        self.assertEqual((9, 64, 64), limits.shape)
        self.assertEqual(list(range(5, 14)), list(limits.depths))

        small = TuningLimits.for_corpus(100, 5, max_trees=8)
        self.assertEqual((1, 6, 8), (small.min_depth, small.max_depth, small.max_votes))

    def test_invalid(self):
        with self.assertRaises(ValueError):
            TuningLimits(4, 2, 5, 5, 10)
        with self.assertRaises(ValueError):
            TuningLimits(4, 5, 2, 4, 10)
        with self.assertRaises(ValueError):
            TuningLimits(4, 0, 2, 4, 10)
        with self.assertRaises(ValueError):
            TuningLimits(4, 1, 2, 4, 0)
        with self.assertRaises(ValueError):
            TuningLimits.for_corpus(100, 5, max_depth=7)
        with self.assertRaises(ValueError):
            TuningLimits.for_corpus(100, 101)
        with self.assertRaises(ValueError):
            TuningLimits.for_corpus(1, 1)


class CountVotesTest(unittest.TestCase):

    def setUp(self):
        # 1-D corpus 0..15: q = 5 lands in the leaf {4, 5, 6, 7} at depth 2.
        data = DataMatrix(np.arange(16, dtype=np.float32).reshape(16, 1))
        self.forest = grow_forest(data, 2, 3, SplitRule(TreeType.RKD), seed=0)
        self.tree = self.forest.trees[0]
        self.q = np.array([5.0])

    def test_first_tree(self):
        counter = VoteCounter(16)
        self.assertEqual(
            [4, 0, 0], count_votes(self.tree, 2, self.q, None, counter, 3).tolist())
        self.assertEqual([4, 5, 6, 7], counter.elected(1).tolist())

    def test_second_tree_overlap(self):
        counter = VoteCounter(16)
        # Votes of an earlier tree whose node shares the points 6 and 7.
        counter.add(np.array([6, 7, 8, 9]))
        self.assertEqual(
            [2, 2, 0], count_votes(self.tree, 2, self.q, None, counter, 3).tolist())

    def test_members(self):
        counter = VoteCounter(16)
        increments = count_votes(self.tree, 2, self.q, np.array([5, 7, 12]), counter, 2)
        self.assertEqual([2, 0], increments.tolist())
        self.assertEqual([5, 7], counter.elected(1).tolist())

    def test_default_vote_range(self):
        counter = VoteCounter(16)
        counter.add(np.array([4]))
        self.assertEqual([3, 1], count_votes(self.tree, 2, self.q, None, counter).tolist())


class CountElectedTest(unittest.TestCase):

    def setUp(self):
        self.data = random_data(300, 6, seed=21)
        self.limits = TuningLimits(max_trees=6, min_depth=2, max_depth=5, max_votes=6, k=5)
        self.forest = grow_forest(self.data, 6, 5, SplitRule(TreeType.RP), seed=4)
        self.queries = random_data(8, 6, seed=22)
        self.truth = ground_truth(self.data, self.queries, 5)

    def test_matches_brute_force(self):
        for q, row in zip(self.queries.values, self.truth.rows):
            for members in (None, row):
                self.assertEqual(
                    brute_force_tensor(self.forest, self.limits, q, members),
                    count_elected(self.forest, self.limits, q, members))

    def test_larger_forest(self):
        forest = grow_forest(self.data, 8, 6, SplitRule(TreeType.PCA), seed=1)
        q = self.queries.values[0]
        self.assertEqual(
            brute_force_tensor(forest, self.limits, q, None),
            count_elected(forest, self.limits, q, None))

    def test_empty_members(self):
        tensor = count_elected(
            self.forest, self.limits, self.queries.values[0], np.empty(0, dtype=np.int64))
        self.assertFalse(tensor.counts.any())

    def test_single_tree(self):
        limits = TuningLimits(max_trees=1, min_depth=2, max_depth=5, max_votes=1, k=5)
        q = self.queries.values[1]
        tensor = count_elected(self.forest, limits, q, None)
        for depth in limits.depths:
            self.assertEqual(
                len(self.forest.subset(1, depth).leaves(q)[0]), tensor.at(1, depth, 1))

    def test_fused_pass(self):
        for q, row in zip(self.queries.values, self.truth.rows):
            found, elected = _count_both(self.forest, self.limits, q, row)
            np.testing.assert_array_equal(
                count_elected(self.forest, self.limits, q, row).counts, found)
            np.testing.assert_array_equal(
                count_elected(self.forest, self.limits, q, None).counts, elected)

    def test_forest_too_small(self):
        limits = TuningLimits(max_trees=7, min_depth=2, max_depth=5, max_votes=6, k=5)
        with self.assertRaises(ValueError):
            count_elected(self.forest, limits, self.queries.values[0], None)

    def test_tensor_arithmetic(self):
        first = ElectionTensor(self.limits, np.ones(self.limits.shape, dtype=np.int64))
        total = first + first
        self.assertEqual(2, total.at(3, 4, 2))
        self.assertNotEqual(first, total)
        with self.assertRaises(ValueError):
            ElectionTensor(self.limits, np.zeros((1, 2, 3)))


class GenerateIndexAutoTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.data = random_data(400, 8, seed=31)
        cls.queries = random_data(15, 8, seed=32)
        cls.limits = TuningLimits(max_trees=6, min_depth=3, max_depth=6, max_votes=4, k=5)
        cls.model = fake_model(8)
        cls.result = generate_index_auto(
            cls.data, cls.queries, 5, cls.limits, SplitRule(TreeType.RP),
            cls.model, seed=3)
        cls.truth = ground_truth(cls.data, cls.queries, 5)

    def test_shapes_and_timings(self):
        result = self.result
        for grid in (result.recall_grid, result.candidate_grid, result.time_grid):
            self.assertEqual(self.limits.shape, grid.shape)
        self.assertTrue(np.all((result.recall_grid >= 0) & (result.recall_grid <= 1)))
        self.assertEqual({'build', 'ground_truth', 'counting'}, set(result.timings))
        self.assertEqual(6, result.forest.n_trees)
        self.assertEqual(6, result.forest.depth)

    def test_recall_monotone(self):
        grid = self.result.recall_grid
        self.assertTrue(np.all(np.diff(grid, axis=2) <= 1e-12))
        self.assertTrue(np.all(np.diff(grid, axis=1) >= -1e-12))

    def test_cells_match_replay(self):
        for n_trees, depth, votes in ((1, 3, 1), (4, 5, 2), (6, 6, 3), (6, 4, 4)):
            sub = subset_index(self.result.forest, n_trees, depth)
            params = SearchParams.voting(5, votes)
            recalls = []
            sizes = []
            for q, row in zip(self.queries.values, self.truth.rows):
                recalls.append(recall(query_voting(sub, q, params), row))
                sizes.append(len(candidates_voting(sub, q, votes)))
            est_recall, est_candidates, est_time = self.result.cell(n_trees, depth, votes)
            self.assertAlmostEqual(np.mean(recalls), est_recall)
            self.assertAlmostEqual(np.mean(sizes), est_candidates)
            self.assertAlmostEqual(
                predict_time(self.model, n_trees, depth, 400, est_candidates), est_time)

    def test_self_neighbor(self):
        queries = self.data.take([3, 50, 77, 399])
        result = generate_index_auto(
            self.data, queries, 1,
            TuningLimits(max_trees=3, min_depth=2, max_depth=5, max_votes=3, k=1),
            SplitRule(TreeType.RP), self.model, seed=5)
        np.testing.assert_array_equal(1.0, result.recall_grid[:, :, 0])

    def test_workers_do_not_change_result(self):
        threaded = generate_index_auto(
            self.data, self.queries, 5, self.limits, SplitRule(TreeType.RP),
            self.model, seed=3, workers=3)
        np.testing.assert_array_equal(self.result.recall_grid, threaded.recall_grid)
        np.testing.assert_array_equal(self.result.candidate_grid, threaded.candidate_grid)

    def test_invalid_inputs(self):
        with self.assertRaises(TuningError):
            generate_index_auto(self.data, None, 5, self.limits, model=self.model)
        with self.assertRaises(ValueError):
            generate_index_auto(self.data, self.queries, 4, self.limits, model=self.model)
        with self.assertRaises(ValueError):
            generate_index_auto(
                self.data, random_data(3, 7), 5, self.limits, model=self.model)

    def test_exports(self):
        frame = self.result.to_frame()
        self.assertEqual(int(np.prod(self.limits.shape)), len(frame))
        self.assertEqual(
            ['depth', 'trees', 'votes', 'recall', 'candidates', 'seconds'],
            list(frame.columns))
        first = frame.iloc[0]
        self.assertEqual((3, 1, 1), (first['depth'], first['trees'], first['votes']))
        self.assertAlmostEqual(self.result.recall_grid[0, 0, 0], first['recall'])

        selected = select_parameters(self.result, RecallTarget(0.5))
        with tempfile.TemporaryDirectory() as tmpdir:
            csv_path = os.path.join(tmpdir, 'grid.csv')
            self.result.save_csv(csv_path)
            loaded = pd.read_csv(csv_path)
            np.testing.assert_allclose(frame['seconds'], loaded['seconds'])

            json_path = os.path.join(tmpdir, 'report.json')
            self.result.save_json(json_path, selected)
            with open(json_path) as stm:
                report = json.load(stm)
        self.assertEqual(6, report['limits']['max_trees'])
        self.assertEqual('rp', report['tree_type'])
        self.assertEqual(len(frame), len(report['recall_grid']))
        self.assertEqual(selected.n_trees, report['selected']['n_trees'])
        self.assertEqual(TimeModel.from_dict(report['model']), self.model)

    def test_tuned_index(self):
        selected = select_parameters(self.result, RecallTarget(0.5))
        forest = tuned_index(self.result, selected)
        self.assertEqual(selected.n_trees, forest.n_trees)
        self.assertEqual(selected.depth, forest.depth)
        self.assertEqual(selected.vote_threshold, forest.vote_threshold)


class SelectParametersTest(unittest.TestCase):

    def test_single_cell(self):
        limits = TuningLimits(1, 1, 1, 1, 1)
        result = TuningResult(
            np.full((1, 1, 1), 0.9), np.ones((1, 1, 1)), np.full((1, 1, 1), 0.01),
            None, limits, fake_model(4))
        self.assertEqual(
            SelectedParams(1, 1, 1, 0.9, 0.01, True),
            select_parameters(result, RecallTarget(0.8)))

        missed = select_parameters(result, RecallTarget(0.99))
        self.assertFalse(missed.target_met)
        self.assertEqual((1, 1, 1), (missed.n_trees, missed.depth, missed.vote_threshold))

    def test_recall_target_matches_scan(self):
        limits = TuningLimits(max_trees=4, min_depth=2, max_depth=4, max_votes=4, k=5)
        for seed in range(20):
            result = synthetic_result(limits, seed)
            for goal in (0.3, 0.7, 0.9):
                expected = scan_best(
                    result,
                    lambda rec, sec, t, depth, v: (sec, t, -depth, v),
                    lambda rec, sec: rec >= goal)
                met = expected is not None
                if not met:
                    expected = scan_best(
                        result,
                        lambda rec, sec, t, depth, v: (-rec, sec, t, -depth, v),
                        lambda rec, sec: True)
                selected = select_parameters(result, RecallTarget(goal))
                self.assertEqual(
                    expected,
                    (selected.n_trees, selected.depth, selected.vote_threshold))
                self.assertEqual(met, selected.target_met)

    def test_time_target_matches_scan(self):
        limits = TuningLimits(max_trees=4, min_depth=2, max_depth=4, max_votes=4, k=5)
        for seed in range(20):
            result = synthetic_result(limits, seed)
            for budget in (0.15, 0.35, 0.75):
                expected = scan_best(
                    result,
                    lambda rec, sec, t, depth, v: (-rec, sec, t, -depth, v),
                    lambda rec, sec: sec <= budget)
                met = expected is not None
                if not met:
                    expected = scan_best(
                        result,
                        lambda rec, sec, t, depth, v: (sec, t, -depth, v),
                        lambda rec, sec: True)
                selected = select_parameters(result, TimeTarget(budget))
                self.assertEqual(
                    expected,
                    (selected.n_trees, selected.depth, selected.vote_threshold))
                self.assertEqual(met, selected.target_met)

    def test_empty_grid(self):
        limits = TuningLimits(1, 1, 1, 1, 1)
        result = TuningResult(
            np.empty(0), np.empty(0), np.empty(0), None, limits, fake_model(4))
        with self.assertRaises(TuningError):
            select_parameters(result, RecallTarget(0.5))


class ParseTargetTest(unittest.TestCase):

    def test_parse(self):
        self.assertEqual(RecallTarget(0.9), parse_target('recall=0.9'))
        self.assertEqual(RecallTarget(1.0), parse_target(' recall = 1 '))
        self.assertEqual(TimeTarget(2.0), parse_target('time=2'))
        self.assertAlmostEqual(5e-4, parse_target('time=0.5ms').seconds)
        self.assertAlmostEqual(1e-5, parse_target('time=10us').seconds)
        self.assertEqual(TimeTarget(0.25), parse_target('time=0.25s'))

    def test_invalid(self):
        for text in ('recall=1.01', 'recall=0', 'recall=0.5ms', 'speed=1',
                     'time=0', 'time=-1', 'recall=0.1.2', 'time=1h', ''):
            with self.assertRaises(ValueError, msg=text):
                parse_target(text)


class SubsetIndexTest(unittest.TestCase):

    def setUp(self):
        self.data = random_data(500, 10, seed=41)
        self.rule = SplitRule(TreeType.RP)
        self.forest = grow_forest(self.data, 8, 7, self.rule, seed=9)
        self.queries = random_data(20, 10, seed=42).values

    def answers(self, forest):
        params = SearchParams.voting(5, 1)
        return [query_voting(forest, q, params).tolist() for q in self.queries]

    def test_identity(self):
        self.assertIs(self.forest, subset_index(self.forest, 8, 7))

    def test_matches_fresh_forest(self):
        rng = np.random.default_rng(0)
        for _ in range(4):
            n_trees = int(rng.integers(1, 9))
            depth = int(rng.integers(1, 8))
            fresh = grow_forest(self.data, n_trees, depth, self.rule, seed=9)
            self.assertEqual(
                self.answers(fresh),
                self.answers(subset_index(self.forest, n_trees, depth)))

    def test_composition(self):
        twice = subset_index(subset_index(self.forest, 6, 5), 3, 2)
        once = subset_index(self.forest, 3, 2)
        self.assertEqual(self.answers(once), self.answers(twice))

    def test_out_of_range(self):
        with self.assertRaises(ValueError):
            subset_index(self.forest, 9, 4)
        with self.assertRaises(ValueError):
            subset_index(self.forest, 4, 8)
        with self.assertRaises(ValueError):
            subset_index(self.forest, 0, 4)


if __name__ == '__main__':
    unittest.main()
