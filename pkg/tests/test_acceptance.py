"""test_acceptance.py.

End-to-end checks on the built-in synthetic corpus (n=10000, d=64).

These take minutes and depend on a quiet machine for the timing checks,
so they only run with AUTOFOREST_ACCEPTANCE=1.
"""
import os
import unittest
import numpy as np
# Local Imports
from autoforest.dataset import ground_truth, make_fixture, split_queries
from autoforest.trees import (
    SplitRule,
    TreeType,
    grow_forest,
    grow_tree,
    leading_direction,
    sample_covariance,
)
from autoforest.search import (
    SearchParams,
    candidates_voting,
    evaluate_queries,
    query_voting,
)
from autoforest.timemodel import TimeModelPlan, fit_time_model
from autoforest.autotune import (
    ElectionTensor,
    RecallTarget,
    TuningLimits,
    _count_both,
    count_elected,
    generate_index_auto,
    select_parameters,
    subset_index,
    tuned_index,
)


ACCEPTANCE_ENV_VAR = 'AUTOFOREST_ACCEPTANCE'
ENABLED = os.environ.get(ACCEPTANCE_ENV_VAR) == '1'

K = 10
PLAN = TimeModelPlan(rungs=6, repetitions=3, inner_loops=10)


def measured_recall_grid(forest, limits, queries, truth):
    """Test-set recall of every cell, counted like the tuner counts."""
    found = sum(
        _count_both(forest, limits, q, row)[0]
        for q, row in zip(queries.values, truth.rows))
    return found / float(limits.k * queries.n)


@unittest.skipIf(not ENABLED, 'Set {}=1 to run.'.format(ACCEPTANCE_ENV_VAR))
class FixtureAcceptanceTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.corpus, cls.validation, cls.test = split_queries(
            make_fixture(), 100, 100, seed=0)
        cls.truth = ground_truth(cls.corpus, cls.test, K)
        cls.limits = TuningLimits.for_corpus(cls.corpus.n, K, max_trees=32)
        cls.rule = SplitRule(TreeType.RP)
        cls.model = fit_time_model(
            cls.corpus.d, cls.corpus.n, cls.limits, cls.rule, PLAN)
        cls.result = generate_index_auto(
            cls.corpus, cls.validation, K, cls.limits, cls.rule, cls.model, seed=1)

    def test_estimated_recall_matches_test_recall(self):
        estimated = self.result.recall_grid
        measured = measured_recall_grid(
            self.result.forest, self.limits, self.test, self.truth)
        mask = (estimated >= 0.5) & (estimated <= 0.99)
        self.assertTrue(mask.any())
        self.assertLessEqual(np.abs(estimated - measured)[mask].mean(), 0.05)

    def test_tuning_overhead(self):
        timings = self.result.timings
        self.assertLessEqual(timings['counting'], 0.5 * timings['build'])

    def test_selection_is_near_optimal(self):
        measured = measured_recall_grid(
            self.result.forest, self.limits, self.test, self.truth)
        for goal in (0.8, 0.9):
            selected = select_parameters(self.result, RecallTarget(goal))
            index = tuned_index(self.result, selected)
            params = SearchParams.voting(K, selected.vote_threshold)
            chosen = evaluate_queries(index, self.test, self.truth, params)

            # Every (depth, trees) column reaching the same measured recall.
            # More votes never add candidates, so a column's fastest cell is
            # its largest qualifying threshold.
            qualifies = measured >= chosen.recall - 1e-9
            times = []
            for row, trees in zip(*np.nonzero(qualifies.any(axis=2))):
                votes = int(np.flatnonzero(qualifies[row, trees])[-1]) + 1
                sub = subset_index(
                    self.result.forest, int(trees) + 1, int(row) + self.limits.min_depth)
                times.append(evaluate_queries(
                    sub, self.test, self.truth, SearchParams.voting(K, votes)).elapsed)
            self.assertTrue(times)
            self.assertLessEqual(chosen.elapsed, 1.5 * min(times))

    def test_time_model_fidelity(self):
        for goal in (0.8, 0.9):
            selected = select_parameters(self.result, RecallTarget(goal))
            index = tuned_index(self.result, selected)
            measured = evaluate_queries(
                index, self.test, self.truth,
                SearchParams.voting(K, selected.vote_threshold))
            ratio = measured.elapsed / selected.est_time
            self.assertGreaterEqual(ratio, 0.5)
            self.assertLessEqual(ratio, 2.0)

    def test_voting_beats_priority(self):
        for variant in (TreeType.RKD, TreeType.RP, TreeType.PCA):
            forest = grow_forest(self.corpus, 32, 8, SplitRule(variant), seed=2)

            def fastest(settings):
                times = []
                for sub, params in settings:
                    evaluation = evaluate_queries(sub, self.test, self.truth, params)
                    if evaluation.recall >= 0.78:
                        times.append(evaluation.elapsed)
                return min(times) if times else None

            voting = fastest(
                (forest.subset(n_trees, 8), SearchParams.voting(K, votes))
                for n_trees in (8, 16, 32) for votes in (1, 2, 3, 4))
            priority = fastest(
                (forest.subset(n_trees, 8), SearchParams.priority(K, branches))
                for n_trees in (8, 16, 32) for branches in (0, 16, 64, 256))
            self.assertIsNotNone(voting, variant)
            if priority is not None:
                self.assertLess(voting, priority, variant)

    def test_recall_grows_with_trees(self):
        limits = TuningLimits(max_trees=16, min_depth=8, max_depth=8, max_votes=1, k=K)
        for variant in (TreeType.RKD, TreeType.RP, TreeType.PCA):
            forest = grow_forest(self.corpus, 16, 8, SplitRule(variant), seed=3)
            recalls = measured_recall_grid(forest, limits, self.test, self.truth)[0, :, 0]
            self.assertTrue(np.all(np.diff(recalls) >= -0.01), variant)

    def test_subset_answers_match_fresh_forest(self):
        forest = grow_forest(self.corpus, 8, 10, self.rule, seed=4)
        rng = np.random.default_rng(5)
        for _ in range(10):
            n_trees = int(rng.integers(1, 9))
            depth = int(rng.integers(4, 11))
            fresh = grow_forest(self.corpus, n_trees, depth, self.rule, seed=4)
            sub = subset_index(forest, n_trees, depth)
            params = SearchParams.voting(K, 1)
            for q in self.test.values:
                self.assertEqual(
                    query_voting(fresh, q, params).tolist(),
                    query_voting(sub, q, params).tolist())


@unittest.skipIf(not ENABLED, 'Set {}=1 to run.'.format(ACCEPTANCE_ENV_VAR))
class OracleAcceptanceTest(unittest.TestCase):

    def test_election_counts_match_brute_force(self):
        rng = np.random.default_rng(6)
        data = make_fixture(n=300, d=16, clusters=4, seed=6)
        limits = TuningLimits(max_trees=6, min_depth=2, max_depth=5, max_votes=6, k=5)
        forest = grow_forest(data, 6, 5, SplitRule(TreeType.RP), seed=7)
        for q in rng.standard_normal((50, 16)):
            counts = np.zeros(limits.shape, dtype=np.int64)
            for row, depth in enumerate(limits.depths):
                for t in range(limits.max_trees):
                    sub = forest.subset(t + 1, depth)
                    for v in range(limits.max_votes):
                        counts[row, t, v] = len(candidates_voting(sub, q, v + 1))
            self.assertEqual(
                ElectionTensor(limits, counts), count_elected(forest, limits, q, None))

    def test_pca_rayleigh_quotient(self):
        data = make_fixture()
        tree = grow_tree(data, 8, SplitRule(TreeType.PCA), seed=8)
        nodes = np.random.default_rng(8).choice(2 ** 8 - 1, size=50, replace=False)
        for node in nodes:
            direction = tree.direction(int(node))
            rows = tree.node_points(int(node))
            cov = sample_covariance(data.values[rows][:, direction.indices])
            w = direction.weights / np.linalg.norm(direction.weights)
            self.assertGreaterEqual(
                w @ cov @ w, 0.99 * np.linalg.eigvalsh(cov)[-1], int(node))
            # The same covariance, recomputed from scratch at unit scale.
            scaled = cov / np.trace(cov)
            w = leading_direction(scaled, 0.01, 20)
            self.assertGreaterEqual(w @ scaled @ w, 0.99 * np.linalg.eigvalsh(scaled)[-1])


if __name__ == '__main__':
    unittest.main()
