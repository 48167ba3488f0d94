"""Utilization ledgers, tree priors, and the drift probe."""

import numpy as np
import pytest

from treeff import analysis, fff


def routed_batch(seed=0, batch=64, trees=3, depth=3):
    rng = np.random.default_rng(seed)
    params = fff.init_forest(rng, trees, depth, 4, 2)
    x = rng.normal(size=(batch, 4))
    _, cache = fff.forward_masked(params, x)
    return params, x, cache


class TestLedger:
    def test_counts_match_paths(self):
        _, _, cache = routed_batch()
        ledger = analysis.UtilizationLedger(trees=3, depth=3)
        ledger.record_batch(cache.route)
        assert ledger.total == 64
        # each sample visits exactly depth+1 nodes per tree
        assert np.all(ledger.node_counts.sum(axis=1) == 64 * 4)
        # leaf counts are a bincount of the final path node per tree
        slots = cache.route.leaf_slots()
        for p in range(3):
            expect = np.bincount(slots[:, p], minlength=fff.num_leaves(3))
            assert np.array_equal(ledger.leaf_counts[p], expect)
        assert np.all(ledger.leaf_counts.sum(axis=1) == 64)

    def test_shape_mismatch_rejected(self):
        _, _, cache = routed_batch()
        ledger = analysis.UtilizationLedger(trees=3, depth=2)
        with pytest.raises(ValueError, match="does not match ledger"):
            ledger.record_batch(cache.route)

    def test_merge_adds_and_checks_geometry(self):
        _, _, cache = routed_batch()
        a = analysis.UtilizationLedger(trees=3, depth=3)
        a.record_batch(cache.route)
        merged = a.merge(a)
        assert merged.total == 2 * a.total
        assert np.array_equal(merged.leaf_counts, 2 * a.leaf_counts)
        with pytest.raises(ValueError, match="different geometry"):
            a.merge(analysis.UtilizationLedger(trees=2, depth=3))

    def test_summary_stats_on_handmade_counts(self):
        ledger = analysis.UtilizationLedger(trees=1, depth=2)
        ledger.leaf_counts[0] = [6, 2, 0, 0]
        ledger.total = 8
        assert analysis.max_path_share(ledger) == pytest.approx(0.75)
        assert analysis.dead_leaf_fraction(ledger) == pytest.approx(0.5)
        assert analysis.dead_leaf_fraction(ledger, threshold=2) == pytest.approx(0.75)
        hist = analysis.path_histogram(ledger)
        assert np.allclose(hist[0], [0.75, 0.25, 0.0, 0.0])
        assert np.allclose(analysis.empirical_leaf_distribution(ledger), [0.75, 0.25, 0, 0])

    def test_empty_ledger_behaviour(self):
        ledger = analysis.UtilizationLedger(trees=2, depth=2)
        assert analysis.max_path_share(ledger) == 0.0
        assert np.all(analysis.path_histogram(ledger) == 0)
        with pytest.raises(ValueError, match="empty ledger"):
            analysis.empirical_leaf_distribution(ledger)

    def test_json_roundtrip(self):
        _, _, cache = routed_batch()
        ledger = analysis.UtilizationLedger(trees=3, depth=3)
        ledger.record_batch(cache.route)
        back = analysis.utilization_from_json(analysis.utilization_to_json(ledger))
        assert back.total == ledger.total
        assert np.array_equal(back.leaf_counts, ledger.leaf_counts)
        assert np.array_equal(back.node_counts, ledger.node_counts)

    def test_json_shape_validation(self):
        doc = analysis.utilization_to_json(analysis.UtilizationLedger(trees=2, depth=2))
        doc["depth"] = 3
        with pytest.raises(ValueError, match="inconsistent shapes"):
            analysis.utilization_from_json(doc)


class TestBranchProbability:
    def test_gaussian_crossing(self):
        assert analysis.positive_branch_prob(0.0, 1.0) == pytest.approx(0.5)
        assert analysis.positive_branch_prob(1.0, 1.0) == pytest.approx(0.8413447460685429, abs=1e-12)
        # monotone in mu, shrinks toward 0.5 as sigma grows
        assert analysis.positive_branch_prob(0.5, 1.0) > analysis.positive_branch_prob(0.2, 1.0)
        assert abs(analysis.positive_branch_prob(0.5, 10.0) - 0.5) < abs(
            analysis.positive_branch_prob(0.5, 1.0) - 0.5
        )

    def test_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            analysis.positive_branch_prob(0.0, 0.0)


class TestTreePrior:
    def test_roundtrip_random_targets(self):
        rng = np.random.default_rng(11)
        for depth in (1, 2, 4, 6):
            target = rng.random(2**depth)
            target /= target.sum()
            prior = analysis.build_tree_prior(target)
            assert prior.depth == depth
            back = analysis.prior_leaf_distribution(prior)
            assert np.max(np.abs(back - target)) <= 1e-12

    def test_unnormalized_target_is_normalized(self):
        prior = analysis.build_tree_prior(np.array([3.0, 1.0, 2.0, 2.0]))
        assert np.allclose(analysis.prior_leaf_distribution(prior), [0.375, 0.125, 0.25, 0.25])

    def test_zero_mass_subtree_gets_fair_coin(self):
        prior = analysis.build_tree_prior(np.array([1.0, 0.0, 0.0, 0.0]))
        # node 2 (right child of root) carries no mass; its branch stays 0.5
        assert prior.q[2] == pytest.approx(0.5)
        assert np.allclose(analysis.prior_leaf_distribution(prior), [1, 0, 0, 0])

    def test_target_validation(self):
        with pytest.raises(ValueError, match="power of two"):
            analysis.build_tree_prior(np.ones(3))
        with pytest.raises(ValueError, match="nonnegative"):
            analysis.build_tree_prior(np.array([0.5, -0.5, 0.5, 0.5]))
        with pytest.raises(ValueError, match="positive mass"):
            analysis.build_tree_prior(np.zeros(4))

    def test_prior_validation(self):
        with pytest.raises(ValueError, match="does not match depth"):
            analysis.TreePrior(depth=2, q=np.array([0.5]))
        with pytest.raises(ValueError, match="lie in"):
            analysis.TreePrior(depth=1, q=np.array([1.5]))

    def test_sampling_matches_target(self):
        target = analysis.pareto_target(2.0, 16)
        prior = analysis.build_tree_prior(target)
        counts = analysis.sample_prior_paths(prior, np.random.default_rng(0), 200_000)
        assert counts.sum() == 200_000
        assert analysis.total_variation(counts / counts.sum(), target) < 0.01

    def test_sampling_degenerate_prior(self):
        prior = analysis.build_tree_prior(np.array([0.0, 0.0, 1.0, 0.0]))
        counts = analysis.sample_prior_paths(prior, np.random.default_rng(1), 500)
        assert counts[2] == 500 and counts.sum() == 500


class TestReferenceTargets:
    def test_pareto_shape(self):
        target = analysis.pareto_target(2.0, 32)
        assert target.sum() == pytest.approx(1.0)
        assert np.all(np.diff(target) < 0)
        # heavier alpha concentrates more mass on the first bin
        assert analysis.pareto_target(3.0, 32)[0] > target[0]
        with pytest.raises(ValueError, match="alpha"):
            analysis.pareto_target(0.0, 8)

    def test_uniform_and_tv(self):
        u = analysis.uniform_target(8)
        assert np.allclose(u, 1 / 8)
        assert analysis.total_variation(u, u) == 0.0
        assert analysis.total_variation([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_prior_distance_orderings(self):
        prior = analysis.build_tree_prior(analysis.pareto_target(2.0, 8))
        target = analysis.prior_leaf_distribution(prior)
        # a permuted copy matches in shape but not leaf-for-leaf
        shuffled = np.roll(target, 3)
        assert analysis.prior_distance(shuffled, prior, ordering="sorted") <= 1e-15
        assert analysis.prior_distance(shuffled, prior, ordering="as_is") > 0.1
        with pytest.raises(ValueError, match="unknown ordering"):
            analysis.prior_distance(target, prior, ordering="best")
        with pytest.raises(ValueError, match="length"):
            analysis.prior_distance(np.ones(4) / 4, prior)


class TestDriftProbe:
    def test_mean_logit_and_identity(self):
        rng = np.random.default_rng(5)
        params = fff.init_forest(rng, 2, 2, 4, 3)
        h = rng.normal(size=(32, 4))
        probe = analysis.DriftProbe.from_batch(tree=1, node=0, h=h)
        assert np.allclose(probe.m, h.mean(axis=0))
        mu0 = probe.mean_logit(params)
        assert mu0 == pytest.approx(
            float(params.w_in[1, 0] @ probe.m + params.b_in[1, 0]), abs=0
        )
        # manual SGD step on the probed node: delta mu == -lr (m.g_w + g_b)
        g_z = rng.normal(size=32)
        probe.record_step(g_z, h)
        lr = 0.05
        g_w = g_z @ h
        g_b = g_z.sum()
        params.w_in[1, 0] -= lr * g_w
        params.b_in[1, 0] -= lr * g_b
        predicted = analysis.predict_drift(probe, lr=lr)
        assert predicted.shape == (1,)
        assert probe.mean_logit(params) - mu0 == pytest.approx(predicted[0], abs=1e-12)

    def test_batch_mismatch(self):
        probe = analysis.DriftProbe(tree=0, node=0, m=np.zeros(4))
        with pytest.raises(ValueError, match="batch mismatch"):
            probe.record_step(np.zeros(8), np.zeros((4, 4)))
