from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rfcal import forest as rf
from rfcal.dataset import Dataset, InvalidInputError


def brute_force_split(X, y, rows, features, criterion="gini", min_leaf=1):
    """Exhaustive pure-python split search used as an oracle."""
    def imp(labels):
        n = len(labels)
        fr = [labels.count(c) / n for c in set(labels)]
        if criterion == "gini":
            return 1 - sum(f * f for f in fr)
        return -sum(f * np.log2(f) for f in fr)

    labels = [int(y[i]) for i in rows]
    parent = imp(labels)
    best = None
    for f in sorted(features):
        vals = sorted({float(X[i, f]) for i in rows})
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            lft = [int(y[i]) for i in rows if X[i, f] <= thr]
            rgt = [int(y[i]) for i in rows if X[i, f] > thr]
            if len(lft) < min_leaf or len(rgt) < min_leaf:
                continue
            n = len(rows)
            gain = parent - len(lft) / n * imp(lft) - len(rgt) / n * imp(rgt)
            if gain > 1e-12 and (best is None or gain > best[2] + 1e-12):
                best = (f, thr, gain)
    return best


class TestBootstrap:
    def test_single_row(self):
        sample, oob = rf.bootstrap_sample(1, np.random.default_rng(0))
        np.testing.assert_array_equal(sample, [0])
        assert oob.size == 0

    def test_zero_rows_rejected(self):
        with pytest.raises(InvalidInputError):
            rf.bootstrap_sample(0, np.random.default_rng(0))

    def test_deterministic(self):
        a = rf.bootstrap_sample(50, np.random.default_rng(3))
        b = rf.bootstrap_sample(50, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_oob_is_sorted_complement(self):
        sample, oob = rf.bootstrap_sample(200, np.random.default_rng(1))
        assert sample.size == 200
        np.testing.assert_array_equal(oob, sorted(set(range(200)) - set(sample.tolist())))

    def test_mean_oob_fraction(self):
        fracs = [rf.bootstrap_sample(1000, np.random.default_rng(s))[1].size / 1000 for s in range(200)]
        assert abs(np.mean(fracs) - (1 - 1 / 1000) ** 1000) < 0.01


class TestImpurity:
    def test_pure(self):
        assert rf.impurity([5, 0]) == 0.0

    def test_gini_even(self):
        assert rf.impurity([1, 1]) == pytest.approx(0.5)

    def test_entropy_even(self):
        assert rf.impurity([1, 1], "entropy") == pytest.approx(1.0)

    def test_all_zero(self):
        with pytest.raises(InvalidInputError):
            rf.impurity([0, 0])

    @given(st.lists(st.integers(0, 20), min_size=2, max_size=5).filter(lambda c: sum(c) > 0))
    def test_bounds(self, counts):
        K = len(counts)
        assert 0 <= rf.impurity(counts) <= 1 - 1 / K + 1e-12
        assert 0 <= rf.impurity(counts, "entropy") <= np.log2(K) + 1e-12


class TestFindBestSplit:
    def test_two_points(self):
        X = np.array([[0.0], [1.0]])
        s = rf.find_best_split(X, [0, 1], [0, 1], [0], n_classes=2)
        assert s.feature == 0
        assert s.threshold == 0.5
        assert s.gain == pytest.approx(0.5)

    def test_identical_rows(self):
        X = np.ones((4, 3))
        assert rf.find_best_split(X, [0, 1, 0, 1], range(4), [0, 1, 2], n_classes=2) is None

    def test_pure_node(self):
        X = np.arange(6.0).reshape(3, 2)
        assert rf.find_best_split(X, [1, 1, 1], range(3), [0, 1], n_classes=2) is None

    def test_min_leaf_respected(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        s = rf.find_best_split(X, [0, 1, 1, 1], range(4), [0], n_classes=2, min_samples_leaf=2)
        assert s.threshold == 1.5

    def test_tie_prefers_lowest_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        s = rf.find_best_split(X, [0, 1], [0, 1], [1, 0], n_classes=2)
        assert s.feature == 0

    @given(st.integers(0, 10_000))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 12)), int(rng.integers(1, 4))
        X = rng.integers(0, 5, size=(n, d)).astype(float)
        y = rng.integers(0, 2, size=n)
        crit = ["gini", "entropy"][seed % 2]
        leaf = int(rng.integers(1, 3))
        got = rf.find_best_split(X, y, np.arange(n), range(d), criterion=crit, n_classes=2,
                                 min_samples_leaf=leaf)
        want = brute_force_split(X, y, list(range(n)), range(d), crit, leaf)
        if want is None:
            assert got is None
        else:
            assert got is not None
            assert got.gain == pytest.approx(want[2], abs=1e-9)


class TestLeafDistribution:
    def test_relative_frequency(self):
        np.testing.assert_allclose(rf.leaf_distribution([3, 1]), [0.75, 0.25])

    def test_laplace(self):
        np.testing.assert_allclose(rf.leaf_distribution([3, 1], laplace=True), [4 / 6, 2 / 6])

    def test_ct_tie_goes_low(self):
        np.testing.assert_array_equal(rf.leaf_distribution([2, 2], tree_kind="CT"), [1, 0])

    @given(st.lists(st.integers(0, 50), min_size=2, max_size=4).filter(lambda c: sum(c) > 0))
    def test_exact_rationals(self, counts):
        total = sum(counts)
        got = rf.leaf_distribution(counts)
        for g, c in zip(got, counts):
            assert Fraction(g).limit_denominator(10_000) == Fraction(c, total)
        lap = rf.leaf_distribution(counts, laplace=True)
        assert np.all((lap > 0) & (lap < 1))
        ct = rf.leaf_distribution(counts, tree_kind="CT")
        assert ct.sum() == 1 and set(ct.tolist()) <= {0.0, 1.0}


def _four_points():
    X = np.array([[0.1, 5.0], [0.3, 1.0], [0.7, 4.0], [0.9, 2.0]])
    return Dataset(X, [0, 0, 1, 1], 2)


class TestTrainForest:
    def test_separable_training_accuracy(self):
        data = _four_points()
        model = rf.train_forest(data, rf.ForestConfig(n_trees=10, bootstrap=False, max_features="all"))
        P = rf.predict_forest(model, data.features)
        np.testing.assert_array_equal(P.argmax(axis=1), data.labels)

    def test_zero_depth_rejected(self):
        with pytest.raises(InvalidInputError):
            rf.ForestConfig(max_depth=0)

    def test_depth_one_stumps(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=12, max_depth=1))
        assert all(t.n_internal <= 1 for t in model.trees)

    def test_depth_bound(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=5, max_depth=3))
        assert max(t.depth() for t in model.trees) <= 3

    def test_thread_count_invariant(self, blobs):
        cfg = rf.ForestConfig(n_trees=16, seed=11)
        a = rf.train_forest(blobs, cfg, n_jobs=1)
        b = rf.train_forest(blobs, cfg, n_jobs=4)
        for ta, tb in zip(a.trees, b.trees):
            np.testing.assert_array_equal(ta.feature, tb.feature)
            np.testing.assert_array_equal(ta.threshold, tb.threshold)
            np.testing.assert_array_equal(ta.class_counts, tb.class_counts)
        np.testing.assert_array_equal(rf.predict_forest(a, blobs.features), rf.predict_forest(b, blobs.features))

    def test_different_seeds_differ(self, blobs):
        a = rf.train_forest(blobs, rf.ForestConfig(n_trees=3, seed=1))
        b = rf.train_forest(blobs, rf.ForestConfig(n_trees=3, seed=2))
        assert not np.array_equal(a.bootstrap_indices[0], b.bootstrap_indices[0])

    def test_counts_sum_to_children(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=5, class_weight="balanced"))
        for t in model.trees:
            internal = np.flatnonzero(t.feature >= 0)
            np.testing.assert_array_equal(t.class_counts[internal],
                                          t.class_counts[t.left[internal]] + t.class_counts[t.right[internal]])
            np.testing.assert_array_equal(t.n_samples[internal],
                                          t.n_samples[t.left[internal]] + t.n_samples[t.right[internal]])

    def test_bootstrap_bookkeeping(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=6))
        for boot, oob, tree in zip(model.bootstrap_indices, model.oob_indices, model.trees):
            assert len(boot) == blobs.n_rows
            np.testing.assert_array_equal(oob, np.setdiff1d(np.arange(blobs.n_rows), boot))
            assert tree.n_samples[0] == blobs.n_rows

    def test_no_bootstrap_has_empty_oob(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=2, bootstrap=False))
        assert all(o.size == 0 for o in model.oob_indices)
        with pytest.raises(rf.NoOOBDataError):
            rf.oob_predict(model, blobs.features)

    def test_unbounded_memorizes_unique_rows(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=3, bootstrap=False))
        np.testing.assert_array_equal(rf.predict_forest(model, blobs.features).argmax(axis=1), blobs.labels)

    def test_single_class_trains(self):
        data = Dataset(np.arange(10.0)[:, None], np.zeros(10, dtype=int), 2)
        model = rf.train_forest(data, rf.ForestConfig(n_trees=3))
        np.testing.assert_array_equal(rf.predict_forest(model, data.features), np.tile([1.0, 0.0], (10, 1)))

    def test_balanced_weights(self):
        y = np.array([0] * 8 + [1] * 2)
        cw = rf._class_weights(y, np.ones(10), 2)
        np.testing.assert_allclose(cw, [10 / 16, 10 / 4])

    @pytest.mark.parametrize("mf,d,k", [("sqrt", 8, 3), ("log2", 8, 3), ("log2", 5, 3), ("all", 5, 5), (2, 5, 2),
                                        ("sqrt", 1, 1)])
    def test_split_feature_count(self, mf, d, k):
        assert rf.ForestConfig(max_features=mf).n_split_features(d) == k

    def test_config_round_trip(self):
        cfg = rf.ForestConfig(n_trees=7, max_depth=4, class_weight="balanced", seed=2**63)
        assert rf.ForestConfig.from_dict(cfg.to_dict()) == cfg


class TestPrediction:
    def _stump(self):
        return rf.Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]),
                       np.array([2, -1, -1]), np.array([10, 1, 9]),
                       np.array([[5.0, 5.0], [1.0, 0.0], [4.0, 5.0]]))

    def test_routing(self):
        t = self._stump()
        np.testing.assert_array_equal(t.apply(np.array([[0.25], [0.5], [0.75]])), [1, 1, 2])

    def test_single_leaf(self):
        t = rf.Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([1]),
                    np.array([[1.0, 0.0]]))
        np.testing.assert_array_equal(rf.predict_tree(t, [[3.0]]), [[1.0, 0.0]])

    def test_mean_of_trees(self):
        leaf = lambda c: rf.Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                                 np.array([1]), np.array([c], dtype=float))
        model = rf.RandomForestModel([leaf([1, 0]), leaf([0, 1])], [np.array([0]), np.array([0])],
                                     rf.ForestConfig(n_trees=2), 2, 1)
        np.testing.assert_array_equal(rf.predict_forest(model, [[0.0]]), [[0.5, 0.5]])

    def test_curtailed_routing(self):
        t = self._stump()
        X = np.array([[0.25], [0.75]])
        np.testing.assert_array_equal(t.apply_curtailed(X, 2), [0, 2])
        np.testing.assert_array_equal(t.apply_curtailed(X, 1), t.apply(X))
        np.testing.assert_array_equal(t.apply_curtailed(X, 11), [0, 0])

    def test_nested_round_trip(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=2))
        for t in model.trees:
            back = rf.Tree.from_nested(t.to_nested())
            np.testing.assert_array_equal(rf.predict_tree(back, blobs.features), rf.predict_tree(t, blobs.features))
            assert back.to_nested() == t.to_nested()

    def test_probabilities_on_simplex(self, blobs):
        for laplace in (False, True):
            model = rf.train_forest(blobs, rf.ForestConfig(n_trees=10, laplace=laplace))
            P = rf.predict_forest(model, blobs.features)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(P >= 0) and np.all(P <= 1)
            if laplace:
                assert np.all((P > 0) & (P < 1))


class TestOOB:
    def test_single_tree(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=1))
        P = rf.oob_predict(model, blobs.features)
        oob = model.oob_indices[0]
        inbag = np.setdiff1d(np.arange(blobs.n_rows), oob)
        assert np.all(np.isnan(P[inbag]))
        np.testing.assert_array_equal(P[oob], rf.predict_tree(model.trees[0], blobs.features[oob]))

    def test_audit(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=20, seed=5))
        seen = []

        def spy(tree, rows):
            seen.append((id(tree), rows.copy()))
            return rf.predict_tree(tree, rows)

        rf.oob_predict(model, blobs.features, tree_predict=spy)
        for (tid, rows), tree, oob in zip(seen, model.trees, model.oob_indices):
            assert tid == id(tree)
            np.testing.assert_array_equal(rows, blobs.features[oob])

    def test_wrong_rows_rejected(self, blobs):
        model = rf.train_forest(blobs, rf.ForestConfig(n_trees=2))
        with pytest.raises(InvalidInputError):
            rf.oob_predict(model, blobs.features[:10])


class TestPredictionGroups:
    def test_single_leaf_forest(self):
        t = rf.Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([4]),
                    np.array([[3.0, 1.0]]))
        model = rf.RandomForestModel([t], [np.zeros(4, dtype=int)], rf.ForestConfig(n_trees=1), 2, 1)
        assert rf.unique_prediction_groups(model, np.arange(4.0)[:, None]) == 1

    def test_equal_leaf_frequencies_merge(self):
        # two different leaves, both predicting 1/4 for the positive class
        t = rf.Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                    np.array([8, 4, 4]), np.array([[6.0, 2.0], [3.0, 1.0], [3.0, 1.0]]))
        model = rf.RandomForestModel([t], [np.zeros(8, dtype=int)], rf.ForestConfig(n_trees=1), 2, 1)
        assert rf.unique_prediction_groups(model, [[0.0], [1.0]]) == 1

    def test_distinct_stump_leaves(self):
        t = rf.Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                    np.array([5, 2, 3]), np.array([[4.0, 1.0], [2.0, 0.0], [2.0, 1.0]]))
        model = rf.RandomForestModel([t], [np.zeros(5, dtype=int)], rf.ForestConfig(n_trees=1), 2, 1)
        assert rf.unique_prediction_groups(model, [[0.0], [1.0]]) == 2
