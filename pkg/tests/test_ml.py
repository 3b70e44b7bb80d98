import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import exhaustive_gini_split, walk
from greenprior.dataset import FeatureTable
from greenprior.errors import DataError, EmptyTable, LengthMismatch, SingleClassTraining, WrongModelKind
from greenprior.ml import (
    BoostParams,
    ForestParams,
    classification_metrics,
    dumps_model,
    feature_importance,
    feature_importance_gain,
    feature_importance_mdi,
    loads_model,
    make_params,
    predict_class,
    predict_proba,
    train_cart,
    train_forest,
    train_gbdt,
    train_model,
)
from greenprior.ml.ensemble import tree_rng
from greenprior.ml.trees import best_newton_split, leaf_weight, presort


def table(X, y, names=None):
    X = np.asarray(X, dtype=float)
    return FeatureTable(names or [f"f{i}" for i in range(X.shape[1])], X, np.asarray(y))


def two_blobs(seed, n=500):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 2)) + np.where(y[:, None] == 1, 2.0, -2.0)
    return X, y


def holdout(X, y, frac=0.3):
    n_test = int(len(y) * frac)
    return (X[n_test:], y[n_test:]), (X[:n_test], y[:n_test])


FULL = ForestParams(n_trees=1, max_depth=3, max_features=1.0, max_samples=1.0)


class TestCart:
    def test_separable(self):
        x = np.linspace(-1, 1, 20)
        y = (x > 0).astype(int)
        tree = train_cart(table(x[:, None], y), FULL, np.random.default_rng(0))
        assert tree.depth() == 1
        assert tree.threshold[0] == pytest.approx(0.0, abs=0.06)
        leaves = tree.apply(x[:, None])
        assert np.array_equal((tree.value[leaves, 1] > 0).astype(int), y)

    def test_pure_root(self):
        tree = train_cart(table(np.random.default_rng(1).normal(size=(10, 3)), [1] * 10), FULL, np.random.default_rng(0))
        assert tree.n_nodes == 1 and tree.value[0].tolist() == [0.0, 10.0]

    def test_empty(self):
        with pytest.raises(EmptyTable):
            train_cart(FeatureTable(["a"], np.zeros((0, 1)), np.zeros(0)), FULL, np.random.default_rng(0))

    @given(st.integers(0, 2**31), st.integers(2, 50), st.integers(1, 5), st.booleans())
    def test_root_split_matches_exhaustive_scan(self, seed, n, p, discrete):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 5, (n, p)).astype(float) if discrete else rng.normal(size=(n, p))
        y = rng.integers(0, 2, n)
        tree = train_cart(table(X, y), ForestParams(n_trees=1, max_depth=2, max_features=1.0), rng)
        want = exhaustive_gini_split(X, y)
        if want is None:
            assert tree.n_nodes == 1
        else:
            assert tree.feature[0] == want[0]
            assert tree.threshold[0] == pytest.approx(want[1], rel=1e-12, abs=1e-12)

    def test_min_samples_leaf(self):
        X, y = two_blobs(0, 200)
        m = train_forest(table(X, y), ForestParams(n_trees=3, max_depth=8, min_samples_leaf=15), 0)
        for tree in m.trees:
            assert tree.value[tree.is_leaf].sum(axis=1).min() >= 15


class TestForest:
    def test_single_tree_equals_cart(self):
        X, y = two_blobs(1, 120)
        params = ForestParams(n_trees=1, max_depth=4, max_features=0.5, max_samples=1.0)
        model = train_forest(table(X, y), params, 9, bootstrap=False)
        tree = train_cart(table(X, y), params, tree_rng(9, 0))
        assert np.array_equal(model.trees[0].feature, tree.feature)
        assert np.array_equal(model.trees[0].threshold, tree.threshold)
        assert np.array_equal(model.trees[0].value, tree.value)

    @pytest.mark.parametrize("kind", ["RF", "ET"])
    def test_two_blobs(self, kind):
        X, y = two_blobs(2)
        (Xtr, ytr), (Xte, yte) = holdout(X, y)
        m = train_model(table(Xtr, ytr), kind, {"n_trees": 50}, 0)
        assert (predict_class(m, Xte) == yte).mean() >= 0.95

    @pytest.mark.parametrize("kind", ["RF", "ET", "GBDT-depthwise", "GBDT-leafwise"])
    def test_deterministic(self, kind):
        X, y = two_blobs(3, 150)
        a = train_model(table(X, y), kind, {"n_trees": 10}, 5)
        b = train_model(table(X, y), kind, {"n_trees": 10}, 5)
        assert dumps_model(a) == dumps_model(b)
        c = train_model(table(X, y), kind, {"n_trees": 10}, 6)
        assert dumps_model(a) != dumps_model(c)

    def test_thread_count_does_not_matter(self, monkeypatch):
        X, y = two_blobs(4, 150)
        monkeypatch.setenv("GREENPRIOR_THREADS", "1")
        a = train_model(table(X, y), "RF", {"n_trees": 12}, 1)
        monkeypatch.setenv("GREENPRIOR_THREADS", "4")
        b = train_model(table(X, y), "RF", {"n_trees": 12}, 1)
        assert dumps_model(a) == dumps_model(b)

    def test_et_subsamples_without_replacement(self):
        X, y = two_blobs(5, 100)
        m = train_model(table(X, y), "ET", {"n_trees": 5, "max_samples": 0.6}, 0)
        for tree in m.trees:
            assert tree.value[0].sum() == 60
        # bootstrap rows in RF repeat, so the root still sees ceil(0.6 n) draws
        m = train_model(table(X, y), "RF", {"n_trees": 5, "max_samples": 0.6}, 0)
        assert all(t.value[0].sum() == 60 for t in m.trees)


class TestBoosting:
    def test_leaf_weight(self):
        assert leaf_weight(-2.0, 4.0, 1.0) == pytest.approx(0.4)

    def test_zero_gain_split_rejected(self):
        X = np.array([[0.0], [1.0]])
        g = np.array([-1.0, -1.0])
        h = np.array([2.0, 2.0])
        assert best_newton_split(X, g, h, presort(X), np.array([0]), 0.0, 0.0, 0.0) is None

    def test_positive_gain_split_found(self):
        X = np.array([[0.0], [1.0]])
        g = np.array([-1.0, 1.0])
        h = np.array([1.0, 1.0])
        f, thr, gain = best_newton_split(X, g, h, presort(X), np.array([0]), 0.0, 0.0, 0.0)
        assert (f, thr) == (0, 0.5) and gain == pytest.approx(1.0)

    def test_two_blobs_vs_forest(self):
        X, y = two_blobs(6)
        (Xtr, ytr), (Xte, yte) = holdout(X, y)
        rf = train_model(table(Xtr, ytr), "RF", {"n_trees": 100}, 0)
        gb = train_gbdt(table(Xtr, ytr), BoostParams(n_trees=200, eta=0.1, max_depth=3), 0)
        oa_rf = (predict_class(rf, Xte) == yte).mean()
        oa_gb = (predict_class(gb, Xte) == yte).mean()
        assert oa_gb >= 0.95 and oa_gb >= oa_rf - 0.03

    def test_zero_trees_predict_base_rate(self):
        X, y = two_blobs(7, 100)
        m = train_gbdt(table(X, y), BoostParams(n_trees=0), 0)
        np.testing.assert_allclose(predict_proba(m, X), y.mean(), rtol=1e-12)
        tiny = train_gbdt(table(X, y), BoostParams(n_trees=5, eta=1e-12), 0)
        np.testing.assert_allclose(predict_proba(tiny, X), y.mean(), rtol=1e-9)

    def test_single_class(self):
        with pytest.raises(SingleClassTraining):
            train_gbdt(table(np.zeros((5, 1)), [0] * 5), BoostParams(), 0)

    def test_leafwise_respects_leaf_budget(self):
        X, y = two_blobs(8, 300)
        m = train_model(table(X, y), "GBDT-leafwise", {"n_trees": 20, "n_leaves": 3}, 0)
        assert all(t.is_leaf.sum() <= 3 for t in m.trees)
        assert any(t.is_leaf.sum() == 3 for t in m.trees)

    def test_depthwise_respects_depth(self):
        X, y = two_blobs(9, 300)
        m = train_model(table(X, y), "GBDT-depthwise", {"n_trees": 20, "max_depth": 2, "min_child_weight": 0}, 0)
        assert all(t.depth() <= 2 for t in m.trees)

    def test_params_validation(self):
        from greenprior.errors import ConfigError

        with pytest.raises(ConfigError):
            make_params("GBDT-leafwise", {"n_leaves": 1})
        with pytest.raises(ConfigError):
            make_params("RF", {"max_features": 0})
        with pytest.raises(ConfigError):
            make_params("SVM", {})


class TestPredict:
    @pytest.mark.parametrize("kind", ["RF", "ET", "GBDT-depthwise", "GBDT-leafwise"])
    def test_matches_tree_walk(self, kind):
        X, y = two_blobs(10, 200)
        m = train_model(table(X, y), kind, {"n_trees": 15}, 3)
        rows = np.random.default_rng(0).normal(0, 3, size=(10, 2))
        got = predict_proba(m, rows)
        for r, p in zip(rows, got):
            if m.is_forest:
                fr = [t.value[walk(t, r), 1] / t.value[walk(t, r)].sum() for t in m.trees]
                want = sum(fr) / len(fr)
            else:
                raw = m.base_score + sum(m.params.eta * t.value[walk(t, r), 0] for t in m.trees)
                want = 1.0 / (1.0 + math.exp(-raw))
            assert p == pytest.approx(want, abs=1e-12)
        assert np.all((got >= 0) & (got <= 1))

    def test_pure_class_one_forest(self):
        m = train_model(table(np.arange(6.0)[:, None], [1] * 6), "RF", {"n_trees": 3}, 0)
        assert np.all(predict_proba(m, [[0.0], [10.0]]) == 1.0)

    def test_threshold_rule(self, monkeypatch):
        import greenprior.ml.ensemble as ens

        m = train_model(table(np.arange(6.0)[:, None], [0, 1] * 3), "RF", {"n_trees": 1}, 0)
        monkeypatch.setattr(ens, "predict_proba", lambda model, rows: np.array([0.5, 0.49, 0.51]))
        assert ens.predict_class(m, np.zeros((3, 1))).tolist() == [1, 0, 1]

    @pytest.mark.parametrize("kind", ["RF", "GBDT-leafwise"])
    def test_serialization_round_trip(self, kind):
        X, y = two_blobs(11, 150)
        m = train_model(table(X, y), kind, {"n_trees": 8}, 2)
        text = dumps_model(m)
        back = loads_model(text)
        assert dumps_model(back) == text
        assert np.array_equal(predict_proba(back, X), predict_proba(m, X))
        assert back.feature_names == m.feature_names

    def test_bad_format_version(self):
        m = train_model(table(np.arange(4.0)[:, None], [0, 1, 0, 1]), "RF", {"n_trees": 1}, 0)
        with pytest.raises(DataError):
            loads_model(dumps_model(m).replace('"format_version":1', '"format_version":99'))


class TestMetrics:
    def test_perfect(self):
        r = classification_metrics([0, 1, 1, 0], [0, 1, 1, 0])
        assert (r.oa, r.precision_w, r.recall_w, r.f1_w) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_case(self):
        r = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1])
        assert r.oa == 0.75 and r.recall_w == 0.75
        assert round(r.precision_w, 4) == 0.8333 and round(r.f1_w, 4) == 0.7333
        assert r.confusion == [[1, 1], [0, 2]]

    def test_never_predicted_class_is_flagged(self):
        r = classification_metrics([0, 1, 1], [1, 1, 1])
        assert r.per_class["0"]["precision"] == 0.0 and r.flags

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            classification_metrics([0, 1], [0])
        with pytest.raises(DataError):
            classification_metrics([], [])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
    def test_identities(self, pairs):
        t = [a for a, _ in pairs]
        p = [b for _, b in pairs]
        r = classification_metrics(t, p)
        assert r.recall_w == r.oa
        c = np.array(r.confusion)
        assert r.oa == (c[0, 0] + c[1, 1]) / len(t)
        for k, v in r.per_class.items():
            pr, rc = v["precision"], v["recall"]
            want = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
            assert v["f1"] == pytest.approx(want, abs=1e-15)


class TestImportance:
    def test_single_split(self):
        x = np.linspace(-1, 1, 20)
        X = np.column_stack([x, np.zeros(20), np.ones(20)])
        m = train_forest(table(X, (x > 0).astype(int)), ForestParams(n_trees=1, max_depth=1, max_features=1.0), 0)
        assert feature_importance_mdi(m).tolist() == [1.0, 0.0, 0.0]

    def test_no_split_is_uniform(self):
        m = train_model(table(np.zeros((4, 2)), [1, 1, 1, 1]), "RF", {"n_trees": 2}, 0)
        assert feature_importance_mdi(m).tolist() == [0.5, 0.5]

    def test_dominant_feature_ranks_first(self):
        first = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(300, 5))
            y = (X[:, 2] > 0).astype(int)
            flip = rng.random(300) < 0.05
            y[flip] = 1 - y[flip]
            imp = feature_importance_mdi(train_model(table(X, y), "RF", {"n_trees": 30}, seed))
            first += int(np.argmax(imp) == 2)
            assert abs(imp.sum() - 1.0) <= 1e-9
        assert first >= 19

    def test_permutation_equivariant(self):
        # shallow trees with large leaves avoid near-pure nodes, where many splits
        # tie exactly and the lowest column index wins
        rng = np.random.default_rng(3)
        X = rng.normal(size=(400, 4))
        y = (X[:, 0] + 0.5 * X[:, 3] + 0.3 * rng.normal(size=400) > 0).astype(int)
        params = {"n_trees": 10, "max_features": 1.0, "max_depth": 2, "min_samples_leaf": 40}
        imp = feature_importance_mdi(train_model(table(X, y), "RF", params, 1))
        perm = np.array([2, 0, 3, 1])
        imp_p = feature_importance_mdi(train_model(table(X[:, perm], y), "RF", params, 1))
        np.testing.assert_allclose(imp_p, imp[perm], atol=1e-12)

    def test_boosted_models(self):
        X, y = two_blobs(12, 200)
        m = train_model(table(X, y), "GBDT-depthwise", {"n_trees": 20}, 0)
        with pytest.raises(WrongModelKind):
            feature_importance_mdi(m)
        imp = feature_importance_gain(m)
        assert abs(imp.sum() - 1.0) <= 1e-9 and np.all(imp >= 0)
        assert np.array_equal(feature_importance(m), imp)
