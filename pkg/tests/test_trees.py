import statistics
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabshap.data import inject_noise_features, load_csv, split
from tabshap.errors import ConfigError, DataError, DimensionError
from tabshap.metrics import multiclass_auroc
from tabshap.nn import softmax
from tabshap.trees import (
    DecisionTree,
    GBDTConfig,
    GBDTModel,
    _Grower,
    make_ensemble,
    player_split_frequency,
    train_baselines,
    train_gbdt,
    train_logistic,
    train_random_forest,
)

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="module")
def iris():
    return load_csv(DATA / "iris.csv", "species")


def xor_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
    k = rng.integers(0, 4, size=n)
    X = centers[k] + 0.1 * rng.normal(size=(n, 2))
    return X, (k >= 2).astype(int)


def brute_force_split(X, r, min_leaf):
    """Independent loop oracle for the best variance-reduction split."""
    best = (-np.inf, None, None)
    for f in range(X.shape[1]):
        for thr in np.unique(X[:, f])[:-1]:
            left = X[:, f] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            gain = r[left].sum() ** 2 / left.sum() + r[~left].sum() ** 2 / (~left).sum() - r.sum() ** 2 / r.size
            if gain > best[0] + 1e-12:
                best = (gain, f, thr)
    return best


class TestGrower:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_root_split_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        X = np.round(rng.normal(size=(40, 3)), 1)
        r = rng.normal(size=40)
        tree, _ = _Grower(X).grow(r, np.ones(40), max_depth=1, min_leaf=3)
        gain, f, thr = brute_force_split(X, r, 3)
        if f is None:
            assert tree.n_nodes == 1
            return
        assert tree.feature[0] == f
        # threshold lies between the chosen value and the next distinct one
        nxt = np.unique(X[:, f])[np.unique(X[:, f]) > thr][0]
        assert thr <= tree.threshold[0] < nxt

    def test_matches_sklearn_regression_tree(self):
        from sklearn.tree import DecisionTreeRegressor

        rng = np.random.default_rng(3)
        X = rng.normal(size=(300, 5))
        r = np.sin(X[:, 0]) + X[:, 1] * X[:, 2] + 0.1 * rng.normal(size=300)
        ours, _ = _Grower(X).grow(r, np.ones(300), max_depth=4, min_leaf=5)
        ref = DecisionTreeRegressor(max_depth=4, min_samples_leaf=5).fit(X, r)
        Xt = rng.normal(size=(500, 5))
        np.testing.assert_allclose(ours.predict(Xt)[:, 0], ref.predict(Xt), atol=1e-10)

    def test_tie_prefers_lowest_feature(self):
        x = np.arange(10.0)
        X = np.stack([x, x, x], axis=1)
        tree, _ = _Grower(X).grow((x > 4.5).astype(float), np.ones(10), 1, 1)
        assert tree.feature[0] == 0

    def test_tie_prefers_lowest_threshold(self):
        # splitting after 1 or after 3 separates the targets equally well
        X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
        r = np.array([0.0, 0.0, 5.0, 5.0, 0.0, 0.0])
        # gain is symmetric for the two cuts; the lower threshold must win
        tree, _ = _Grower(X).grow(r, np.ones(6), 1, 1)
        assert tree.threshold[0] == pytest.approx(1.5)

    def test_leaves_reachable_and_features_valid(self):
        X, y = xor_data()
        tree, leaf_of = _Grower(X).grow(y.astype(float), np.ones(len(y)), 3, 2)
        leaves = np.flatnonzero(tree.feature < 0)
        assert set(np.unique(tree.apply(X))) <= set(leaves.tolist())
        assert set(np.unique(leaf_of)) == set(np.unique(tree.apply(X)))
        assert tree.feature.max() < 2


class TestGBDT:
    def test_xor_depth_two(self):
        X, y = xor_data()
        model = train_gbdt(X, y, 2, GBDTConfig(max_depth=2))
        assert np.mean(model.predict_proba(X).argmax(1) == y) >= 0.95

    def test_iris_holdout_accuracy(self, iris):
        tr, _, te = split(iris, (0.8, 0.0, 0.2), 0)
        model = train_gbdt(tr.X, tr.y, 3)
        assert np.mean(model.predict_proba(te.X).argmax(1) == te.y) >= 0.90

    @pytest.mark.parametrize("depth,lr", [(1, 0.5), (3, 0.1), (6, 1.0)])
    def test_train_loss_non_increasing(self, iris, depth, lr):
        model = train_gbdt(iris.X, iris.y, 3, GBDTConfig(n_trees=40, max_depth=depth, learning_rate=lr))
        assert np.all(np.diff(model.train_log_loss) <= 0)

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            train_gbdt(np.ones((5, 2)), np.zeros(5, dtype=int), 1)

    def test_pure_target_probability_grows(self):
        X = np.random.default_rng(0).normal(size=(30, 2))
        y = np.zeros(30, dtype=int)
        p = [train_gbdt(X, y, 2, GBDTConfig(n_trees=t)).predict_proba(X[:1])[0, 0] for t in (1, 10, 100)]
        assert p[0] < p[1] < p[2] and p[2] > 0.99

    def test_zero_trees_is_base_score(self, iris):
        model = train_gbdt(iris.X, iris.y, 3, GBDTConfig(n_trees=0))
        np.testing.assert_allclose(model.predict_proba(iris.X[:4]), np.tile(softmax(model.base_score), (4, 1)))

    def test_depth_one_traversal(self):
        tree = DecisionTree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]),
                            np.array([2, -1, -1]), np.array([[0.0], [-1.0], [2.0]]), 1)
        assert tree.predict(np.array([[0.2], [0.9]]))[:, 0].tolist() == [-1.0, 2.0]

    def test_dimension_mismatch(self, iris):
        model = train_gbdt(iris.X, iris.y, 3, GBDTConfig(n_trees=2))
        with pytest.raises(DimensionError):
            model.predict_proba(np.ones((1, 5)))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            GBDTConfig(max_depth=0).validate()

    def test_json_round_trip(self, iris, tmp_path):
        model = train_gbdt(iris.X, iris.y, 3, GBDTConfig(n_trees=10))
        model.save(tmp_path / "g.json")
        back = GBDTModel.load(tmp_path / "g.json")
        assert back.predict_proba(iris.X).tobytes() == model.predict_proba(iris.X).tobytes()

    def test_probabilities_valid(self, iris):
        p = train_gbdt(iris.X, iris.y, 3, GBDTConfig(n_trees=20)).predict_proba(iris.X)
        assert np.all((p > 0) & (p < 1))
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)

    def test_noise_columns_rarely_split(self, iris):
        noisy = inject_noise_features(iris, 1.0, 0)
        model = train_gbdt(noisy.X, noisy.y, 3)
        freq = player_split_frequency(model, noisy.groups)
        assert freq[noisy.synthetic_players].sum() <= 0.10


class TestBaselines:
    def test_logistic_zero_weights_uniform(self):
        model = train_logistic(np.ones((4, 2)), np.array([0, 1, 2, 0]), 3, epochs=0)
        np.testing.assert_allclose(model.predict_proba(np.ones((2, 2))), 1 / 3)

    def test_separable_logistic(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 2))
        y = (X[:, 0] + X[:, 1] > 0).astype(int)
        assert multiclass_auroc(train_logistic(X, y, 2).predict_proba(X), y)[0] >= 0.99

    def test_random_forest_distributions(self, iris):
        rf = train_random_forest(iris.X, iris.y, 3, n_trees=10, seed=0)
        p = rf.predict_proba(iris.X)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
        assert np.all(p > 0)

    def test_random_forest_seeded(self, iris):
        a = train_random_forest(iris.X, iris.y, 3, n_trees=5, seed=4).predict_proba(iris.X)
        b = train_random_forest(iris.X, iris.y, 3, n_trees=5, seed=4).predict_proba(iris.X)
        assert a.tobytes() == b.tobytes()

    @staticmethod
    @pytest.fixture(scope="class")
    def iris_baselines(iris):
        out = []
        for seed in range(5):
            tr, _, te = split(iris, (0.6, 0.2, 0.2), seed)
            models = train_baselines(tr.X, tr.y, 3, seed)
            out.append({k: multiclass_auroc(m.predict_proba(te.X), te.y)[0] for k, m in models.items()})
        return out

    @pytest.mark.parametrize("name,target", [("logistic", 0.935), ("random_forest", 0.959)])
    def test_iris_reported_auroc(self, iris_baselines, name, target):
        median = statistics.median(r[name] for r in iris_baselines)
        assert abs(median - target) <= 0.03, f"median {name} AUROC {median:.4f}"


class TestEnsemble:
    def test_single_weight_normalized(self):
        assert make_ensemble([(None, None)], [3.0]).weights.tolist() == [1.0]

    def test_equal_weights(self):
        assert make_ensemble([(None, None)] * 2, [1, 1]).weights.tolist() == [0.5, 0.5]

    def test_zero_weights(self):
        with pytest.raises(ConfigError):
            make_ensemble([(None, None)] * 2, [0, 0])

    def test_empty(self):
        with pytest.raises(ConfigError):
            make_ensemble([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=12))
    def test_sum_to_one(self, weights):
        ens = make_ensemble([(None, None)] * len(weights), weights)
        assert abs(ens.weights.sum() - 1.0) <= 1e-12
