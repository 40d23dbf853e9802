import numpy as np
import pytest

from patchsim.errors import DataError
from patchsim.forest import (
    DecisionTree,
    Forest,
    TrainingSet,
    fit_forest,
    forest_from_dict,
    forest_to_dict,
    load_forest,
    predict_proba,
    predict_proba_batch,
    save_forest,
    variable_importance,
)
from oracles import best_stump_error


def _leaf_tree(vote):
    return DecisionTree(
        feature=np.array([-1]), threshold=np.array([0.0]),
        left=np.array([-1]), right=np.array([-1]),
        vote=np.array([vote]), oob_indices=np.array([], dtype=np.int64),
    )


def _threshold_data(rng, n=1000, f=1):
    X = rng.uniform(-1, 1, size=(n, f))
    y = (X[:, 0] > 0).astype(int)
    return X, y


def test_accuracy_on_held_out(rng):
    X, y = _threshold_data(rng, n=1400)
    train = TrainingSet(X[:1000], y[:1000], ["x"])
    forest = fit_forest(train, m_trees=50, seed=0)
    probs = predict_proba_batch(forest, X[1000:])
    accuracy = np.mean((probs > 0.5).astype(int) == y[1000:])
    assert accuracy > 0.95


def test_single_label_training_set_rejected():
    X = np.random.default_rng(0).normal(size=(50, 2))
    train = TrainingSet(X, np.zeros(50, dtype=int), ["a", "b"])
    with pytest.raises(DataError, match="single-label"):
        fit_forest(train, m_trees=5, seed=0)


def test_same_seed_identical_structures(rng):
    X, y = _threshold_data(rng, n=300, f=3)
    train = TrainingSet(X, y, ["a", "b", "c"])
    f1 = fit_forest(train, m_trees=10, seed=42)
    f2 = fit_forest(train, m_trees=10, seed=42)
    for t1, t2 in zip(f1.trees, f2.trees):
        assert np.array_equal(t1.feature, t2.feature)
        assert np.array_equal(t1.threshold, t2.threshold)
        assert np.array_equal(t1.left, t2.left)
        assert np.array_equal(t1.right, t2.right)
        assert np.array_equal(t1.vote, t2.vote)
        assert np.array_equal(t1.oob_indices, t2.oob_indices)


def test_all_trees_vote_one():
    forest = Forest([_leaf_tree(1) for _ in range(10)], 1, 0, ["x"])
    assert predict_proba(forest, np.array([0.5])) == 1.0


def test_constructed_vote_fraction():
    trees = [_leaf_tree(1) for _ in range(20)] + [_leaf_tree(0) for _ in range(30)]
    forest = Forest(trees, 1, 0, ["x"])
    assert predict_proba(forest, np.array([0.0])) == 0.40


def test_dimension_mismatch_rejected(rng):
    X, y = _threshold_data(rng, n=100, f=3)
    forest = fit_forest(TrainingSet(X, y, ["a", "b", "c"]), m_trees=3, seed=1)
    with pytest.raises(DataError, match="components"):
        predict_proba(forest, np.array([1.0, 2.0]))


def test_mtry_out_of_range(rng):
    X, y = _threshold_data(rng, n=50, f=2)
    train = TrainingSet(X, y, ["a", "b"])
    with pytest.raises(DataError, match="mtry"):
        fit_forest(train, m_trees=2, mtry=3, seed=0)


def test_vote_granularity_is_one_over_m(rng):
    X, y = _threshold_data(rng, n=400, f=2)
    forest = fit_forest(TrainingSet(X, y, ["a", "b"]), m_trees=7, seed=5)
    probs = predict_proba_batch(forest, rng.uniform(-1, 1, size=(200, 2)))
    scaled = probs * 7
    assert np.allclose(scaled, np.round(scaled))


def test_oob_fraction_near_inverse_e(rng):
    X, y = _threshold_data(rng, n=500, f=2)
    forest = fit_forest(TrainingSet(X, y, ["a", "b"]), m_trees=30, seed=2)
    for tree in forest.trees:
        fraction = tree.oob_indices.size / 500
        assert 0.25 <= fraction <= 0.45


def test_prediction_independent_of_threads(rng):
    X, y = _threshold_data(rng, n=600, f=4)
    forest = fit_forest(TrainingSet(X, y, ["a", "b", "c", "d"]), m_trees=20, seed=3)
    Xq = rng.uniform(-1, 1, size=(500, 4))
    base = predict_proba_batch(forest, Xq, threads=1)
    for threads in (2, 4, 8):
        assert np.array_equal(
            predict_proba_batch(forest, Xq, threads=threads, block_size=64), base
        )


def test_depth_one_tree_matches_exhaustive_stump_oracle(rng):
    # exactly separable by one split on feature 1
    X = rng.uniform(0, 10, size=(200, 3))
    y = (X[:, 1] > 4.7).astype(int)
    train = TrainingSet(X, y, ["a", "b", "c"])
    forest = fit_forest(train, m_trees=1, mtry=3, seed=0, max_depth=1)
    probs = predict_proba_batch(forest, X)
    train_error = np.mean((probs > 0.5).astype(int) != y)
    assert train_error == 0.0
    assert best_stump_error(X, y) == 0.0


def test_importance_ranks_causal_feature_first(rng):
    X = rng.normal(size=(600, 5))
    y = (X[:, 1] > np.median(X[:, 1])).astype(int)
    train = TrainingSet(X, y, ["f0", "f1", "f2", "f3", "f4"])
    forest = fit_forest(train, m_trees=40, seed=0)
    imp = variable_importance(forest, train)
    assert imp.ranking()[0] == "f1"
    assert imp.raw.shape == (5,)
    assert imp.normalized.shape == (5,)
    positive = imp.normalized[imp.normalized > 0]
    assert np.isclose(positive.sum(), 1.0)


def test_noise_feature_importance_near_zero():
    accum = []
    for seed in range(20):
        gen = np.random.default_rng(seed)
        X = gen.normal(size=(300, 3))
        y = (X[:, 0] > 0).astype(int)
        train = TrainingSet(X, y, ["signal", "noise1", "noise2"])
        forest = fit_forest(train, m_trees=15, seed=seed)
        imp = variable_importance(forest, train)
        accum.append(imp.raw[1:])
    mean_noise = np.mean(accum, axis=0)
    assert np.all(np.abs(mean_noise) <= 0.05)


def test_serialization_round_trip(tmp_path, rng):
    X, y = _threshold_data(rng, n=250, f=3)
    train = TrainingSet(X, y, ["a", "b", "c"])
    forest = fit_forest(train, m_trees=12, seed=8)
    path = tmp_path / "forest.json"
    save_forest(forest, path)
    again = load_forest(path)
    assert forest_to_dict(again) == forest_to_dict(forest)
    Xq = rng.uniform(-1, 1, size=(100, 3))
    assert np.array_equal(
        predict_proba_batch(again, Xq), predict_proba_batch(forest, Xq)
    )
    imp1 = variable_importance(forest, train)
    imp2 = variable_importance(again, train)
    assert np.array_equal(imp1.raw, imp2.raw)


def test_from_dict_rejects_garbage():
    with pytest.raises(DataError):
        forest_from_dict({"format": "something-else"})


def test_importance_needs_out_of_bag_samples(rng):
    X, y = _threshold_data(rng, n=100, f=2)
    train = TrainingSet(X, y, ["a", "b"])
    forest = fit_forest(train, m_trees=3, seed=1)
    for tree in forest.trees:
        tree.oob_indices = np.array([], dtype=np.int64)
    with pytest.raises(DataError, match="out-of-bag"):
        variable_importance(forest, train)
