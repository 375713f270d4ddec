import io

import numpy as np
import pytest

from dottune.forest import cv_score, forest_fit, rfecv, rfecv_select, tree_fit, write_ranking_csv


def _linear(n=200, d=10, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    return X, 3.0 * X[:, 1] + noise * rng.normal(size=n)


def _best_root_split(x, y, min_leaf=3):
    """Exhaustive variance-reduction scan over one feature (test oracle)."""
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    best, thr = -np.inf, None
    for i in range(min_leaf, len(x) - min_leaf + 1):
        if xs[i - 1] == xs[i]:
            continue
        left, right = ys[:i], ys[i:]
        gain = -(left.var() * len(left) + right.var() * len(right))
        if gain > best:
            best, thr = gain, 0.5 * (xs[i - 1] + xs[i])
    return thr


def test_constant_target_single_leaf():
    X = np.random.default_rng(0).random((30, 4))
    tree = tree_fit(X, np.full(30, 2.5), rng=0)
    assert tree.n_leaves == 1
    assert np.all(tree.predict(X) == 2.5)
    forest = forest_fit(X, np.full(30, 2.5), n_trees=10, rng=0)
    assert np.all(forest.importances == 0)


def test_step_function_root_split():
    rng = np.random.default_rng(1)
    X = rng.random((100, 3))
    y = (X[:, 0] > 0.5).astype(float)
    tree = tree_fit(X, y, rng=0, max_features=3)
    assert tree.feature[0] == 0
    assert abs(tree.threshold[0] - 0.5) < 0.1
    assert tree.threshold[0] == pytest.approx(_best_root_split(X[:, 0], y))


def test_prediction_is_leaf_mean():
    X, y = _linear(60, 3, seed=2)
    tree = tree_fit(X, y, rng=0)
    leaves = tree.apply(X)
    for leaf in np.unique(leaves):
        assert tree.value[leaf] == pytest.approx(y[leaves == leaf].mean())
    assert np.all(tree.impurity_decrease >= 0)


def test_min_leaf_and_depth():
    X, y = _linear(300, 4, seed=3)
    tree = tree_fit(X, y, rng=0, max_depth=3)
    assert tree.n_leaves <= 8
    tree = tree_fit(X, y, rng=0)
    assert tree.n_samples[tree.feature < 0].min() >= 3


def test_forest_importance_ordering_and_normalization():
    X, y = _linear()
    forest = forest_fit(X, y, rng=0)
    imp = forest.importances
    assert np.argmax(imp) == 1
    assert imp.sum() == pytest.approx(1.0)
    assert np.all(imp >= 0)


def test_forest_prediction_is_tree_average():
    for seed in range(3):
        X, y = _linear(50, 4, seed=seed)
        forest = forest_fit(X, y, n_trees=7, rng=seed)
        manual = np.zeros(len(X))
        for tree in forest.trees:
            manual += tree.predict(X)
        assert np.array_equal(forest.predict(X), manual / 7)


def test_shuffling_relevant_feature_lowers_importance():
    wins = 0
    for seed in range(5):
        X, y = _linear(200, 10, seed=seed)
        base = forest_fit(X, y, rng=seed).importances[1]
        Xs = X.copy()
        Xs[:, 1] = np.random.default_rng(seed + 100).permutation(Xs[:, 1])
        shuffled = forest_fit(Xs, y, rng=seed).importances[1]
        wins += shuffled < base
    assert wins >= 3


def test_forest_needs_five_rows():
    with pytest.raises(ValueError):
        forest_fit(np.zeros((4, 2)), np.zeros(4))


def test_cv_score_examples():
    rng = np.random.default_rng(4)
    X = rng.random((150, 3))
    y = np.sin(6 * X[:, 0])
    assert cv_score(X, y, [0], rng=0) >= 0.9
    assert cv_score(X, y, [2], rng=0) <= 0.1
    with pytest.raises(ValueError):
        cv_score(X, y, [], rng=0)
    with pytest.raises(ValueError):
        cv_score(X[:4], y[:4], [0], k_folds=5)
    assert cv_score(X, y, [0, 1], rng=3) == cv_score(X, y, [0, 1], rng=3)


def _rfecv_fixture(seed, n=100):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 20))
    w = np.linspace(2.0, 1.0, 10)
    y = X[:, :10] @ w + 0.05 * rng.normal(size=n)
    return [f"k{j}" for j in range(20)], X, y


def test_rfecv_floor_and_guards():
    names, X, y = _rfecv_fixture(0)
    assert rfecv_select(names[:10], X[:, :10], y, rng=0) == names[:10]
    assert rfecv_select(names, X[:12], y[:12], rng=0) == names


def test_rfecv_recovers_strong_features():
    names, X, y = _rfecv_fixture(1)
    res = rfecv(names, X, y, rng=0)
    assert len(res.selected) >= 10
    assert set(res.selected) <= set(names)
    assert len(set(res.selected) & set(names[:10])) >= 8
    assert res.sizes[0] == 20 and res.sizes[-1] == 10
    assert rfecv_select(names, X, y, rng=0) == res.selected


def test_ranking_csv():
    buf = io.StringIO()
    write_ranking_csv(buf, ["a", "b", "c"], np.array([0.2, 0.5, 0.3]))
    lines = buf.getvalue().splitlines()
    assert lines[0] == "knob,importance"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["b", "c", "a"]
