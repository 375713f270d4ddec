"""CART regression trees, random forests, cross-validated scoring and RFECV.

Tree induction runs in a numba kernel; RFECV fits thousands of trees per call
and pure numpy is too slow for that on one core.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

MAX_DEPTH = 12
MIN_LEAF = 3
N_TREES = 100
K_FOLDS = 5
MIN_KNOBS = 10
MIN_ROWS = 15


@njit(cache=True)
def _grow(X, y, counts, presorted, max_depth, min_leaf, max_features, seed):
    np.random.seed(seed)
    n = 0
    for i in range(counts.shape[0]):
        n += counts[i]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    decrease = np.zeros(cap)

    # srt[f, lo:hi] lists the node's training rows (with bootstrap repeats) ordered by feature f
    srt = np.empty((d, n), np.int64)
    for f in range(d):
        k = 0
        for i in range(presorted.shape[0]):
            r = presorted[i, f]
            for _ in range(counts[r]):
                srt[f, k] = r
                k += 1
    yv = y
    goes_left = np.zeros(X.shape[0], np.int64)
    buf = np.empty(n, np.int64)
    order = np.arange(d)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        m = hi - lo
        s = 0.0
        ss = 0.0
        for i in range(lo, hi):
            v = yv[srt[0, i]]
            s += v
            ss += v * v
        value[node] = s / m
        count[node] = m
        sse = ss - s * s / m
        if depth >= max_depth or m < 2 * min_leaf or sse <= 1e-12 * max(ss, 1e-300):
            continue

        best_gain = -np.inf
        best_f = -1
        best_i = -1
        best_thr = 0.0
        visited = 0
        for fi in range(d):
            # lazy Fisher-Yates over feature indices
            j = fi + np.random.randint(d - fi)
            f = order[j]
            order[j] = order[fi]
            order[fi] = f
            if X[srt[f, lo], f] == X[srt[f, hi - 1], f]:
                continue
            visited += 1
            sl = 0.0
            for i in range(min_leaf - 1):
                sl += yv[srt[f, lo + i]]
            for i in range(min_leaf, m - min_leaf + 1):
                sl += yv[srt[f, lo + i - 1]]
                a = X[srt[f, lo + i - 1], f]
                b = X[srt[f, lo + i], f]
                if a < b:
                    sr = s - sl
                    gain = sl * sl / i + sr * sr / (m - i)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_i = i
                        thr = 0.5 * (a + b)
                        if thr >= b:
                            thr = a
                        best_thr = thr
            if visited >= max_features:
                break
        if best_f < 0:
            continue

        nl = best_i
        for i in range(lo, hi):
            goes_left[srt[best_f, i]] = 1 if i < lo + nl else 0
        # stable partition of every feature ordering
        for f in range(d):
            if f == best_f:
                continue
            a_i = lo
            b_n = 0
            for i in range(lo, hi):
                r = srt[f, i]
                g = goes_left[r]
                srt[f, a_i] = r
                buf[b_n] = r
                a_i += g
                b_n += 1 - g
            for i in range(b_n):
                srt[f, a_i + i] = buf[i]
        feature[node] = best_f
        threshold[node] = best_thr
        decrease[node] = best_gain - s * s / m
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        st_node[top] = rc
        st_lo[top] = lo + nl
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_lo[top] = lo
        st_hi[top] = lo + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], count[:n_nodes], decrease[:n_nodes])


@njit(cache=True)
def _apply(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass(frozen=True)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity_decrease: np.ndarray
    n_features: int

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def apply(self, X) -> np.ndarray:
        return _apply(self.feature, self.threshold, self.left, self.right, np.ascontiguousarray(X, dtype=float))

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def importances(self) -> np.ndarray:
        """Unnormalized impurity decrease per feature, per training sample."""
        out = np.zeros(self.n_features)
        split = self.feature >= 0
        np.add.at(out, self.feature[split], self.impurity_decrease[split])
        return out / self.n_samples[0]


def tree_fit(X, y, rng=None, max_depth: int = MAX_DEPTH, min_leaf: int = MIN_LEAF,
             max_features: int | None = None, rows: np.ndarray | None = None,
             presorted: np.ndarray | None = None) -> RegressionTree:
    """Grow a CART tree by greedy variance reduction.

    ``max_features`` defaults to ``ceil(sqrt(d))`` features tried per split.
    ``rows`` selects (possibly repeated) training rows, as in a bootstrap.
    ``presorted`` is ``argsort(X, axis=0)``, shared across a forest's trees.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("tree_fit needs at least 2 rows")
    d = X.shape[1]
    if max_features is None:
        max_features = max(1, int(math.ceil(math.sqrt(d))))
    if rows is None:
        counts = np.ones(X.shape[0], np.int64)
    else:
        counts = np.bincount(np.asarray(rows, dtype=np.int64), minlength=X.shape[0])
    if presorted is None:
        presorted = np.argsort(X, axis=0, kind="stable")
    seed = int(np.random.default_rng(rng).integers(2**31 - 1))
    arrays = _grow(X, y, counts, presorted, max_depth, min_leaf, max_features, seed)
    return RegressionTree(*arrays, n_features=d)


@dataclass(frozen=True)
class Forest:
    trees: list[RegressionTree]
    importances: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)


def forest_fit(X, y, n_trees: int = N_TREES, rng=None, **tree_params) -> Forest:
    """Bootstrap-aggregated CART trees with mean-decrease-in-impurity importances."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n = X.shape[0]
    if n < 5:
        raise ValueError("forest_fit needs at least 5 rows")
    rng = np.random.default_rng(rng)
    presorted = np.argsort(X, axis=0, kind="stable")
    trees = []
    imp = np.zeros(X.shape[1])
    for _ in range(n_trees):
        rows = rng.integers(0, n, size=n)
        tree = tree_fit(X, y, rng, rows=rows, presorted=presorted, **tree_params)
        trees.append(tree)
        imp += tree.importances()
    imp /= n_trees
    total = imp.sum()
    if total > 0:
        imp = imp / total
    return Forest(trees, imp)


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    sse = float(np.sum((y_true - y_pred) ** 2))
    sst = float(np.sum((y_true - y_true.mean()) ** 2))
    if sst == 0:
        return 1.0 if sse == 0 else 0.0
    return 1.0 - sse / sst


def kfold_indices(n: int, k: int, rng) -> list[np.ndarray]:
    perm = np.random.default_rng(rng).permutation(n)
    return np.array_split(perm, k)


def cv_score(X, y, subset: Sequence[int], k_folds: int = K_FOLDS, rng=None, n_trees: int = N_TREES) -> float:
    """Mean out-of-fold R² of forests trained on columns ``subset``."""
    subset = list(subset)
    if not subset:
        raise ValueError("cv_score needs a non-empty feature subset")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if not 2 <= k_folds <= n:
        raise ValueError(f"need 2 <= k_folds <= rows, got k_folds={k_folds}, rows={n}")
    rng = np.random.default_rng(rng)
    Xs = np.ascontiguousarray(X[:, subset])
    scores = []
    for test in kfold_indices(n, k_folds, rng):
        train = np.setdiff1d(np.arange(n), test)
        model = forest_fit(Xs[train], y[train], n_trees=n_trees, rng=rng)
        scores.append(r2_score(y[test], model.predict(Xs[test])))
    return float(np.mean(scores))


@dataclass
class RfecvResult:
    selected: list[str]
    sizes: list[int]
    scores: list[float]
    elimination_order: list[str]


def rfecv(names: Sequence[str], X, y, rng=None, min_features: int = MIN_KNOBS,
          min_rows: int = MIN_ROWS, k_folds: int = K_FOLDS, n_trees: int = N_TREES) -> RfecvResult:
    """Recursive feature elimination with cross-validation.

    Drops the least important feature one round at a time, scores each
    subset along the path by ``cv_score`` and keeps the best one (ties go to
    the larger subset).  Never goes below ``min(min_features, len(names))``.
    """
    names = list(names)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[1] != len(names):
        raise ValueError("X columns must match names")
    floor = min(min_features, len(names))
    if len(names) <= floor or X.shape[0] < max(min_rows, k_folds):
        return RfecvResult(names, [len(names)], [], [])
    rng = np.random.default_rng(rng)
    cv_seed = int(rng.integers(2**31 - 1))
    current = list(range(len(names)))
    path = [list(current)]
    dropped = []
    while len(current) > floor:
        forest = forest_fit(X[:, current], y, n_trees=n_trees, rng=rng)
        worst = int(np.argmin(forest.importances))
        dropped.append(names[current[worst]])
        current = current[:worst] + current[worst + 1:]
        path.append(list(current))
    # identical folds for every subset size
    scores = [cv_score(X, y, cols, k_folds, rng=cv_seed, n_trees=n_trees) for cols in path]
    best = max(range(len(path)), key=lambda i: (scores[i], len(path[i])))
    return RfecvResult([names[c] for c in path[best]], [len(p) for p in path], scores, dropped)


def rfecv_select(current_set: Sequence[str], X, y, rng=None, **kw) -> list[str]:
    return rfecv(current_set, X, y, rng=rng, **kw).selected


def write_ranking_csv(path_or_file, names: Sequence[str], importances) -> None:
    """Write ``knob,importance`` rows sorted by descending importance."""
    order = np.argsort(-np.asarray(importances), kind="stable")
    rows = [(names[i], float(importances[i])) for i in order]
    if hasattr(path_or_file, "write"):
        _write_rows(path_or_file, rows)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write_rows(fh, rows)


def _write_rows(fh, rows) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["knob", "importance"])
    for name, value in rows:
        writer.writerow([name, repr(value)])
