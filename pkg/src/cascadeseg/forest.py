"""Random forests from scratch: bagged axis-aligned trees for classification or regression.

Classification trees split on Gini impurity and store class frequencies at
their leaves; regression trees split on summed squared error over all
outputs and store mean vectors. Features are compared in float32, so a
forest reloaded from its checkpoint predicts bit-identically.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidTrainingSet

LEAF = -1


@dataclass
class Tree:
    feature: np.ndarray    # int32, LEAF for leaves
    threshold: np.ndarray  # float32; go left when x <= threshold
    left: np.ndarray       # int32 child index, -1 at leaves
    right: np.ndarray
    value: np.ndarray      # float32 (n_nodes, n_outputs); leaf payload

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] != LEAF
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active[r] = self.feature[node[r]] != LEAF
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class ForestModel:
    mode: str                      # "classification" or "regression"
    n_features: int
    n_outputs: int
    trees: list = field(default_factory=list)
    seed: int = 0
    classes: np.ndarray = None
    oob_score: float = float("nan")
    # per training row, averaged over trees that did not see it (NaN if none); not persisted
    oob_proba: np.ndarray = field(default=None, repr=False)

    def predict_raw(self, X) -> np.ndarray:
        X = _as_features(X, self.n_features)
        acc = np.zeros((len(X), self.n_outputs), dtype=np.float64)
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def predict_proba(self, X) -> np.ndarray:
        if self.mode != "classification":
            raise InvalidArgument("predict_proba needs a classification forest")
        return self.predict_raw(X)

    def predict(self, X) -> np.ndarray:
        raw = self.predict_raw(X)
        if self.mode == "classification":
            return self.classes[np.argmax(raw, axis=1)]
        return raw

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.mode}:{self.n_features}:{self.n_outputs}".encode())
        for t in self.trees:
            for arr in (t.feature, t.threshold, t.left, t.right, t.value):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _as_features(X, n_features=None):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise InvalidArgument("feature matrix must be 2D")
    if n_features is not None and X.shape[1] != n_features:
        raise InvalidArgument(f"expected {n_features} features, got {X.shape[1]}")
    return X


def build_tree(X, Y, rng, classification, max_features, max_depth=None, min_samples_leaf=1, min_samples_split=2) -> Tree:
    """Grow one tree on float32 ``X`` and float64 targets ``Y`` (one-hot for classes)."""
    n_features = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(np.float32(0))
        left.append(-1)
        right.append(-1)
        value.append(Y[idx].mean(axis=0))
        return len(feature) - 1

    root = new_node(np.arange(len(X)))
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        Yn = Y[idx]
        if len(idx) < min_samples_split or (max_depth is not None and depth >= max_depth):
            continue
        if np.all(Yn == Yn[0]):
            continue
        feats = np.sort(rng.choice(n_features, size=min(max_features, n_features), replace=False))
        Xn = X[idx]
        split = _best_split(Xn, Yn, feats, min_samples_leaf, classification)
        if split is None:
            continue
        _, f, thr = split
        go_left = Xn[:, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        lnode = new_node(li)
        rnode = new_node(ri)
        left[node], right[node] = lnode, rnode
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=np.float32),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(value, dtype=np.float32).reshape(len(feature), -1),
    )


def _best_split(Xn, Yn, features, min_leaf, classification):
    """Return ``(score, feature, threshold)`` minimising the summed child impurity."""
    n = len(Xn)
    vals = Xn[:, features]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    ys = Yn[order]                          # (n, m, k)
    csum = np.cumsum(ys, axis=0)
    total = csum[-1]
    csum = csum[:-1]
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    if classification:
        score = n - (csum**2).sum(axis=2) / nl - ((total[None] - csum) ** 2).sum(axis=2) / nr
    else:
        ysq = np.cumsum((ys**2).sum(axis=2), axis=0)
        tot_sq = ysq[-1]
        ysq = ysq[:-1]
        score = ysq - (csum**2).sum(axis=2) / nl + (tot_sq[None] - ysq) - ((total[None] - csum) ** 2).sum(axis=2) / nr
    valid = sv[:-1] < sv[1:]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[max(n - min_leaf, 0):] = False
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    flat = int(np.argmin(score))
    i, j = divmod(flat, len(features))
    lo, hi = sv[i, j], sv[i + 1, j]
    thr = np.float32((np.float64(lo) + np.float64(hi)) / 2.0)
    if not lo <= thr < hi:
        thr = lo
    return float(score[i, j]), int(features[j]), thr


def _tree_seeds(seed, n_trees):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_trees)]


def train_forest(features, labels, trees: int = 50, seed: int = 0, max_features=None, max_depth=None, min_samples_leaf: int = 1) -> ForestModel:
    """Bagged Gini trees with ``sqrt(F)`` candidate features per node.

    ``oob_score`` is the out-of-bag accuracy over the distinct row indices
    that were left out by at least one tree.
    """
    X = _as_features(features)
    y = np.asarray(labels)
    if len(X) != len(y) or len(X) == 0:
        raise InvalidArgument("features and labels must be non-empty and aligned")
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise InvalidTrainingSet("random forest needs at least two classes")
    Y = np.eye(len(classes))[y_idx]
    mtry = max_features or max(1, int(math.sqrt(X.shape[1])))
    model = ForestModel("classification", X.shape[1], len(classes), [], seed, classes)
    oob_sum = np.zeros((len(X), len(classes)))
    oob_n = np.zeros(len(X))
    for rng in _tree_seeds(seed, trees):
        boot = rng.integers(0, len(X), size=len(X))
        tree = build_tree(X[boot], Y[boot], rng, True, mtry, max_depth, min_samples_leaf)
        model.trees.append(tree)
        out = np.ones(len(X), dtype=bool)
        out[boot] = False
        if out.any():
            oob_sum[out] += tree.predict(X[out])
            oob_n[out] += 1
    seen = oob_n > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        model.oob_proba = oob_sum / oob_n[:, None]
    if seen.any():
        model.oob_score = float(np.mean(np.argmax(oob_sum[seen], axis=1) == y_idx[seen]))
    return model


def train_regression_forest(features, targets, trees: int = 20, seed: int = 0, max_features=None, max_depth=12, min_samples_leaf: int = 5):
    """Multi-output regression forest; returns ``(model, oob_predictions)``.

    Rows never left out of bag get NaN out-of-bag predictions.
    """
    X = _as_features(features)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) != len(Y) or len(X) == 0:
        raise InvalidArgument("features and targets must be non-empty and aligned")
    mtry = max_features or max(1, X.shape[1] // 3)
    model = ForestModel("regression", X.shape[1], Y.shape[1], [], seed)
    oob_sum = np.zeros(Y.shape)
    oob_n = np.zeros(len(X))
    for rng in _tree_seeds(seed, trees):
        boot = rng.integers(0, len(X), size=len(X))
        tree = build_tree(X[boot], Y[boot], rng, False, mtry, max_depth, min_samples_leaf)
        model.trees.append(tree)
        out = np.ones(len(X), dtype=bool)
        out[boot] = False
        if out.any():
            oob_sum[out] += tree.predict(X[out])
            oob_n[out] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        oob = oob_sum / oob_n[:, None]
    return model, oob
