"""Random forest classifier (Gini splits, bootstrap, sqrt feature sampling) and metrics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 16
    min_samples_split: int = 2
    features_per_split: Optional[int] = None  # None -> ceil(sqrt(F))
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")

    def resolved_features(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, min(self.features_per_split, n_features))


@dataclass(frozen=True)
class DecisionTree:
    """Array-encoded binary tree; ``feature == LEAF`` marks leaves."""

    feature: np.ndarray  # (n_nodes,) int64
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray  # (n_nodes,) int64
    right: np.ndarray  # (n_nodes,) int64
    value: np.ndarray  # (n_nodes, C) float64 class counts of the training samples at the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] != LEAF
        while active.any():
            n = node[active]
            go_left = X[rows[active], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        leaf_values = self.value[self.apply(X)]
        return leaf_values / leaf_values.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ForestModel:
    trees: tuple
    n_classes: int
    n_features: int


def _best_split(Xn: np.ndarray, yn: np.ndarray, feats: np.ndarray, n_classes: int):
    """Lowest weighted Gini over all midpoint thresholds of ``feats``.

    Returns (feature, threshold) or None when every candidate feature is constant.
    """
    m = len(yn)
    vals = Xn[:, feats]
    order = np.argsort(vals, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(vals, order, axis=0)
    onehot = np.eye(n_classes)[yn[order]]  # (m, f, C)
    left_counts = np.cumsum(onehot, axis=0)[:-1]  # left side holds the first i+1 samples
    total = left_counts[-1] + onehot[-1]
    right_counts = total[None] - left_counts
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    gini_left = 1.0 - np.sum(left_counts**2, axis=2) / n_left**2
    gini_right = 1.0 - np.sum(right_counts**2, axis=2) / n_right**2
    impurity = (n_left * gini_left + n_right * gini_right) / m
    valid = sorted_vals[1:] > sorted_vals[:-1]
    if not valid.any():
        return None
    impurity = np.where(valid, impurity, np.inf)
    # first minimum in (feature order, position) order
    flat = int(np.argmin(impurity.T))
    j, i = divmod(flat, m - 1)
    lo, hi = sorted_vals[i, j], sorted_vals[i + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(feats[j]), float(thr)


def _fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, cfg: ForestConfig,
              rng: np.random.Generator) -> DecisionTree:
    n, n_features = X.shape
    k = cfg.resolved_features(n_features)
    if cfg.bootstrap:
        sample = rng.integers(0, n, size=n)
    else:
        sample = np.arange(n)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.bincount(y[idx], minlength=n_classes).astype(np.float64))
        return len(feature) - 1

    stack = [(new_node(sample), sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = value[node]
        if depth >= cfg.max_depth or len(idx) < cfg.min_samples_split or np.count_nonzero(counts) <= 1:
            continue
        Xn, yn = X[idx], y[idx]
        perm = rng.permutation(n_features)
        split = _best_split(Xn, yn, perm[:k], n_classes)
        if split is None and k < n_features:
            # keep drawing features until a non-constant one turns up
            split = _best_split(Xn, yn, perm[k:], n_classes)
        if split is None:
            continue
        f, thr = split
        mask = Xn[:, f] <= thr
        feature[node], threshold[node] = f, thr
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64).reshape(-1, n_classes),
    )


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tree_index)]))


def fit(X, y, cfg: ForestConfig = ForestConfig(), n_classes: Optional[int] = None) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, F) and aligned with y")
    if len(X) < 2:
        raise ValueError("fit requires at least two samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if y.max() >= n_classes:
        raise ValueError("label outside [0, n_classes)")

    def build(t):
        return _fit_tree(X, y, n_classes, cfg, tree_rng(cfg.seed, t))

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as pool:
            trees = tuple(pool.map(build, range(cfg.n_trees)))
    else:
        trees = tuple(build(t) for t in range(cfg.n_trees))
    return ForestModel(trees, n_classes, X.shape[1])


def predict_proba(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[-1]}")
    proba = np.zeros((len(X), model.n_classes))
    for tree in model.trees:
        proba += tree.predict_proba(X)
    return proba / len(model.trees)


def predict(model: ForestModel, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(predict_proba(model, X), axis=1)


def with_seed(cfg: ForestConfig, seed: int) -> ForestConfig:
    return replace(cfg, seed=seed)


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError("length mismatch")
    if len(y_true) == 0:
        raise ValueError("accuracy of empty input")
    return float(np.mean(y_true == y_pred))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def weighted_f1(y_true, y_pred, n_classes: int) -> float:
    """Support-weighted mean of per-class F1 (F1 is 0 when precision + recall is 0)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError("length mismatch")
    if len(y_true) == 0:
        raise ValueError("weighted F1 of empty input")
    cm = confusion_matrix(y_true, y_pred, n_classes).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(np.sum(support / len(y_true) * f1))
