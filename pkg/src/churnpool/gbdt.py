"""Gradient-boosted regression trees on logistic loss.

Boosting starts from the base-rate log-odds and fits each squared-error tree
to the current residuals ``y - sigmoid(margin)`` on a fresh row subsample,
with per-tree feature subsampling, ridge-shrunk leaf values, and validation
early stopping.  Split search is exact greedy over sorted unique values.

Node covers (fitting-subsample counts) are recorded on every node: the
attribution layer weighs tree paths by them, so they are part of the
persisted model.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import BaseEstimator, check_is_fitted
from .data import Dataset
from .errors import ValidationError
from .numerics import PROB_CLIP, binary_log_loss, sigmoid
from .rng import default_rng
from .validation import as_float_matrix, check_binary_labels

__all__ = [
    "TreeNode",
    "TreeEnsemble",
    "GradientBoostedTrees",
    "fit_gbdt",
    "feature_importance",
]

_MIN_SPLIT_GAIN = 1e-12


class TreeNode:
    """One node of a regression tree.

    Internal nodes carry ``(feature_index, threshold, left, right, gain)``;
    leaves carry ``value``.  Both carry ``cover``, the number of fitting
    rows that reached the node.
    """

    __slots__ = ("feature_index", "threshold", "left", "right", "gain",
                 "value", "cover")

    def __init__(self, *, feature_index=None, threshold=None, left=None,
                 right=None, gain=None, value=None, cover=0.0):
        self.feature_index = feature_index
        self.threshold = threshold
        self.left = left
        self.right = right
        self.gain = gain
        self.value = value
        self.cover = float(cover)

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value, "cover": self.cover}
        return {
            "feature_index": self.feature_index,
            "threshold": self.threshold,
            "gain": self.gain,
            "cover": self.cover,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TreeNode":
        if "value" in doc:
            return cls(value=doc["value"], cover=doc["cover"])
        return cls(feature_index=doc["feature_index"], threshold=doc["threshold"],
                   gain=doc["gain"], cover=doc["cover"],
                   left=cls.from_dict(doc["left"]), right=cls.from_dict(doc["right"]))


def _tree_predict(root: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if node.is_leaf:
            out[rows] = node.value
            continue
        go_left = X[rows, node.feature_index] <= node.threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


@dataclass
class TreeEnsemble:
    """Additive boosted trees: margin(x) = init_logodds + lr * sum tree_m(x)."""

    init_logodds: float
    learning_rate: float
    trees: list[TreeNode]
    feature_names: tuple[str, ...]

    @property
    def p(self) -> int:
        return len(self.feature_names)

    def predict_margin(self, X) -> np.ndarray | float:
        """Raw log-odds margin; accepts one vector or a matrix of rows."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.p:
            raise ValidationError(f"x has {X.shape[1]} features, expected {self.p}")
        margins = np.full(X.shape[0], self.init_logodds)
        # Fixed tree-index order keeps the reduction bit-deterministic.
        for tree in self.trees:
            margins += self.learning_rate * _tree_predict(tree, X)
        return float(margins[0]) if single else margins

    def predict_proba(self, X) -> np.ndarray | float:
        """Churn probability, clipped away from 0/1 for log-loss stability."""
        margin = self.predict_margin(X)
        prob = np.clip(sigmoid(margin), PROB_CLIP, 1.0 - PROB_CLIP)
        return float(prob) if np.ndim(margin) == 0 else prob

    def to_json(self) -> str:
        return json.dumps({
            "init_logodds": self.init_logodds,
            "learning_rate": self.learning_rate,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        doc = json.loads(text)
        return cls(doc["init_logodds"], doc["learning_rate"],
                   [TreeNode.from_dict(t) for t in doc["trees"]],
                   tuple(doc["feature_names"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _best_split(x: np.ndarray, r: np.ndarray, min_leaf: int):
    """Best squared-error split of one feature column.

    Returns ``(gain, threshold)`` or ``None``.  Gain is the parent SSE minus
    the children SSE under mean predictions, via the prefix-sum identity.
    """
    n = x.size
    if n < 2 * min_leaf:
        return None
    order = np.argsort(x, kind="stable")
    xs = x[order]
    rs = r[order]
    csum = np.cumsum(rs)
    total = csum[-1]
    left_counts = np.arange(min_leaf, n - min_leaf + 1)
    valid = xs[left_counts - 1] < xs[left_counts]
    if not valid.any():
        return None
    left_counts = left_counts[valid]
    left_sums = csum[left_counts - 1]
    gains = (left_sums ** 2 / left_counts
             + (total - left_sums) ** 2 / (n - left_counts)
             - total ** 2 / n)
    best = int(np.argmax(gains))
    if gains[best] <= _MIN_SPLIT_GAIN:
        return None
    cut = left_counts[best]
    return float(gains[best]), float((xs[cut - 1] + xs[cut]) / 2.0)


def _grow_tree(X: np.ndarray, r: np.ndarray, rows: np.ndarray,
               features: np.ndarray, depth: int, max_depth: int,
               min_leaf: int, l2_leaf: float) -> TreeNode:
    n = rows.size
    if depth >= max_depth or n < 2 * min_leaf:
        return TreeNode(value=float(r[rows].sum() / (n + l2_leaf)), cover=n)
    best_gain, best_feature, best_threshold = 0.0, None, None
    for f in features:
        found = _best_split(X[rows, f], r[rows], min_leaf)
        if found is not None and found[0] > best_gain:
            best_gain, best_threshold = found
            best_feature = int(f)
    if best_feature is None:
        return TreeNode(value=float(r[rows].sum() / (n + l2_leaf)), cover=n)
    go_left = X[rows, best_feature] <= best_threshold
    left = _grow_tree(X, r, rows[go_left], features, depth + 1,
                      max_depth, min_leaf, l2_leaf)
    right = _grow_tree(X, r, rows[~go_left], features, depth + 1,
                       max_depth, min_leaf, l2_leaf)
    return TreeNode(feature_index=best_feature, threshold=best_threshold,
                    left=left, right=right, gain=best_gain, cover=n)


class GradientBoostedTrees(BaseEstimator):
    """Boosted-tree classifier with validation early stopping.

    Parameters
    ----------
    iterations : int
        Maximum number of boosting rounds.
    learning_rate : float
        Shrinkage applied to every tree's contribution.
    max_depth : int
        Depth cap per tree.
    min_samples_leaf : int
        Minimum fitting rows per leaf.
    l2_leaf : float
        Ridge term added to the leaf denominator: leaf = sum(r) / (n + l2).
    row_subsample, feature_subsample : float
        Fractions in (0, 1]; rows are drawn per iteration without
        replacement, features per tree.
    early_stopping_rounds : int
        Stop after this many consecutive rounds without validation
        improvement; the returned ensemble is truncated at the best round.
    seed : int
        Subsampling seed.
    """

    def __init__(self, iterations: int = 1000, learning_rate: float = 0.03,
                 max_depth: int = 6, min_samples_leaf: int = 20,
                 l2_leaf: float = 3.0, row_subsample: float = 0.8,
                 feature_subsample: float = 0.8,
                 early_stopping_rounds: int = 50, seed: int = 0):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.l2_leaf = l2_leaf
        self.row_subsample = row_subsample
        self.feature_subsample = feature_subsample
        self.early_stopping_rounds = early_stopping_rounds
        self.seed = seed
        self.ensemble_: TreeEnsemble | None = None

    def _check_params(self):
        for name in ("iterations", "learning_rate", "max_depth",
                     "min_samples_leaf", "l2_leaf", "early_stopping_rounds"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("row_subsample", "feature_subsample"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValidationError(f"{name} must be in (0, 1], got {value}")

    def fit(self, X, y, X_val, y_val, feature_names=None) -> "GradientBoostedTrees":
        self._check_params()
        X = as_float_matrix(X)
        y = check_binary_labels(y).astype(np.float64)
        X_val = as_float_matrix(X_val, "X_val")
        y_val = check_binary_labels(y_val, "y_val").astype(np.float64)
        if X_val.shape[0] == 0:
            raise ValidationError("validation set is empty")
        n, p = X.shape
        if feature_names is None:
            feature_names = tuple(f"f{k}" for k in range(p))
        p_bar = float(y.mean())
        if p_bar in (0.0, 1.0):
            raise ValidationError(
                "training labels contain a single class; base log-odds undefined")
        init = math.log(p_bar / (1.0 - p_bar))

        rng = default_rng(self.seed)
        margins = np.full(n, init)
        val_margins = np.full(X_val.shape[0], init)
        trees: list[TreeNode] = []
        train_losses, val_losses = [], []
        best_loss = math.inf
        best_iter = 0
        all_rows = np.arange(n)
        all_feats = np.arange(p)
        n_rows = max(1, int(round(self.row_subsample * n)))
        n_feats = max(1, int(round(self.feature_subsample * p)))

        for m in range(self.iterations):
            rows = all_rows if n_rows == n else np.sort(
                rng.choice(n, size=n_rows, replace=False))
            feats = all_feats if n_feats == p else np.sort(
                rng.choice(p, size=n_feats, replace=False))
            residual = y - sigmoid(margins)
            tree = _grow_tree(X, residual, rows, feats, 0, self.max_depth,
                              self.min_samples_leaf, self.l2_leaf)
            trees.append(tree)
            margins += self.learning_rate * _tree_predict(tree, X)
            val_margins += self.learning_rate * _tree_predict(tree, X_val)
            train_losses.append(binary_log_loss(y, sigmoid(margins)))
            val_loss = binary_log_loss(y_val, sigmoid(val_margins))
            val_losses.append(val_loss)
            if val_loss < best_loss:
                best_loss = val_loss
                best_iter = m + 1
            elif (m + 1) - best_iter >= self.early_stopping_rounds:
                break

        self.ensemble_ = TreeEnsemble(init, self.learning_rate,
                                      trees[:best_iter], tuple(feature_names))
        self.best_iteration_ = best_iter
        self.train_log_loss_ = train_losses
        self.val_log_loss_ = val_losses
        return self

    def predict_margin(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict_margin(X)

    def predict_proba(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict_proba(X)

    def predict(self, X):
        proba = np.atleast_1d(self.predict_proba(X))
        return (proba >= 0.5).astype(np.int8)

    @property
    def feature_importances_(self) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        return feature_importance(self.ensemble_)


def fit_gbdt(train: Dataset, val: Dataset, **params) -> TreeEnsemble:
    """Convenience wrapper fitting on Datasets and returning the ensemble."""
    model = GradientBoostedTrees(**params)
    model.fit(train.features, train.labels, val.features, val.labels,
              feature_names=train.feature_names)
    return model.ensemble_


def feature_importance(ensemble: TreeEnsemble) -> np.ndarray:
    """Gain-share importance vector; nonnegative, sums to one.

    The all-stump degenerate case (zero total gain) falls back to a uniform
    vector with a warning.
    """
    if not ensemble.trees:
        raise ValidationError("ensemble has no trees")
    gains = np.zeros(ensemble.p)
    stack = list(ensemble.trees)
    while stack:
        node = stack.pop()
        if node.is_leaf:
            continue
        gains[node.feature_index] += node.gain
        stack.extend((node.left, node.right))
    total = gains.sum()
    if total <= 0:
        warnings.warn("ensemble has zero total gain; importance set uniform",
                      stacklevel=2)
        return np.full(ensemble.p, 1.0 / ensemble.p)
    return gains / total
