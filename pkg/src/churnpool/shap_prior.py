"""Exact per-feature Shapley attribution on tree ensembles, and the
transformation of attribution statistics into a Gaussian coefficient prior.

Attribution semantics
---------------------
Attributions are computed in margin (log-odds) space against the
path-dependent expectation of each tree: when a feature is "absent" the
tree is descended into both children weighted by their recorded fitting
covers, and when "present" the input's own branch is followed.

For a single root-to-leaf path this value function factorizes over the
path's distinct features, so each leaf contributes a multiplicative
cooperative game whose Shapley values have a closed form: for feature j,

    phi_j = value * (p_j - q_j) * sum_s w(s, d) * E_s,

where p_j indicates that x satisfies every node of feature j on the path,
q_j is the product of that feature's branch cover fractions, w(s, d) are
the Shapley order weights, and E_s are the coefficients of the leave-one-
out polynomial  prod_{k != j} (q_k + p_k t).  Summing over leaves and
trees yields attributions that satisfy local accuracy exactly:
base_value + sum_j phi_j equals the predicted margin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, StandardizationStats
from .errors import ValidationError
from .gbdt import TreeEnsemble, TreeNode
from .numerics import sigmoid
from .rng import default_rng

__all__ = [
    "TreeShapExplainer",
    "tree_shap",
    "mean_abs_shap",
    "PriorSpec",
    "extract_priors",
    "prior_only_auc",
    "VARIANCE_FLOOR",
]

# Diagonal prior variances are floored here before scaling so the prior
# never becomes singular when per-source attribution means agree exactly.
VARIANCE_FLOOR = 1e-4


def _shapley_order_weights(d: int) -> np.ndarray:
    """w[s] = s! (d-1-s)! / d! for s = 0..d-1."""
    return np.array([math.factorial(s) * math.factorial(d - 1 - s)
                     / math.factorial(d) for s in range(d)])


class _LeafGame:
    """Per-leaf precomputation: constraints, cover fractions, Shapley tables."""

    __slots__ = ("value", "features", "constraints", "q", "weight_empty", "tables")

    def __init__(self, value: float, features: list[int],
                 constraints: list[list[tuple[float, bool]]], q: np.ndarray):
        self.value = value
        self.features = np.asarray(features, dtype=np.intp)
        self.constraints = constraints
        self.q = q
        # Weight of this leaf in the tree expectation: product of all
        # branch cover fractions along the path.
        self.weight_empty = float(np.prod(q))
        self.tables = self._build_tables()

    def _build_tables(self) -> np.ndarray:
        """Attribution table of shape (2**d, d): row = presence pattern."""
        d = self.q.size
        n_pat = 1 << d
        bits = ((np.arange(n_pat)[:, None] >> np.arange(d)[None, :]) & 1
                ).astype(np.float64)
        # Leave-one-out polynomial products via prefix/suffix DP over
        # factors (q_k + p_k t); coefficient arrays indexed [pattern, power].
        prefix = [np.zeros((n_pat, k + 1)) for k in range(d + 1)]
        prefix[0][:, 0] = 1.0
        for k in range(d):
            cur, nxt = prefix[k], prefix[k + 1]
            nxt[:, :k + 1] = cur * self.q[k]
            nxt[:, 1:k + 2] += cur * bits[:, k:k + 1]
        suffix = [np.zeros((n_pat, k + 1)) for k in range(d + 1)]
        suffix[0][:, 0] = 1.0
        for i, k in enumerate(range(d - 1, -1, -1)):
            cur, nxt = suffix[i], suffix[i + 1]
            nxt[:, :i + 1] = cur * self.q[k]
            nxt[:, 1:i + 2] += cur * bits[:, k:k + 1]
        w = _shapley_order_weights(d)
        table = np.empty((n_pat, d))
        for j in range(d):
            # prod_{k != j} = prefix[j] * suffix[d-1-j], degree d-1
            loo = np.zeros((n_pat, d))
            pre, suf = prefix[j], suffix[d - 1 - j]
            for a in range(pre.shape[1]):
                loo[:, a:a + suf.shape[1]] += pre[:, a:a + 1] * suf
            table[:, j] = (bits[:, j] - self.q[j]) * (loo @ w)
        return table * self.value

    def patterns(self, X: np.ndarray) -> np.ndarray:
        """Presence-pattern index of every row of X for this leaf."""
        idx = np.zeros(X.shape[0], dtype=np.intp)
        for k, (feat, conds) in enumerate(zip(self.features, self.constraints)):
            ok = np.ones(X.shape[0], dtype=bool)
            for threshold, went_left in conds:
                col = X[:, feat]
                ok &= (col <= threshold) if went_left else (col > threshold)
            idx |= ok.astype(np.intp) << k
        return idx


def _leaf_games(root: TreeNode) -> list[_LeafGame]:
    games: list[_LeafGame] = []

    def walk(node: TreeNode, path: list[tuple[int, float, bool, float]]):
        if node.is_leaf:
            by_feature: dict[int, tuple[list[tuple[float, bool]], float]] = {}
            for feat, threshold, went_left, frac in path:
                conds, q = by_feature.get(feat, ([], 1.0))
                conds.append((threshold, went_left))
                by_feature[feat] = (conds, q * frac)
            feats = sorted(by_feature)
            games.append(_LeafGame(
                node.value, feats,
                [by_feature[f][0] for f in feats],
                np.array([by_feature[f][1] for f in feats])))
            return
        if node.cover <= 0:
            raise ValidationError("internal node with nonpositive cover")
        for child, went_left in ((node.left, True), (node.right, False)):
            frac = child.cover / node.cover
            path.append((node.feature_index, node.threshold, went_left, frac))
            walk(child, path)
            path.pop()

    walk(root, [])
    return games


class TreeShapExplainer:
    """Shapley attribution for a fitted :class:`TreeEnsemble`.

    Per-tree structures are built once at construction; ``shap_values`` is
    then a pure, thread-safe evaluation.
    """

    def __init__(self, ensemble: TreeEnsemble):
        self.ensemble = ensemble
        self._games = [_leaf_games(t) for t in ensemble.trees]
        lr = ensemble.learning_rate
        self.expected_value = ensemble.init_logodds + lr * sum(
            g.value * g.weight_empty for games in self._games for g in games)

    def shap_values(self, X) -> np.ndarray:
        """Attribution matrix of shape (n, p) in margin space."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.ensemble.p:
            raise ValidationError(
                f"x has {X.shape[1]} features, expected {self.ensemble.p}")
        out = np.zeros((X.shape[0], self.ensemble.p))
        lr = self.ensemble.learning_rate
        for games in self._games:
            for game in games:
                if game.features.size == 0:
                    continue
                rows = game.tables[game.patterns(X)]
                # Accumulate in fixed (tree, leaf) order for determinism.
                out[:, game.features] += lr * rows
        return out[0] if single else out


def tree_shap(ensemble: TreeEnsemble, x) -> tuple[np.ndarray, float]:
    """Per-feature attributions and base value for one input vector."""
    explainer = TreeShapExplainer(ensemble)
    return explainer.shap_values(x), explainer.expected_value


def mean_abs_shap(ensemble: TreeEnsemble, data: Dataset) -> np.ndarray:
    """Mean absolute attribution per feature over a dataset."""
    if data.n == 0:
        raise ValidationError("dataset is empty")
    explainer = TreeShapExplainer(ensemble)
    return np.abs(explainer.shap_values(data.features)).mean(axis=0)


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian coefficient prior extracted from attribution statistics.

    ``beta0`` is nonnegative by construction (attribution magnitudes carry
    no sign), which the downstream hierarchical fit treats as a location
    to be corrected by data; see the provenance metadata for how the
    diagonal variances were formed.
    """

    feature_names: tuple[str, ...]
    beta0: np.ndarray
    sigma0_diag: np.ndarray
    scale_lambda: float
    provenance: dict

    def __post_init__(self):
        beta0 = np.asarray(self.beta0, dtype=np.float64)
        sigma0 = np.asarray(self.sigma0_diag, dtype=np.float64)
        if beta0.shape != sigma0.shape or beta0.ndim != 1:
            raise ValidationError("beta0 and sigma0_diag must be 1-D, equal length")
        if len(self.feature_names) != beta0.size:
            raise ValidationError("feature_names length must match beta0")
        if not np.all(np.isfinite(beta0)):
            raise ValidationError("beta0 must be finite")
        if np.any(sigma0 <= 0):
            raise ValidationError("sigma0_diag must be strictly positive")
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "sigma0_diag", sigma0)

    @property
    def p(self) -> int:
        return self.beta0.size

    def to_json(self) -> str:
        return json.dumps({
            "feature_names": list(self.feature_names),
            "beta0": [float(v) for v in self.beta0],
            "sigma0_diag": [float(v) for v in self.sigma0_diag],
            "lambda": self.scale_lambda,
            "provenance": self.provenance,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PriorSpec":
        doc = json.loads(text)
        return cls(tuple(doc["feature_names"]),
                   np.asarray(doc["beta0"], dtype=np.float64),
                   np.asarray(doc["sigma0_diag"], dtype=np.float64),
                   float(doc["lambda"]), doc["provenance"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PriorSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def extract_priors(ensemble: TreeEnsemble, val: Dataset,
                   stats: StandardizationStats,
                   lambda_scale: float = 1.0) -> PriorSpec:
    """Build a Gaussian coefficient prior from attribution statistics.

    The prior mean is the mean absolute attribution normalized to
    coefficient scale by the recorded pre-standardization stds.  Diagonal
    variances are the between-source-tag population variances of per-tag
    mean absolute attributions, floored and inflated by ``1 + lambda_scale``.

    With a single source tag the between-tag variance is undefined; the
    fallback uses ``(floor + phi_j**2) * (1 + lambda_scale)`` so prior
    width stays proportional to signal magnitude.  The fallback is
    recorded in the provenance.
    """
    if val.n == 0:
        raise ValidationError("validation dataset is empty")
    if lambda_scale < 0:
        raise ValidationError(f"lambda_scale must be >= 0, got {lambda_scale}")
    if stats.means.shape[0] != ensemble.p:
        raise ValidationError("standardization stats do not match model features")

    explainer = TreeShapExplainer(ensemble)
    all_abs = np.abs(explainer.shap_values(val.features))
    phi = all_abs.mean(axis=0)
    beta0 = phi / stats.stds

    tags = val.source_tags
    unique_tags = sorted(set(tags)) if tags is not None else []
    provenance: dict = {"lambda": float(lambda_scale)}
    if len(unique_tags) >= 2:
        tag_arr = np.asarray(tags)
        per_tag = np.stack([
            all_abs[tag_arr == tag].mean(axis=0) for tag in unique_tags])
        sigma_sq = per_tag.var(axis=0)  # population variance over tags
        provenance.update({
            "tags": unique_tags,
            "counts": {tag: int((tag_arr == tag).sum()) for tag in unique_tags},
            "fallback": False,
        })
    else:
        sigma_sq = VARIANCE_FLOOR + phi ** 2
        only = unique_tags or [None]
        provenance.update({
            "tags": [t for t in only if t is not None],
            "counts": {only[0]: val.n} if only[0] is not None else {},
            "fallback": True,
        })
    sigma0 = np.maximum(sigma_sq, VARIANCE_FLOOR) * (1.0 + lambda_scale)
    return PriorSpec(ensemble.feature_names, beta0, sigma0,
                     float(lambda_scale), provenance)


def prior_only_auc(prior: PriorSpec, holdout: Dataset, draws: int,
                   seed: int) -> float:
    """Mean AUC of coefficient draws from the prior scored on held-out data."""
    from .evaluate import auc  # local import; evaluate depends on this module

    if draws < 1:
        raise ValidationError(f"draws must be >= 1, got {draws}")
    neg, pos = holdout.class_counts()
    if neg == 0 or pos == 0:
        raise ValidationError("holdout needs both classes for AUC")
    if holdout.p != prior.p:
        raise ValidationError("holdout feature count does not match prior")
    rng = default_rng(seed)
    sds = np.sqrt(prior.sigma0_diag)
    total = 0.0
    for _ in range(draws):
        beta = prior.beta0 + sds * rng.standard_normal(prior.p)
        total += auc(sigmoid(holdout.features @ beta), holdout.labels)
    return total / draws
