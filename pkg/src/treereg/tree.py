"""Deterministic CART with reduced-error pruning and average path length (APL)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _cart
from .errors import InvalidInputError, ShapeError


@dataclass(frozen=True)
class TreeConfig:
    seed: int = 0
    max_features: str | float = "all"
    min_samples_leaf: int = 5
    max_depth: int | None = None
    seeds_for_averaging: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.min_samples_leaf < 1:
            raise InvalidInputError("min_samples_leaf must be >= 1")
        if self.max_features != "all" and not (0.0 < float(self.max_features) <= 1.0):
            raise InvalidInputError("max_features must be 'all' or a fraction in (0, 1]")
        if self.seeds_for_averaging is not None and len(self.seeds_for_averaging) == 0:
            raise InvalidInputError("seeds_for_averaging must be nonempty")

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.seeds_for_averaging) if self.seeds_for_averaging else (self.seed,)

    def with_seed(self, seed: int) -> "TreeConfig":
        return TreeConfig(seed, self.max_features, self.min_samples_leaf, self.max_depth,
                          self.seeds_for_averaging)

    @classmethod
    def from_dict(cls, d: dict) -> "TreeConfig":
        d = dict(d)
        if d.get("seeds_for_averaging") is not None:
            d["seeds_for_averaging"] = tuple(d["seeds_for_averaging"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Binary tree over flat node arrays; ``feature == -1`` marks a leaf.

    Routing is ``x[feature] <= threshold`` to the left child.  Leaves predict
    the training majority, ties going to 0.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    n_pos: np.ndarray
    n_features: int = field(default=0)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def labels(self) -> np.ndarray:
        return (2 * self.n_pos > self.n_samples).astype(np.int64)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or (self.n_features and X.shape[1] != self.n_features):
            raise ShapeError(f"tree expects {self.n_features} features, got shape {X.shape}")
        return np.ascontiguousarray(X)

    def apply(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Leaf index and path depth for each row."""
        return _cart.leaf_of(self.feature, self.threshold, self.left, self.right, self._check(X))

    def predict(self, X) -> np.ndarray:
        leaves, _ = self.apply(X)
        return self.labels[leaves]

    def depths(self, X) -> np.ndarray:
        return self.apply(X)[1]

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def structurally_equal(self, other: "DecisionTree") -> bool:
        return (
            np.array_equal(self.feature, other.feature)
            and np.array_equal(self.threshold, other.threshold)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
            and np.array_equal(self.n_samples, other.n_samples)
            and np.array_equal(self.n_pos, other.n_pos)
        )

    def to_dict(self) -> dict:
        nodes = []
        labels = self.labels
        for k in range(self.n_nodes):
            rec = {"id": k, "samples": int(self.n_samples[k]), "positives": int(self.n_pos[k])}
            if self.feature[k] >= 0:
                rec.update(feature=int(self.feature[k]), threshold=float(self.threshold[k]),
                           left=int(self.left[k]), right=int(self.right[k]))
            else:
                rec.update(leaf=True, label=int(labels[k]))
            nodes.append(rec)
        return {"n_features": self.n_features, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        nodes = sorted(d["nodes"], key=lambda r: r["id"])
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        for k, rec in enumerate(nodes):
            if not rec.get("leaf", False):
                feature[k] = rec["feature"]
                threshold[k] = rec["threshold"]
                left[k] = rec["left"]
                right[k] = rec["right"]
        n_samples = np.array([r["samples"] for r in nodes], dtype=np.int64)
        n_pos = np.array([r["positives"] for r in nodes], dtype=np.int64)
        return cls(feature, threshold, left, right, n_samples, n_pos, int(d.get("n_features", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _from_arrays(arrays, n_features: int) -> DecisionTree:
    return DecisionTree(*_cart.compact(*arrays), n_features=n_features)


def _binary(y) -> np.ndarray:
    y = np.asarray(y)
    yb = y.astype(np.int64)
    if y.ndim != 1 or np.any((yb != 0) & (yb != 1)) or np.any(yb != y):
        raise InvalidInputError("labels must be a 1-D array of 0/1 values")
    return yb


def train_tree(X, y, cfg: TreeConfig = TreeConfig()) -> DecisionTree:
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    if X.ndim != 2 or len(X) == 0:
        raise InvalidInputError("train_tree needs a nonempty 2-D feature matrix")
    y = _binary(y)
    if len(y) != len(X):
        raise ShapeError("feature and label row counts differ")
    P = X.shape[1]
    if cfg.max_features == "all":
        n_feat = P
        keys = np.zeros((1, P))
    else:
        n_feat = max(1, int(round(float(cfg.max_features) * P)))
        keys = np.random.default_rng(cfg.seed).random((max(1, len(X)), P))
    max_depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
    arrays = _cart.build(X, y, int(cfg.min_samples_leaf), max_depth, keys, n_feat)
    return _from_arrays(arrays, P)


def prune_tree(tree: DecisionTree, X_val, y_val) -> DecisionTree:
    """Reduced-error pruning against a held-out set.

    Working bottom-up, a subtree is replaced by a leaf carrying its training
    majority whenever that does not increase the number of validation errors.
    """
    X_val = tree._check(X_val)
    y_val = _binary(y_val)
    if len(y_val) == 0 or len(X_val) != len(y_val):
        raise InvalidInputError("validation set must be nonempty and aligned")
    feat = _cart.prune(tree.feature, tree.threshold, tree.left, tree.right,
                       tree.n_samples, tree.n_pos, X_val, y_val)
    return _from_arrays((feat, tree.threshold, tree.left, tree.right, tree.n_samples,
                         tree.n_pos), tree.n_features)


def get_depth(tree: DecisionTree, x) -> int:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("get_depth takes a single input vector")
    return int(tree.depths(x)[0])


def _split_fit_prune(X, y, cfg: TreeConfig, val_fraction: float) -> DecisionTree:
    # inputs already validated: X contiguous float, y int64 0/1
    n = len(X)
    n_val = min(n - 1, max(1, int(np.floor(val_fraction * n))))
    # shuffle a canonical (lexicographic) row order so the split ignores input order
    canon = np.lexsort((y, *X.T[::-1]))
    perm = canon[np.random.default_rng(cfg.seed).permutation(n)]
    val, fit = perm[:n_val], perm[n_val:]
    P = X.shape[1]
    if cfg.max_features == "all":
        n_feat, keys = P, _NO_KEYS
    else:
        n_feat = max(1, int(round(float(cfg.max_features) * P)))
        keys = np.random.default_rng(cfg.seed).random((max(1, len(fit)), P))
    max_depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
    arrays = _cart.build(X[fit], y[fit], int(cfg.min_samples_leaf), max_depth, keys, n_feat)
    feat = _cart.prune(*arrays, X[val], y[val])
    return DecisionTree(*_cart.compact(feat, *arrays[1:]), n_features=P)


_NO_KEYS = np.zeros((1, 1))


def fit_pruned_tree(X, y, cfg: TreeConfig, val_fraction: float = 0.25) -> DecisionTree:
    """Seeded fit/validation shuffle, CART on the fit part, pruning on the rest."""
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = _binary(y)
    if len(X) < 2:
        raise InvalidInputError("need at least two examples to fit and prune")
    if len(y) != len(X):
        raise ShapeError("feature and label row counts differ")
    return _split_fit_prune(X, y, cfg, val_fraction)


def label_matrix(pred) -> np.ndarray:
    """Binarize predictions at 0.5 into an ``N x Q`` integer matrix."""
    pred = np.asarray(pred)
    if pred.ndim == 1:
        pred = pred[:, None]
    return (pred >= 0.5).astype(np.int64)


def apl_of_labels(X, Y, cfg: TreeConfig = TreeConfig(), val_fraction: float = 0.25) -> float:
    """APL for fixed labels ``Y`` (``N`` or ``N x Q``), averaged over outputs and seeds."""
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    Y = label_matrix(Y)
    n = len(X)
    if len(Y) != n:
        raise ShapeError("feature and label row counts differ")
    if n < 2:
        raise InvalidInputError("APL needs at least two examples")
    total = 0.0
    for q in range(Y.shape[1]):
        yq = Y[:, q]
        if yq.min() == yq.max():
            continue
        yq = np.ascontiguousarray(yq)
        for s in cfg.seeds:
            tree = _split_fit_prune(X, yq, cfg.with_seed(s) if s != cfg.seed else cfg, val_fraction)
            total += _cart.leaf_of(tree.feature, tree.threshold, tree.left, tree.right, X)[1].mean()
    return total / (Y.shape[1] * len(cfg.seeds))


def apl(X, predict_fn: Callable[[np.ndarray], np.ndarray], cfg: TreeConfig = TreeConfig(),
        val_fraction: float = 0.25) -> float:
    """Average decision path length of a pruned tree distilled from ``predict_fn``.

    ``predict_fn`` maps the ``N x P`` input matrix to predictions; values are
    thresholded at 0.5.  Depth is averaged over all ``N`` inputs, including the
    ones held out for pruning.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise InvalidInputError("APL needs at least two examples")
    return apl_of_labels(X, predict_fn(X), cfg, val_fraction)


def distill_tree(X, predictions, cfg: TreeConfig, val_fraction: float = 0.25,
                 output: int = 0) -> DecisionTree:
    """Pruned tree fit to one output column of ``predictions``."""
    y = label_matrix(predictions)[:, output]
    if len(X) < 2:
        label = int(y[0]) if len(y) else 0
        return DecisionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                            np.array([max(1, len(y))]), np.array([label * max(1, len(y))]),
                            np.asarray(X).shape[-1])
    return fit_pruned_tree(X, y, cfg, val_fraction)


def accuracy(tree: DecisionTree, X, y: Sequence[int]) -> float:
    return float(np.mean(tree.predict(X) == np.asarray(y)))
