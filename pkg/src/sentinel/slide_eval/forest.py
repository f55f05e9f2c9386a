"""CART decision trees (Gini) and a bagged random forest."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .. import FORMAT_VERSION
from ..errors import MissingArtifactError, SentinelError, ShapeError
from ..parallel import ordered_map
from ..seeding import derive_seed


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    max_features: Union[int, str, None] = "sqrt"  # "sqrt" -> ceil(sqrt(d)); None -> all
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("forest needs at least one tree")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features is None:
            return n_features
        if self.max_features == "sqrt":
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, min(int(self.max_features), n_features))


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf.

    ``value`` is the fraction of tumor samples reaching the node. Samples
    go left when ``x[feature] <= threshold``.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self) -> int:
        for arr, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            arr.append(v)
        return len(self.feature) - 1

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(len(X))
        for i, row in enumerate(X):
            n = 0
            while self.feature[n] >= 0:
                n = self.left[n] if row[self.feature[n]] <= self.threshold[n] else self.right[n]
            out[i] = self.value[n]
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Class vote per row: 1 (tumor) when the leaf's tumor fraction is >= 0.5."""
        return (self.leaf_values(X) >= 0.5).astype(np.int64)


def _gini_counts(pos, n):
    p = pos / n
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def _best_split(X, y, features, min_leaf):
    n = len(y)
    best = None  # (impurity, feature, threshold)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        pos_left = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        total_pos = ys.sum()
        nl, pl = n_left[valid], pos_left[valid]
        nr, pr = n - nl, total_pos - pl
        impurity = (nl * _gini_counts(pl, nl) + nr * _gini_counts(pr, nr)) / n
        k = int(np.argmin(impurity))
        if best is None or impurity[k] < best[0]:
            cut = np.flatnonzero(valid)[k]
            best = (float(impurity[k]), int(f), float((xs[cut] + xs[cut + 1]) / 2.0))
    return best


def fit_tree(X, y, rng: Optional[np.random.Generator] = None, max_depth=None, min_samples_leaf=1, max_features=None) -> Tree:
    """Grow a CART tree. With ``max_features=None`` the result is deterministic."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]
    k = d if max_features is None else max_features
    tree = Tree()
    stack = [(tree._add(), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        tree.value[node] = float(ys.mean())
        if ys.min() == ys.max() or (max_depth is not None and depth >= max_depth) or len(idx) < 2 * min_samples_leaf:
            continue
        features = np.arange(d) if k >= d else np.sort(rng.choice(d, size=k, replace=False))
        split = _best_split(X[idx], ys, features, min_samples_leaf)
        if split is None:
            continue
        _imp, f, thr = split
        go_left = X[idx, f] <= thr
        tree.feature[node], tree.threshold[node] = f, thr
        left, right = tree._add(), tree._add()
        tree.left[node], tree.right[node] = left, right
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return tree


@dataclass
class ForestModel:
    config: ForestConfig
    n_features: int
    trees: list[Tree]

    def votes(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        return np.stack([t.predict(X) for t in self.trees], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return self.votes(X).mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "random-forest",
            "config": asdict(self.config),
            "n_features": self.n_features,
            "trees": [asdict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ForestModel":
        if doc.get("kind") != "random-forest":
            raise SentinelError("not a random-forest model document")
        return cls(ForestConfig(**doc["config"]), int(doc["n_features"]), [Tree(**t) for t in doc["trees"]])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ForestModel":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, "train-slide")
        return cls.from_dict(json.loads(path.read_text()))


def _grow(args):
    X, y, config, t = args
    rng = np.random.default_rng(derive_seed(config.seed, "tree", t))
    idx = rng.integers(0, len(y), size=len(y)) if config.bootstrap else np.arange(len(y))
    return fit_tree(
        X[idx], y[idx], rng,
        max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf,
        max_features=config.features_per_split(X.shape[1]),
    )


def train_forest(features, labels, config: Optional[ForestConfig] = None, workers: int = 1) -> ForestModel:
    """Bagged CART ensemble; each tree draws from its own seed derived from ``config.seed``."""
    config = config or ForestConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("features must be (n, d) with one label per row")
    if len(y) < 2:
        raise SentinelError("forest needs at least two samples")
    if len(np.unique(y)) < 2:
        raise SentinelError("training labels contain a single class")
    trees = ordered_map(_grow, [(X, y, config, t) for t in range(config.n_trees)], workers)
    return ForestModel(config, X.shape[1], trees)


def predict_forest(model: ForestModel, feature_vector) -> float:
    """Fraction of trees voting tumor for one feature vector."""
    v = np.asarray(feature_vector, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("predict_forest takes a single feature vector")
    return float(model.predict_proba(v[None])[0])
