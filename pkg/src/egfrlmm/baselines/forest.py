"""Bootstrap-aggregated regression trees with variance-reduction splits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from egfrlmm.errors import ConfigError, ShapeError, ValidationError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    min_samples_leaf: int = 2
    max_features: str | int | None = "sqrt"
    max_depth: int | None = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if isinstance(self.max_features, str) and self.max_features != "sqrt":
            raise ConfigError("max_features must be 'sqrt', an integer, or null")

    def features_per_split(self, d: int) -> int:
        if self.max_features is None:
            return d
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(d)))
        return max(1, min(int(self.max_features), d))


@dataclass
class Tree:
    # Parallel arrays; leaves have feature == -1.
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def best_split(X: np.ndarray, y: np.ndarray, features, min_leaf: int):
    """Lowest total squared error split as (feature, threshold, sse), or None.

    Ties keep the earliest feature in ``features`` and the lowest threshold.
    """
    n = len(y)
    best = None
    positions = np.arange(1, n)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        n_left = positions
        n_right = n - positions
        s_left, q_left = csum[:-1], csq[:-1]
        s_right, q_right = csum[-1] - s_left, csq[-1] - q_left
        sse = (q_left - s_left**2 / n_left) + (q_right - s_right**2 / n_right)
        valid = (n_left >= min_leaf) & (n_right >= min_leaf) & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        if best is None or sse[i] < best[2]:
            lo, hi = xs[i], xs[i + 1]
            thr = (lo + hi) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (int(f), float(thr), float(sse[i]))
    return best


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    rng: np.random.Generator,
) -> Tree:
    d = X.shape[1]
    k = params.features_per_split(d)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        value[node] = float(ys.mean())
        if (
            len(idx) < 2 * params.min_samples_leaf
            or (params.max_depth is not None and depth >= params.max_depth)
            or np.ptp(ys) == 0
        ):
            continue
        candidates = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
        split = best_split(X[idx], ys, candidates, params.min_samples_leaf)
        parent_sse = float(((ys - ys.mean()) ** 2).sum())
        if split is None or split[2] >= parent_sse:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, lnode, rnode
        # Right pushed first so the left subtree is numbered first.
        stack.append((rnode, idx[~mask], depth + 1))
        stack.append((lnode, idx[mask], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


@dataclass
class RandomForest:
    params: ForestParams
    n_features: int
    trees: list[Tree]
    seed: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        per_tree = np.vstack([t.predict(X) for t in self.trees])
        # Sorting before summing makes the mean independent of tree order.
        return np.sort(per_tree, axis=0).sum(axis=0) / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "random_forest",
            "params": asdict(self.params),
            "n_features": self.n_features,
            "seed": self.seed,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "random_forest":
            raise ValidationError("not a random forest artifact of a supported version")
        return cls(
            params=ForestParams(**d["params"]),
            n_features=d["n_features"],
            trees=[Tree.from_dict(t) for t in d["trees"]],
            seed=d["seed"],
        )


def rf_train(X: np.ndarray, y: np.ndarray, params: ForestParams | None = None, seed: int = 0) -> RandomForest:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X has shape {X.shape} but y has {len(y)} rows")
    if len(y) < 2:
        raise ValidationError(f"random forest needs >= 2 training windows, got {len(y)}")
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, len(y), size=len(y)) if params.bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[idx], y[idx], params, rng))
    return RandomForest(params, X.shape[1], trees, seed)


def rf_predict(model: RandomForest, features: np.ndarray) -> np.ndarray | float:
    out = model.predict(features)
    return float(out[0]) if np.asarray(features).ndim == 1 else out
