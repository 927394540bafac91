"""Exact-split CART trees: weighted-Gini classification and Newton regression.

Both tree kinds share one split scanner and one grower. Splits route
``x[feature] <= threshold`` to the left child; thresholds sit at the midpoint
of adjacent distinct sorted values.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, SchemaError

LEVEL_WISE = "level"
LEAF_WISE = "leaf"

# Gains within TIE_RTOL * scale of the best are treated as ties, so that
# round-off in cumulative sums cannot override the (feature, threshold) order.
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class TreeConfig:
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    max_leaves: Optional[int] = None
    growth: str = LEVEL_WISE
    features_per_split: Union[int, str, None] = None  # None: all, "sqrt": floor(sqrt(F))
    min_gain: float = 0.0

    def __post_init__(self):
        if self.growth not in (LEVEL_WISE, LEAF_WISE):
            raise ConfigError(f"unknown growth policy {self.growth!r}")
        if self.growth == LEVEL_WISE and self.max_depth is None:
            raise ConfigError("level-wise growth needs a finite max_depth")
        if self.growth == LEAF_WISE and self.max_leaves is None:
            raise ConfigError("leaf-wise growth needs a finite max_leaves")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if self.max_leaves is not None and self.max_leaves < 1:
            raise ConfigError("max_leaves must be >= 1")
        if self.min_samples_split < 2:
            raise ConfigError("min_samples_split must be >= 2")
        if self.min_gain < 0:
            raise ConfigError("min_gain must be >= 0")
        fps = self.features_per_split
        if not (fps is None or fps == "sqrt" or (isinstance(fps, int) and fps >= 1)):
            raise ConfigError(f"features_per_split must be None, 'sqrt' or a positive int, got {fps!r}")

    def split_feature_count(self, n_features: int) -> int:
        fps = self.features_per_split
        if fps is None:
            return n_features
        if fps == "sqrt":
            return max(1, math.isqrt(n_features))
        return min(fps, n_features)


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float
    left_stats: tuple
    right_stats: tuple


class WeightedGini:
    """Per-row stats are (w, w*y); node score is the weighted Gini impurity."""

    def __init__(self, y, w):
        y = np.asarray(y, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        self.stats = np.column_stack([w, w * y])

    @staticmethod
    def impurity(wsum, psum):
        return 2.0 * psum * (wsum - psum) / (wsum * wsum)

    def gain(self, left, parent):
        wl, pl = left[..., 0], left[..., 1]
        wp, pp = parent[0], parent[1]
        wr, pr = wp - wl, pp - pl
        children = (2.0 * pl * (wl - pl) / wl + 2.0 * pr * (wr - pr) / wr) / wp
        return self.impurity(wp, pp) - children

    def scale(self, parent):
        return 1.0

    def leaf_value(self, parent):
        return float(parent[1] / parent[0])

    def is_pure(self, parent):
        return parent[1] <= 0.0 or parent[1] >= parent[0]


class NewtonGain:
    """Per-row stats are (g, h); gain is the second-order split improvement."""

    def __init__(self, g, h, lam=1.0):
        self.stats = np.column_stack([np.asarray(g, np.float64), np.asarray(h, np.float64)])
        self.lam = float(lam)

    def _term(self, gs, hs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return gs * gs / (hs + self.lam)

    def gain(self, left, parent):
        gl, hl = left[..., 0], left[..., 1]
        gp, hp = parent[0], parent[1]
        return 0.5 * (self._term(gl, hl) + self._term(gp - gl, hp - hl) - self._term(gp, hp))

    def scale(self, parent):
        t = float(self._term(parent[0], parent[1]))
        return max(1.0, t) if math.isfinite(t) else 1.0

    def leaf_value(self, parent):
        denom = parent[1] + self.lam
        return 0.0 if denom == 0 else float(-parent[0] / denom)

    def is_pure(self, parent):
        return False


def _midpoint(a, b):
    mid = (a + b) / 2.0
    return mid if a <= mid < b else a


def best_split(X, rows, features, objective, min_gain=0.0) -> Optional[SplitCandidate]:
    """Exhaustive scan of every boundary between distinct values.

    Returns the max-gain split, ties going to the lowest feature index and then
    the lowest threshold, or None when no split beats ``min_gain``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    features = np.sort(np.asarray(features, dtype=np.int64))
    if rows.size < 2 or features.size == 0:
        return None
    xs = X[np.ix_(rows, features)]
    order = np.argsort(xs, axis=0, kind="stable")
    xs = np.take_along_axis(xs, order, axis=0)
    node_stats = objective.stats[rows]
    parent = node_stats.sum(axis=0)
    left = np.cumsum(node_stats[order], axis=0)[:-1]  # (n-1, k, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        gains = objective.gain(left, parent)
    gains = np.where((xs[:-1] < xs[1:]) & np.isfinite(gains), gains, -np.inf)
    top = gains.max()
    tol = TIE_RTOL * objective.scale(parent)
    if not top > min_gain + tol:
        return None
    tied = gains >= top - tol
    j = int(np.argmax(tied.any(axis=0)))
    i = int(np.argmax(tied[:, j]))
    lstats = left[i, j]
    return SplitCandidate(
        feature=int(features[j]),
        threshold=float(_midpoint(xs[i, j], xs[i + 1, j])),
        gain=float(gains[i, j]),
        left_stats=tuple(float(v) for v in lstats),
        right_stats=tuple(float(v) for v in parent - lstats),
    )


@dataclass(frozen=True, eq=False)
class DecisionTreeModel:
    """Flat node arrays. A node with ``feature == -1`` is a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    sum_weight: np.ndarray
    gain: np.ndarray
    n_features: int

    def __post_init__(self):
        for name, dtype in (("feature", np.int64), ("left", np.int64), ("right", np.int64),
                            ("n_samples", np.int64), ("threshold", np.float64),
                            ("value", np.float64), ("sum_weight", np.float64), ("gain", np.float64)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self):
        return self.feature.size

    @property
    def is_leaf(self):
        return self.feature < 0

    @property
    def n_leaves(self):
        return int(self.is_leaf.sum())

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise SchemaError(f"tree expects {self.n_features} features, got shape {X.shape}")
        return X

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row."""
        X = self._check(X)
        node = np.zeros(X.shape[0], np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def equals(self, other) -> bool:
        return self.n_features == other.n_features and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "threshold", "left", "right", "value", "n_samples", "sum_weight", "gain")
        )

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "kind": "".join("L" if f < 0 else "I" for f in self.feature),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "sum_weight": self.sum_weight.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "DecisionTreeModel":
        model = cls(
            feature=d["feature"], threshold=d["threshold"], left=d["left"], right=d["right"],
            value=d["value"], n_samples=d["n_samples"], sum_weight=d["sum_weight"],
            gain=d["gain"], n_features=int(d["n_features"]),
        )
        if "kind" in d and d["kind"] != "".join("L" if f < 0 else "I" for f in model.feature):
            raise SchemaError("tree node kind tags disagree with feature indices")
        return model


def predict_tree(model: DecisionTreeModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise SchemaError("predict_tree takes a single feature vector")
    return float(model.predict(x[None, :])[0])


class _Grower:
    def __init__(self, X, objective, cfg: TreeConfig, rng):
        self.X = X
        self.obj = objective
        self.cfg = cfg
        self.rng = rng
        self.n_features = X.shape[1]
        self.k = cfg.split_feature_count(self.n_features)
        self.cols = {k: [] for k in ("feature", "threshold", "left", "right", "value",
                                     "n_samples", "sum_weight", "gain")}
        self.rows = {}
        self.depth = []
        self.totals = []

    def new_node(self, rows, depth) -> int:
        nid = len(self.depth)
        totals = self.obj.stats[rows].sum(axis=0)
        c = self.cols
        c["feature"].append(-1)
        c["threshold"].append(0.0)
        c["left"].append(-1)
        c["right"].append(-1)
        c["value"].append(self.obj.leaf_value(totals))
        c["n_samples"].append(int(rows.size))
        c["sum_weight"].append(float(totals[1] if isinstance(self.obj, NewtonGain) else totals[0]))
        c["gain"].append(0.0)
        self.rows[nid] = rows
        self.depth.append(depth)
        self.totals.append(totals)
        return nid

    def candidate(self, nid) -> Optional[SplitCandidate]:
        rows = self.rows[nid]
        cfg = self.cfg
        if cfg.max_depth is not None and self.depth[nid] >= cfg.max_depth:
            return None
        if rows.size < cfg.min_samples_split or self.obj.is_pure(self.totals[nid]):
            return None
        if self.k < self.n_features:
            feats = np.sort(self.rng.choice(self.n_features, size=self.k, replace=False))
        else:
            feats = np.arange(self.n_features)
        return best_split(self.X, rows, feats, self.obj, cfg.min_gain)

    def split(self, nid, cand: SplitCandidate):
        rows = self.rows.pop(nid)
        go_left = self.X[rows, cand.feature] <= cand.threshold
        lid = self.new_node(rows[go_left], self.depth[nid] + 1)
        rid = self.new_node(rows[~go_left], self.depth[nid] + 1)
        c = self.cols
        c["feature"][nid] = cand.feature
        c["threshold"][nid] = cand.threshold
        c["left"][nid] = lid
        c["right"][nid] = rid
        c["gain"][nid] = cand.gain
        return lid, rid

    def grow_level_wise(self):
        stack = [self.new_node(np.arange(self.X.shape[0]), 0)]
        while stack:
            nid = stack.pop()
            cand = self.candidate(nid)
            if cand is None:
                self.rows.pop(nid)
                continue
            lid, rid = self.split(nid, cand)
            stack.extend((rid, lid))

    def grow_leaf_wise(self):
        root = self.new_node(np.arange(self.X.shape[0]), 0)
        heap = []

        def push(nid):
            cand = self.candidate(nid)
            if cand is not None:
                heapq.heappush(heap, (-cand.gain, nid, cand))

        push(root)
        leaves = 1
        while heap and leaves < self.cfg.max_leaves:
            _, nid, cand = heapq.heappop(heap)
            lid, rid = self.split(nid, cand)
            leaves += 1
            push(lid)
            push(rid)

    def build(self) -> DecisionTreeModel:
        if self.cfg.growth == LEAF_WISE:
            self.grow_leaf_wise()
        else:
            self.grow_level_wise()
        self.rows.clear()
        return DecisionTreeModel(n_features=self.n_features, **self.cols)


def _as_matrix(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise SchemaError("training matrix must be 2-D with at least one row")
    return X


def fit_classification_tree(X, y, w=None, cfg: TreeConfig = TreeConfig(max_depth=20), rng=None):
    """Weighted-Gini tree; leaves hold the weighted class-1 frequency."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(X.shape[0]) if w is None else np.asarray(w, dtype=np.float64)
    if y.shape[0] != X.shape[0] or w.shape[0] != X.shape[0]:
        raise SchemaError("labels/weights do not align with rows")
    if np.any(w <= 0):
        raise ConfigError("sample weights must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _Grower(X, WeightedGini(y, w), cfg, rng).build()


def fit_regression_tree(X, g, h, cfg: TreeConfig, lam=1.0, rng=None):
    """Second-order regression tree; leaves hold -G / (H + lambda)."""
    X = _as_matrix(X)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if g.shape[0] != X.shape[0] or h.shape[0] != X.shape[0]:
        raise SchemaError("gradients/hessians do not align with rows")
    if np.any(h < 0):
        raise ConfigError("hessians must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _Grower(X, NewtonGain(g, h, lam), cfg, rng).build()
