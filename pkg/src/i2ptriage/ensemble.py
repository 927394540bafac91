"""Random forest and gradient-boosted tree trainers built on :mod:`i2ptriage.tree`."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigError, SchemaError, TrainingError
from .tree import (
    LEAF_WISE,
    LEVEL_WISE,
    DecisionTreeModel,
    TreeConfig,
    fit_classification_tree,
    fit_regression_tree,
)

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(seed: int, index: int) -> int:
    """Per-tree/per-chunk seed: splitmix64(splitmix64(seed) xor index)."""
    return _splitmix64(_splitmix64(seed & _MASK64) ^ (index & _MASK64))


def resolve_jobs(n_jobs: Optional[int], n_tasks: int) -> int:
    if os.environ.get("NO_PARALLEL") == "1":
        return 1
    if n_jobs is None:
        n_jobs = os.cpu_count() or 1
    return max(1, min(int(n_jobs), n_tasks))


def _tree_config_from_dict(d) -> TreeConfig:
    return TreeConfig(**d)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    tree: TreeConfig = field(default_factory=lambda: TreeConfig(
        max_depth=20, min_samples_split=10, growth=LEVEL_WISE, features_per_split="sqrt"))
    class_weight_mode: str = "balanced"
    bootstrap: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.class_weight_mode not in ("balanced", "none"):
            raise ConfigError(f"class_weight_mode must be 'balanced' or 'none', got {self.class_weight_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "tree" in d:
            d["tree"] = _tree_config_from_dict(d["tree"])
        return cls(**d)


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    tree: TreeConfig = field(default_factory=lambda: TreeConfig(max_depth=6))
    lam: float = 1.0
    scale_pos_weight: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ConfigError("n_rounds must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.scale_pos_weight > 0:
            raise ConfigError("scale_pos_weight must be > 0")

    @classmethod
    def xgb_like(cls, **overrides):
        return cls(**{"learning_rate": 0.1, "tree": TreeConfig(max_depth=6, growth=LEVEL_WISE), **overrides})

    @classmethod
    def lgbm_like(cls, **overrides):
        return cls(**{"learning_rate": 0.05, "tree": TreeConfig(max_leaves=31, growth=LEAF_WISE), **overrides})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "tree" in d:
            d["tree"] = _tree_config_from_dict(d["tree"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    config: ForestConfig
    n_features: int
    kind = "forest"


@dataclass(frozen=True, eq=False)
class GbtModel:
    trees: tuple
    base_score: float
    learning_rate: float
    config: GbtConfig
    n_features: int
    train_loss: tuple = ()
    kind = "gbt"


def _check_training(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SchemaError("X must be 2-D and aligned with y")
    if X.shape[0] < 2:
        raise TrainingError("need at least two training rows")
    if np.unique(y).size < 2:
        raise TrainingError("training labels contain a single class")
    if not np.all((y == 0) | (y == 1)):
        raise TrainingError("labels must be binary 0/1")
    return X, y.astype(np.float64)


def fit_forest(X, y, cfg: ForestConfig = ForestConfig(), n_jobs: Optional[int] = None) -> ForestModel:
    """Bagged Gini trees. Tree ``t`` draws everything from ``mix_seed(cfg.seed, t)``,
    so the result does not depend on ``n_jobs``."""
    X, y = _check_training(X, y)
    n = X.shape[0]
    if cfg.class_weight_mode == "balanced":
        n_pos = y.sum()
        cw = np.array([n / (2.0 * (n - n_pos)), n / (2.0 * n_pos)])
        weights = cw[y.astype(np.int64)]
    else:
        weights = np.ones(n)

    def one_tree(t):
        rng = np.random.default_rng(mix_seed(cfg.seed, t))
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        return fit_classification_tree(X[idx], y[idx], weights[idx], cfg.tree, rng)

    jobs = resolve_jobs(n_jobs, cfg.n_trees)
    if jobs == 1:
        trees = [one_tree(t) for t in range(cfg.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one_tree, range(cfg.n_trees)))
    return ForestModel(tuple(trees), cfg, X.shape[1])


def _rows(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != model.n_features:
        raise SchemaError(f"model expects {model.n_features} features, got shape {X.shape}")
    return X2, single


def _sum_trees(trees, X):
    # Fixed left-to-right accumulation keeps batch and single-row scores bit-identical.
    acc = np.zeros(X.shape[0])
    for tree in trees:
        acc += tree.predict(X)
    return acc


def predict_proba_forest(model: ForestModel, X) -> Union[float, np.ndarray]:
    """Soft vote: mean of per-tree leaf class-1 frequencies."""
    X2, single = _rows(model, X)
    p = _sum_trees(model.trees, X2) / len(model.trees)
    return float(p[0]) if single else p


def predict_vote_forest(model: ForestModel, X) -> Union[float, np.ndarray]:
    """Hard vote: share of trees whose leaf predicts class 1."""
    X2, single = _rows(model, X)
    votes = np.zeros(X2.shape[0])
    for tree in model.trees:
        votes += tree.predict(X2) > 0.5
    v = votes / len(model.trees)
    return float(v[0]) if single else v


def weighted_logloss(y, margin, w) -> float:
    return float(np.sum(w * (np.logaddexp(0.0, margin) - y * margin)) / np.sum(w))


def fit_gbt(X, y, cfg: GbtConfig = GbtConfig.xgb_like()) -> GbtModel:
    """Binary logistic boosting with Newton leaves and weighted log-odds start."""
    X, y = _check_training(X, y)
    w = np.where(y == 1, cfg.scale_pos_weight, 1.0)
    base = float(np.log(np.sum(w * y) / np.sum(w * (1.0 - y))))
    acc = np.zeros(X.shape[0])
    margin = base + cfg.learning_rate * acc
    losses = [weighted_logloss(y, margin, w)]
    trees = []
    for t in range(cfg.n_rounds):
        p = expit(margin)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        rng = np.random.default_rng(mix_seed(cfg.seed, t))
        tree = fit_regression_tree(X, g, h, cfg.tree, cfg.lam, rng)
        trees.append(tree)
        acc += tree.predict(X)
        margin = base + cfg.learning_rate * acc
        losses.append(weighted_logloss(y, margin, w))
    return GbtModel(tuple(trees), base, cfg.learning_rate, cfg, X.shape[1], tuple(losses))


def decision_function_gbt(model: GbtModel, X):
    X2, single = _rows(model, X)
    m = model.base_score + model.learning_rate * _sum_trees(model.trees, X2)
    return float(m[0]) if single else m


def predict_proba_gbt(model: GbtModel, X):
    m = decision_function_gbt(model, X)
    return float(expit(m)) if isinstance(m, float) else expit(m)


def predict_proba(model, X):
    if isinstance(model, ForestModel):
        return predict_proba_forest(model, X)
    if isinstance(model, GbtModel):
        return predict_proba_gbt(model, X)
    raise TypeError(f"not an ensemble model: {type(model).__name__}")


def feature_importance(model) -> np.ndarray:
    """Gain-based importance, normalized to sum to 1 (all zeros if no tree splits).

    Forest: per tree, split gain times the node's share of the root weight,
    averaged over trees. Boosted: raw Newton gains summed over trees.
    """
    scores = np.zeros(model.n_features)
    for tree in model.trees:
        internal = np.flatnonzero(tree.feature >= 0)
        if internal.size == 0:
            continue
        contrib = tree.gain[internal]
        if isinstance(model, ForestModel):
            contrib = contrib * tree.sum_weight[internal] / tree.sum_weight[0]
        np.add.at(scores, tree.feature[internal], contrib)
    if isinstance(model, ForestModel):
        scores /= len(model.trees)
    total = scores.sum()
    return scores / total if total > 0 else scores


def model_to_dict(model) -> dict:
    d = {"kind": model.kind, "n_features": model.n_features,
         "config": model.config.to_dict(), "trees": [t.to_dict() for t in model.trees]}
    if isinstance(model, GbtModel):
        d["base_score"] = model.base_score
        d["learning_rate"] = model.learning_rate
        d["train_loss"] = list(model.train_loss)
    return d


def model_from_dict(d: dict):
    trees = tuple(DecisionTreeModel.from_dict(t) for t in d["trees"])
    if d["kind"] == "forest":
        return ForestModel(trees, ForestConfig.from_dict(d["config"]), int(d["n_features"]))
    if d["kind"] == "gbt":
        return GbtModel(trees, float(d["base_score"]), float(d["learning_rate"]),
                        GbtConfig.from_dict(d["config"]), int(d["n_features"]),
                        tuple(d.get("train_loss", ())))
    raise SchemaError(f"unknown model kind {d['kind']!r}")


def with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)
