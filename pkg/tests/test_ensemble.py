import json

import numpy as np
import pytest
from scipy.special import expit

from i2ptriage.ensemble import (
    ForestConfig,
    GbtConfig,
    GbtModel,
    decision_function_gbt,
    feature_importance,
    fit_forest,
    fit_gbt,
    mix_seed,
    model_from_dict,
    model_to_dict,
    predict_proba,
    predict_proba_forest,
    predict_vote_forest,
    resolve_jobs,
    weighted_logloss,
    with_seed,
)
from i2ptriage.errors import ConfigError, SchemaError, TrainingError
from i2ptriage.tree import LEAF_WISE, TreeConfig, fit_classification_tree


def toy(n=400, seed=0, f=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    y = (X[:, 0] - 0.5 * X[:, 1] + rng.normal(scale=0.5, size=n) > 0.8).astype(int)
    return X, y


SMALL_FOREST = ForestConfig(n_trees=8, tree=TreeConfig(max_depth=6, min_samples_split=4, features_per_split="sqrt"))


def test_splitmix64_reference_value():
    # first output of a splitmix64 stream started at state 0
    from i2ptriage.ensemble import _splitmix64
    assert _splitmix64(0) == 0xE220A8397B1DCDAF
    assert mix_seed(42, 0) != mix_seed(42, 1)
    assert mix_seed(42, 3) == mix_seed(42, 3)


def test_resolve_jobs(monkeypatch):
    monkeypatch.delenv("NO_PARALLEL", raising=False)
    assert resolve_jobs(4, 2) == 2
    assert resolve_jobs(0, 5) == 1
    monkeypatch.setenv("NO_PARALLEL", "1")
    assert resolve_jobs(8, 100) == 1


# ---------------------------------------------------------------- forest

def test_single_unbagged_tree_forest_equals_weighted_tree():
    X, y = toy()
    tcfg = TreeConfig(max_depth=5)
    forest = fit_forest(X, y, ForestConfig(n_trees=1, tree=tcfg, bootstrap=False), n_jobs=1)
    n, npos = len(y), y.sum()
    w = np.where(y == 1, n / (2 * npos), n / (2 * (n - npos)))
    ref = fit_classification_tree(X, y, w, tcfg)
    assert forest.trees[0].equals(ref)
    assert np.array_equal(predict_proba_forest(forest, X), ref.predict(X))


def test_unweighted_mode_uses_unit_weights():
    X, y = toy()
    tcfg = TreeConfig(max_depth=3)
    forest = fit_forest(X, y, ForestConfig(n_trees=1, tree=tcfg, bootstrap=False, class_weight_mode="none"))
    assert forest.trees[0].equals(fit_classification_tree(X, y, None, tcfg))


def test_forest_parallel_equals_serial(monkeypatch):
    X, y = toy()
    a = fit_forest(X, y, SMALL_FOREST, n_jobs=4)
    monkeypatch.setenv("NO_PARALLEL", "1")
    b = fit_forest(X, y, SMALL_FOREST, n_jobs=4)
    assert all(t.equals(u) for t, u in zip(a.trees, b.trees))
    c = fit_forest(X, y, with_seed(SMALL_FOREST, 7), n_jobs=1)
    assert not all(t.equals(u) for t, u in zip(a.trees, c.trees))


def test_forest_scores_in_unit_interval_and_vote():
    X, y = toy()
    m = fit_forest(X, y, SMALL_FOREST)
    p = predict_proba_forest(m, X)
    v = predict_vote_forest(m, X)
    assert np.all((p >= 0) & (p <= 1))
    assert np.all(np.isin(v * len(m.trees), np.arange(len(m.trees) + 1)))
    assert np.mean((p > 0.5) == y) > 0.9


def test_single_row_matches_batch_bit_exactly():
    X, y = toy()
    for m in (fit_forest(X, y, SMALL_FOREST), fit_gbt(X, y, GbtConfig.xgb_like(n_rounds=10))):
        batch = predict_proba(m, X[:20])
        for i in range(20):
            assert predict_proba(m, X[i]) == batch[i]


def test_training_input_validation():
    X, y = toy()
    with pytest.raises(TrainingError):
        fit_forest(X, np.zeros(len(y)))
    with pytest.raises(TrainingError):
        fit_gbt(X, np.full(len(y), 2))
    with pytest.raises(SchemaError):
        fit_forest(X[:, 0], y)
    m = fit_forest(X, y, SMALL_FOREST)
    with pytest.raises(SchemaError):
        predict_proba(m, X[:, :2])
    with pytest.raises(ConfigError):
        ForestConfig(n_trees=0)
    with pytest.raises(ConfigError):
        GbtConfig(learning_rate=0)


# ---------------------------------------------------------------- boosting

def test_zero_rounds_predicts_weighted_prior():
    X, y = toy()
    m = fit_gbt(X, y, GbtConfig.xgb_like(n_rounds=0, scale_pos_weight=3.0))
    pos, neg = y.sum(), len(y) - y.sum()
    assert m.base_score == pytest.approx(np.log(3.0 * pos / neg))
    assert predict_proba(m, X[:1])[0] == pytest.approx(3.0 * pos / (3.0 * pos + neg))


def test_one_stump_round_by_hand():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 1, 1])
    lam, eta = 1.0, 0.3
    m = fit_gbt(X, y, GbtConfig(n_rounds=1, learning_rate=eta, tree=TreeConfig(max_depth=1), lam=lam))
    assert m.base_score == 0.0
    # p = 0.5 everywhere: g = p - y = (+.5, +.5, -.5, -.5), h = .25 each
    left = -(0.5 + 0.5) / (0.5 + lam)
    right = -(-1.0) / (0.5 + lam)
    expected = eta * np.array([left, left, right, right])
    assert np.allclose(decision_function_gbt(m, X), expected, rtol=0, atol=1e-15)
    assert m.trees[0].threshold[0] == 1.5


def test_gbt_loss_history_and_monotonicity():
    X, y = toy(600, seed=3)
    for cfg in (GbtConfig.xgb_like(n_rounds=30), GbtConfig.lgbm_like(n_rounds=30)):
        m = fit_gbt(X, y, cfg)
        assert len(m.train_loss) == 31
        margin = decision_function_gbt(m, X)
        w = np.ones(len(y))
        assert m.train_loss[-1] == pytest.approx(weighted_logloss(y, margin, w), rel=1e-12)
        assert all(b <= a + 1e-12 for a, b in zip(m.train_loss, m.train_loss[1:]))


def test_gbt_presets():
    x = GbtConfig.xgb_like()
    assert (x.learning_rate, x.tree.max_depth) == (0.1, 6)
    lg = GbtConfig.lgbm_like()
    assert (lg.learning_rate, lg.tree.max_leaves, lg.tree.growth) == (0.05, 31, LEAF_WISE)
    assert GbtConfig.lgbm_like(n_rounds=5).n_rounds == 5


def test_weighted_logloss_definition():
    y = np.array([1.0, 0.0])
    m = np.array([2.0, -1.0])
    w = np.array([2.0, 1.0])
    p = expit(m)
    ref = -(2 * np.log(p[0]) + np.log(1 - p[1])) / 3
    assert weighted_logloss(y, m, w) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------- importance and serialization

def test_importance_normalized_and_ranks_informative_first():
    X, y = toy(800, seed=5)
    for m in (fit_forest(X, y, SMALL_FOREST), fit_gbt(X, y, GbtConfig.xgb_like(n_rounds=20))):
        imp = feature_importance(m)
        assert imp.sum() == pytest.approx(1.0)
        assert np.all(imp >= 0)
        assert int(np.argmax(imp)) == 0


def test_importance_without_splits_is_zero():
    X, y = toy()
    m = fit_gbt(X, y, GbtConfig(n_rounds=2, tree=TreeConfig(max_depth=0)))
    assert np.all(feature_importance(m) == 0)


def test_model_dict_round_trip_is_bit_exact():
    X, y = toy()
    for m in (fit_forest(X, y, SMALL_FOREST), fit_gbt(X, y, GbtConfig.lgbm_like(n_rounds=15))):
        d = json.loads(json.dumps(model_to_dict(m)))
        back = model_from_dict(d)
        assert type(back) is type(m)
        assert np.array_equal(predict_proba(back, X), predict_proba(m, X))
        if isinstance(m, GbtModel):
            assert back.train_loss == m.train_loss
    with pytest.raises(SchemaError):
        model_from_dict({"kind": "svm", "trees": []})
