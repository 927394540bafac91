import json

import numpy as np
import pytest

from i2ptriage import synth
from i2ptriage.errors import ConfigError, SchemaError, TrainingError
from i2ptriage.flow_model import dataset_from_arrays
from i2ptriage.pipeline import RunConfig, StageError, gbt_config, load_run_config, train_phase


@pytest.fixture(scope="module")
def data(synth_spec):
    return synth.generate(synth_spec, 3000, seed=21).dataset


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"n_trees": 5})
    with pytest.raises(ConfigError):
        RunConfig(forest={"trees": 5})
    with pytest.raises(ConfigError):
        RunConfig(imbalance="smote")
    with pytest.raises(ConfigError):
        RunConfig(i2p_fraction=2.0)


def test_run_config_resolves_relative_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"dataset": "d/flows.csv", "thresholds": {"phase2": 0.7}}))
    rc = load_run_config(tmp_path / "c.json")
    assert rc.dataset == str((tmp_path / "d" / "flows.csv").resolve())
    assert rc.thresholds == {"phase1": 0.5, "phase2": 0.7}
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")


def test_gbt_config_overrides():
    rc = RunConfig(gbt_lgbm={"max_leaves": 7, "n_rounds": 3})
    cfg = gbt_config(rc, "gbt-lgbm", spw=2.5)
    assert (cfg.tree.max_leaves, cfg.n_rounds, cfg.scale_pos_weight, cfg.learning_rate) == (7, 3, 2.5, 0.05)


def test_train_phase1_weights_mode(data):
    rc = RunConfig(forest={"n_trees": 5})
    res = train_phase(data, 1, "forest", rc)
    s = res.sizes
    assert s["train"] + s["test"] == s["cleaned"]
    assert s["fit"] == s["train"]
    assert res.bundle.positive_class_name == "I2P"
    assert res.train_metrics.accuracy > 0.95
    assert res.importance.shape == (res.bundle.artifacts.n_model_features,)
    # the scaler is fitted on the training rows only
    X = res.bundle.artifacts.transform(res.train_set)
    assert np.allclose(X.mean(axis=0), 0, atol=1e-9)


def test_train_phase2_gbt_with_scale_pos_weight(data):
    res = train_phase(data, 2, "gbt-xgb", RunConfig(gbt_xgb={"n_rounds": 5}))
    tc = res.sizes["train_classes"]
    assert set(tc) == {"Legitimate", "Exfiltration"}
    assert res.sizes["scale_pos_weight"] == pytest.approx(tc["Legitimate"] / tc["Exfiltration"])
    assert res.bundle.model.config.scale_pos_weight == res.sizes["scale_pos_weight"]


def test_train_undersample_mode_balances_fit_set(data):
    res = train_phase(data, 1, "gbt-lgbm", RunConfig(imbalance="undersample", gbt_lgbm={"n_rounds": 3}))
    fc = res.sizes["fit_classes"]
    assert fc["Normal"] == fc["I2P"] == res.sizes["train_classes"]["I2P"]
    assert res.bundle.model.config.scale_pos_weight == 1.0


def test_stage_errors_keep_exit_code():
    ds = dataset_from_arrays(np.arange(20.0)[:, None], [0] * 20)
    with pytest.raises(StageError) as ei:
        train_phase(ds, 1, "forest", RunConfig())
    assert ei.value.exit_code == TrainingError.exit_code
    assert str(ei.value).startswith("[imbalance]")
    with pytest.raises(StageError) as ei:
        train_phase(ds, 1, "forest", RunConfig(critical_features=["nope"]))
    assert ei.value.exit_code == SchemaError.exit_code
    with pytest.raises(ConfigError):
        train_phase(ds, 3, "forest", RunConfig())
