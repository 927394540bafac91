"""Run configuration and the end-to-end training flow for one cascade phase."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .cascade import PhaseBundle, build_phase2_dataset
from .ensemble import (
    ForestConfig,
    GbtConfig,
    feature_importance,
    fit_forest,
    fit_gbt,
    predict_proba,
)
from .errors import ConfigError, IOFailure, TriageError
from .flow_model import ColumnConfig, Dataset, load_column_config
from .metrics import MetricsReport, evaluate_scores
from .preprocess import (
    CleaningRules,
    PreprocessArtifacts,
    SplitSpec,
    clean,
    fit_scaler,
    prune_constant,
    prune_correlated,
    scale_pos_weight,
    stratified_split,
    undersample_majority,
)
from .tree import LEAF_WISE, LEVEL_WISE, TreeConfig

MODEL_KINDS = ("forest", "gbt-xgb", "gbt-lgbm")

_FOREST_KEYS = {"n_trees", "max_depth", "min_samples_split", "features_per_split", "bootstrap"}
_XGB_KEYS = {"n_rounds", "learning_rate", "max_depth", "lambda"}
_LGBM_KEYS = {"n_rounds", "learning_rate", "max_leaves", "lambda"}
_CLEANING_KEYS = {"duration", "packet_counts", "flags"}
_THRESHOLD_KEYS = {"phase1", "phase2"}


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    columns: Optional[str] = None
    seed: int = 42
    test_fraction: float = 0.2
    imbalance: str = "weights"
    correlation_threshold: float = 0.95
    critical_features: Optional[list] = None
    cleaning: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    gbt_xgb: dict = field(default_factory=dict)
    gbt_lgbm: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=lambda: {"phase1": 0.5, "phase2": 0.5})
    n_jobs: Optional[int] = None
    phase1_bundle: Optional[str] = None
    daily_flows: int = 1_000_000
    i2p_fraction: float = 0.012

    def __post_init__(self):
        if self.imbalance not in ("weights", "undersample"):
            raise ConfigError(f"imbalance must be 'weights' or 'undersample', got {self.imbalance!r}")
        for name, allowed in (("forest", _FOREST_KEYS), ("gbt_xgb", _XGB_KEYS),
                              ("gbt_lgbm", _LGBM_KEYS), ("cleaning", _CLEANING_KEYS),
                              ("thresholds", _THRESHOLD_KEYS)):
            extra = set(getattr(self, name)) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
        self.thresholds = {"phase1": 0.5, "phase2": 0.5, **self.thresholds}
        if not 0 <= self.i2p_fraction <= 1:
            raise ConfigError("i2p_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        rc = cls(**d)
        if base_dir is not None:
            for key in ("dataset", "columns", "phase1_bundle"):
                v = getattr(rc, key)
                if v is not None and not Path(v).is_absolute():
                    setattr(rc, key, str((Path(base_dir) / v).resolve()))
        return rc

    def to_dict(self) -> dict:
        return asdict(self)

    def column_config(self) -> ColumnConfig:
        return load_column_config(self.columns) if self.columns else ColumnConfig()

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.test_fraction, self.seed)


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw, base_dir=Path(path).parent)


def forest_config(rc: RunConfig, class_weight_mode="balanced") -> ForestConfig:
    o = rc.forest
    tree = TreeConfig(
        max_depth=o.get("max_depth", 20), min_samples_split=o.get("min_samples_split", 10),
        growth=LEVEL_WISE, features_per_split=o.get("features_per_split", "sqrt"),
    )
    return ForestConfig(n_trees=o.get("n_trees", 100), tree=tree, class_weight_mode=class_weight_mode,
                        bootstrap=o.get("bootstrap", True), seed=rc.seed)


def gbt_config(rc: RunConfig, kind: str, spw: float = 1.0) -> GbtConfig:
    if kind == "gbt-xgb":
        o = rc.gbt_xgb
        return GbtConfig.xgb_like(
            n_rounds=o.get("n_rounds", 100), learning_rate=o.get("learning_rate", 0.1),
            tree=TreeConfig(max_depth=o.get("max_depth", 6), growth=LEVEL_WISE),
            lam=o.get("lambda", 1.0), scale_pos_weight=spw, seed=rc.seed,
        )
    o = rc.gbt_lgbm
    return GbtConfig.lgbm_like(
        n_rounds=o.get("n_rounds", 100), learning_rate=o.get("learning_rate", 0.05),
        tree=TreeConfig(max_leaves=o.get("max_leaves", 31), growth=LEAF_WISE),
        lam=o.get("lambda", 1.0), scale_pos_weight=spw, seed=rc.seed,
    )


class StageError(TriageError):
    """Wraps a pipeline failure with the stage it happened in; keeps the cause's exit code."""

    def __init__(self, stage: str, cause: TriageError):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.exit_code = cause.exit_code


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if isinstance(exc, TriageError) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


@dataclass(frozen=True, eq=False)
class TrainResult:
    bundle: PhaseBundle
    train_metrics: MetricsReport
    train_set: Dataset
    test_set: Dataset
    importance: np.ndarray
    sizes: dict
    seconds: float


def _class_counts(ds: Dataset) -> dict:
    return {ds.target_names[k]: int(np.sum(ds.y == k)) for k in (0, 1)}


def train_phase(ds: Dataset, phase: int, model_kind: str, rc: RunConfig,
                columns_text: Optional[str] = None) -> TrainResult:
    """clean -> (phase 2 relabel) -> prune -> split -> imbalance -> scale -> fit."""
    if phase not in (1, 2):
        raise ConfigError("phase must be 1 or 2")
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}")
    with _Stage("clean"):
        c = rc.cleaning
        rules = CleaningRules.for_schema(ds.schema, c.get("duration"), c.get("packet_counts"), c.get("flags"))
        crit = None
        if rc.critical_features is not None:
            crit = [ds.schema.index(n) for n in rc.critical_features]
        cleaned, report = clean(ds, crit, rules)
    if phase == 2:
        with _Stage("build_phase2_dataset"):
            cleaned = build_phase2_dataset(cleaned)
    with _Stage("prune"):
        mask = prune_correlated(cleaned, prune_constant(cleaned), rc.correlation_threshold)
    with _Stage("split"):
        train, test = stratified_split(cleaned, rc.split_spec())
    with _Stage("imbalance"):
        if rc.imbalance == "undersample":
            fit_set = undersample_majority(train, rc.seed)
            spw, cw_mode = 1.0, "none"
        else:
            fit_set = train
            spw, cw_mode = scale_pos_weight(train), "balanced"
    with _Stage("scale"):
        scaler = fit_scaler(fit_set, mask)
        art = PreprocessArtifacts(ds.schema.feature_names, mask, scaler, report, rc.split_spec())
        X = art.transform(fit_set)
    with _Stage("fit"):
        t0 = time.perf_counter()
        if model_kind == "forest":
            model = fit_forest(X, fit_set.y, forest_config(rc, cw_mode), n_jobs=rc.n_jobs)
        else:
            model = fit_gbt(X, fit_set.y, gbt_config(rc, model_kind, spw))
        seconds = time.perf_counter() - t0
    positive = "I2P" if phase == 1 else "Exfiltration"
    bundle = PhaseBundle(model, art, rc.thresholds[f"phase{phase}"], positive, phase, columns_text)
    scores = predict_proba(model, X)
    train_metrics, _ = evaluate_scores(fit_set.y, scores, bundle.threshold)
    sizes = {
        "cleaned": len(cleaned), "train": len(train), "test": len(test), "fit": len(fit_set),
        "train_classes": _class_counts(train), "test_classes": _class_counts(test),
        "fit_classes": _class_counts(fit_set),
        "retained_features": len(mask.retained), "removed_constant": len(mask.removed_constant),
        "removed_correlated": len(mask.removed_correlated),
        "scale_pos_weight": spw if model_kind != "forest" else None,
        "cleaning_report": asdict(report),
    }
    return TrainResult(bundle, train_metrics, fit_set, test, feature_importance(model), sizes, seconds)
