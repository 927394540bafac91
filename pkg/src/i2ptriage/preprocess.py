"""Cleaning, feature pruning, standardization, splitting and imbalance handling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, IOFailure, SchemaError, TrainingError
from .flow_model import Dataset, FeatureSchema

ARTIFACT_VERSION = 1

# Population standard deviation; set to 1 for the sample estimator.
STD_DDOF = 0

DURATION_NAMES = ("Flow Duration", "flow_duration", "Flow_Duration")
PACKET_COUNT_NAMES = (
    ("Total Fwd Packets", "Total Backward Packets"),
    ("Total Fwd Packet", "Total Bwd packets"),
    ("Tot Fwd Pkts", "Tot Bwd Pkts"),
)


@dataclass(frozen=True)
class CleaningRules:
    """Which features the validity rules look at. ``None`` or empty disables a rule."""

    duration_feature: Optional[int] = None
    packet_count_features: tuple = ()
    flag_features: tuple = ()

    @classmethod
    def for_schema(cls, schema: FeatureSchema, duration=None, packet_counts=None, flags=None):
        """Resolve rules by feature name, auto-detecting CICFlowMeter names when not given."""
        names = schema.feature_names
        if duration is None:
            duration = next((n for n in DURATION_NAMES if n in names), None)
        if packet_counts is None:
            packet_counts = next((p for p in PACKET_COUNT_NAMES if all(n in names for n in p)), ())
        if flags is None:
            flags = tuple(n for n in names if "flag" in n.lower()) if packet_counts else ()
        return cls(
            duration_feature=None if duration is None else schema.index(duration),
            packet_count_features=tuple(schema.index(n) for n in packet_counts),
            flag_features=tuple(schema.index(n) for n in flags),
        )


@dataclass(frozen=True)
class CleaningReport:
    dropped_missing: int
    dropped_negative_duration: int
    dropped_invalid_flags: int
    retained: int

    @property
    def input_rows(self):
        return (self.retained + self.dropped_missing
                + self.dropped_negative_duration + self.dropped_invalid_flags)


def clean(ds: Dataset, critical_features=None, rules: Optional[CleaningRules] = None):
    """Drop rows failing, in order: missing critical value, negative duration, impossible flags.

    ``critical_features=None`` treats every feature as critical. Each dropped
    row is charged to the first rule it fails.
    """
    rules = rules or CleaningRules()
    n, f = ds.values.shape
    crit = np.arange(f) if critical_features is None else np.asarray(sorted(critical_features), int)
    if crit.size and (crit.min() < 0 or crit.max() >= f):
        raise SchemaError("critical feature index outside schema")
    if rules.flag_features and not rules.packet_count_features:
        raise SchemaError("flag rule enabled but no packet-count feature in schema")
    for idx in (rules.duration_feature, *rules.packet_count_features, *rules.flag_features):
        if idx is not None and not 0 <= idx < f:
            raise SchemaError(f"rule feature index {idx} outside schema")

    alive = np.ones(n, bool)
    bad_missing = ds.missing[:, crit].any(axis=1) if crit.size else np.zeros(n, bool)
    alive &= ~bad_missing
    dropped_missing = int(bad_missing.sum())

    dropped_duration = 0
    if rules.duration_feature is not None:
        bad = alive & (ds.values[:, rules.duration_feature] < 0)
        dropped_duration = int(bad.sum())
        alive &= ~bad

    dropped_flags = 0
    if rules.flag_features:
        total_pkts = ds.values[:, list(rules.packet_count_features)].sum(axis=1)
        flags = ds.values[:, list(rules.flag_features)]
        with np.errstate(invalid="ignore"):
            impossible = (flags < 0) | (flags > total_pkts[:, None])
        bad = alive & impossible.any(axis=1)
        dropped_flags = int(bad.sum())
        alive &= ~bad

    kept = np.flatnonzero(alive)
    report = CleaningReport(dropped_missing, dropped_duration, dropped_flags, int(kept.size))
    return ds.subset(kept), report


@dataclass(frozen=True)
class FeatureMask:
    n_features: int
    retained: tuple
    removed_constant: tuple = ()
    removed_correlated: tuple = ()  # (removed_index, kept_index, correlation)

    def __post_init__(self):
        removed = set(self.removed_constant) | {r for r, _, _ in self.removed_correlated}
        if set(self.retained) & removed or len(self.retained) + len(removed) != self.n_features:
            raise SchemaError("feature mask does not partition the feature space")

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.retained, dtype=np.int64)


def prune_constant(ds: Dataset) -> FeatureMask:
    if len(ds) == 0:
        raise TrainingError("cannot prune features of an empty dataset")
    constant = []
    for j in range(ds.n_features):
        col = ds.values[~ds.missing[:, j], j]
        if col.size == 0 or np.all(col == col[0]):
            constant.append(j)
    cset = set(constant)
    retained = tuple(j for j in range(ds.n_features) if j not in cset)
    return FeatureMask(ds.n_features, retained, tuple(constant))


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return np.nan if denom == 0 else float(np.dot(a, b) / denom)


def _correlation_matrix(values, missing, cols):
    sub = values[:, cols]
    if not missing[:, cols].any():
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.atleast_2d(np.corrcoef(sub, rowvar=False))
    k = len(cols)
    out = np.eye(k)
    present = ~missing[:, cols]
    for a in range(k):
        for b in range(a + 1, k):
            both = present[:, a] & present[:, b]
            out[a, b] = out[b, a] = _pearson(sub[both, a], sub[both, b])
    return out


def prune_correlated(ds: Dataset, mask: FeatureMask, threshold: float = 0.95) -> FeatureMask:
    """Greedy keep-first pruning in schema order of pairs with |r| > threshold."""
    cols = list(mask.retained)
    if len(cols) < 2:
        return mask
    corr = _correlation_matrix(ds.values, ds.missing, cols)
    alive = [True] * len(cols)
    removed = list(mask.removed_correlated)
    for a in range(len(cols)):
        if not alive[a]:
            continue
        for b in range(a + 1, len(cols)):
            r = corr[a, b]
            if alive[b] and np.isfinite(r) and abs(r) > threshold:
                alive[b] = False
                removed.append((cols[b], cols[a], float(r)))
    retained = tuple(c for c, ok in zip(cols, alive) if ok)
    return FeatureMask(mask.n_features, retained, mask.removed_constant, tuple(removed))


@dataclass(frozen=True)
class ScalerParams:
    means: tuple
    stds: tuple
    ddof: int = STD_DDOF

    def __post_init__(self):
        if any(s <= 0 for s in self.stds):
            raise TrainingError("scaler standard deviations must be strictly positive")


def fit_scaler(train: Dataset, mask: FeatureMask) -> ScalerParams:
    cols = mask.indices
    x = np.where(train.missing[:, cols], np.nan, train.values[:, cols])
    means = np.nanmean(x, axis=0)
    stds = np.nanstd(x, axis=0, ddof=STD_DDOF)
    zero = [int(cols[k]) for k in np.flatnonzero(~(stds > 0))]
    if zero:
        raise TrainingError(f"zero variance on training data for features {zero}; prune constants first")
    return ScalerParams(tuple(float(m) for m in means), tuple(float(s) for s in stds))


def apply_scaler(data, params: ScalerParams, mask: FeatureMask) -> np.ndarray:
    """Standardize the retained columns of a Dataset or raw (n, F) matrix."""
    x = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mask.n_features:
        got = x.shape[-1] if x.ndim else 0
        raise SchemaError(f"expected {mask.n_features} raw features, got {got}")
    return (x[:, mask.indices] - np.asarray(params.means)) / np.asarray(params.stds)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 42
    stratify_on: str = "y"

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.stratify_on not in ("y", "class_labels", "activities"):
            raise ConfigError(f"cannot stratify on {self.stratify_on!r}")


def stratum_test_count(n: int, fraction: float) -> int:
    """round-half-up(n * fraction), computed exactly on the decimal fraction."""
    exact = Fraction(n) * Fraction(str(fraction))
    return int(exact + Fraction(1, 2)) if exact >= 0 else 0


def stratified_split(ds: Dataset, spec: SplitSpec = SplitSpec()):
    strata = getattr(ds, spec.stratify_on)
    rng = np.random.default_rng(spec.seed)
    test_idx = []
    for value in np.unique(strata):
        members = np.flatnonzero(strata == value)
        if members.size < 2:
            raise TrainingError(f"stratum {value} has {members.size} row(s); need at least 2")
        k = stratum_test_count(members.size, spec.test_fraction)
        test_idx.append(rng.permutation(members)[:k])
    is_test = np.zeros(len(ds), bool)
    if test_idx:
        is_test[np.concatenate(test_idx)] = True
    return ds.subset(np.flatnonzero(~is_test)), ds.subset(np.flatnonzero(is_test))


def undersample_majority(train: Dataset, seed: int = 42) -> Dataset:
    labels, counts = np.unique(train.y, return_counts=True)
    if labels.size != 2:
        raise TrainingError(f"undersampling needs exactly two classes, found {labels.size}")
    rng = np.random.default_rng(seed)
    minority = int(counts.min())
    keep = []
    for lab, cnt in zip(labels, counts):
        members = np.flatnonzero(train.y == lab)
        if cnt > minority:
            members = np.sort(rng.choice(members, size=minority, replace=False))
        keep.append(members)
    order = rng.permutation(np.concatenate(keep))
    return train.subset(order)


def class_weights(train: Dataset) -> dict:
    """Balanced weights N / (K * n_c) for every class present."""
    labels, counts = np.unique(train.y, return_counts=True)
    if labels.size == 0 or counts.min() == 0:
        raise TrainingError("class weights need non-empty classes")
    n, k = len(train), labels.size
    return {int(lab): n / (k * int(cnt)) for lab, cnt in zip(labels, counts)}


def sample_weights(y, weights: dict) -> np.ndarray:
    y = np.asarray(y)
    return np.array([weights[int(v)] for v in (0, 1)])[y.astype(np.int64)]


def scale_pos_weight(train: Dataset) -> float:
    n_pos = int(np.sum(train.y == 1))
    n_neg = int(np.sum(train.y == 0))
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("scale_pos_weight needs both classes")
    return n_neg / n_pos


@dataclass(frozen=True)
class PreprocessArtifacts:
    """Frozen preprocessing state shared by training, evaluation and live scoring."""

    feature_names: tuple
    mask: FeatureMask
    scaler: ScalerParams
    report: Optional[CleaningReport] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    version: int = ARTIFACT_VERSION

    def __post_init__(self):
        if len(self.feature_names) != self.mask.n_features:
            raise SchemaError("artifact feature names do not match mask width")
        if len(self.scaler.means) != len(self.mask.retained):
            raise SchemaError("scaler width does not match retained features")

    @property
    def n_model_features(self):
        return len(self.mask.retained)

    @property
    def retained_names(self):
        return tuple(self.feature_names[i] for i in self.mask.retained)

    def transform(self, data) -> np.ndarray:
        if isinstance(data, Dataset) and data.schema.feature_names != self.feature_names:
            diff = sorted(set(data.schema.feature_names) ^ set(self.feature_names))
            raise SchemaError(f"schema mismatch; differing columns: {diff[:10]}")
        return apply_scaler(data, self.scaler, self.mask)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "feature_names": list(self.feature_names),
            "mask": {
                "n_features": self.mask.n_features,
                "retained": list(self.mask.retained),
                "removed_constant": list(self.mask.removed_constant),
                "removed_correlated": [list(t) for t in self.mask.removed_correlated],
            },
            "scaler": {"means": list(self.scaler.means), "stds": list(self.scaler.stds),
                       "ddof": self.scaler.ddof},
            "cleaning_report": None if self.report is None else asdict(self.report),
            "split": asdict(self.split),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessArtifacts":
        if d.get("version") != ARTIFACT_VERSION:
            raise ConfigError(
                f"preprocess artifact version {d.get('version')} unsupported (expected {ARTIFACT_VERSION})"
            )
        m = d["mask"]
        mask = FeatureMask(
            m["n_features"], tuple(m["retained"]), tuple(m["removed_constant"]),
            tuple((int(a), int(b), float(r)) for a, b, r in m["removed_correlated"]),
        )
        s = d["scaler"]
        rep = d.get("cleaning_report")
        return cls(
            feature_names=tuple(d["feature_names"]),
            mask=mask,
            scaler=ScalerParams(tuple(s["means"]), tuple(s["stds"]), s.get("ddof", STD_DDOF)),
            report=None if rep is None else CleaningReport(**rep),
            split=SplitSpec(**d["split"]),
        )


def save_artifacts(art: PreprocessArtifacts, path) -> None:
    try:
        Path(path).write_text(json.dumps(art.to_dict(), indent=1) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def load_artifacts(path) -> PreprocessArtifacts:
    try:
        return PreprocessArtifacts.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
