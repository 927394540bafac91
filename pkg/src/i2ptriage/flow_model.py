"""Flow-record data model and CSV ingestion for CICFlowMeter-style exports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IOFailure, SchemaError


class ClassLabel(IntEnum):
    NORMAL = 0
    I2P = 1

    @property
    def display(self):
        return {0: "Normal", 1: "I2P"}[self.value]


class Activity(IntEnum):
    FTP = 0
    P2P = 1
    BROWSING = 2
    EMAIL = 3
    CHAT = 4

    @property
    def display(self):
        return ("FTP", "P2P", "Browsing", "Email", "Chat")[self.value]


NO_ACTIVITY = -1

_CLASS_BY_NAME = {c.display.lower(): c for c in ClassLabel}
_ACTIVITY_BY_NAME = {a.display.lower(): a for a in Activity}


def class_from_name(name: str) -> ClassLabel:
    try:
        return _CLASS_BY_NAME[name.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown class enum {name!r}; expected one of Normal, I2P") from None


def activity_from_name(name: str) -> Activity:
    try:
        return _ACTIVITY_BY_NAME[name.strip().lower()]
    except KeyError:
        raise ConfigError(
            f"unknown activity enum {name!r}; expected one of FTP, P2P, Browsing, Email, Chat"
        ) from None


@dataclass(frozen=True)
class ColumnConfig:
    """How a delimited flow file maps onto features and labels.

    Read from a key=value file with keys ``label_column``, ``activity_column``,
    ``id_columns`` (comma list), ``label_map.<string>=<enum>`` and optionally
    ``activity_map.<string>=<enum>`` and ``unknown_label`` (``error`` or ``skip``).
    """

    label_column: str = "Label"
    activity_column: Optional[str] = "Activity"
    id_columns: tuple = ()
    label_map: dict = field(default_factory=dict)
    activity_map: dict = field(default_factory=dict)
    unknown_label: str = "error"

    def __post_init__(self):
        if self.unknown_label not in ("error", "skip"):
            raise ConfigError(f"unknown_label must be 'error' or 'skip', got {self.unknown_label!r}")

    def resolve_label(self, raw: str) -> Optional[ClassLabel]:
        raw = raw.strip()
        if raw in self.label_map:
            return self.label_map[raw]
        return _CLASS_BY_NAME.get(raw.lower())

    def resolve_activity(self, raw: str) -> int:
        raw = raw.strip()
        if raw in self.activity_map:
            return int(self.activity_map[raw])
        act = _ACTIVITY_BY_NAME.get(raw.lower())
        return NO_ACTIVITY if act is None else int(act)

    def to_text(self) -> str:
        lines = [f"label_column = {self.label_column}"]
        if self.activity_column:
            lines.append(f"activity_column = {self.activity_column}")
        if self.id_columns:
            lines.append("id_columns = " + ", ".join(self.id_columns))
        lines.append(f"unknown_label = {self.unknown_label}")
        for raw, enum in self.label_map.items():
            lines.append(f"label_map.{raw} = {enum.display}")
        for raw, enum in self.activity_map.items():
            lines.append(f"activity_map.{raw} = {enum.display}")
        return "\n".join(lines) + "\n"


def parse_column_config(text: str) -> ColumnConfig:
    kwargs: dict = {"label_map": {}, "activity_map": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"column config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("label_map."):
            kwargs["label_map"][key[len("label_map."):]] = class_from_name(value)
        elif key.startswith("activity_map."):
            kwargs["activity_map"][key[len("activity_map."):]] = activity_from_name(value)
        elif key == "label_column":
            kwargs["label_column"] = value
        elif key == "activity_column":
            kwargs["activity_column"] = value or None
        elif key == "id_columns":
            kwargs["id_columns"] = tuple(c.strip() for c in value.split(",") if c.strip())
        elif key == "unknown_label":
            kwargs["unknown_label"] = value
        else:
            raise ConfigError(f"column config line {lineno}: unknown key {key!r}")
    return ColumnConfig(**kwargs)


def load_column_config(path) -> ColumnConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read column config {path}: {exc}") from exc
    return parse_column_config(text)


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple
    label_column: str
    activity_column: Optional[str] = None

    def __post_init__(self):
        if len(self.feature_names) < 1:
            raise SchemaError("schema has zero feature columns")
        if any(not n for n in self.feature_names):
            raise SchemaError("empty feature name")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("duplicate feature names")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaError(f"feature {name!r} not in schema") from None


@dataclass(frozen=True)
class FlowRecord:
    values: np.ndarray
    missing_mask: np.ndarray


@dataclass(frozen=True)
class LabeledFlow:
    record: FlowRecord
    class_label: ClassLabel
    activity_label: Optional[Activity] = None

    def __post_init__(self):
        if self.activity_label is not None and self.class_label != ClassLabel.I2P:
            raise SchemaError("activity label on a non-I2P flow")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar, immutable collection of labeled flows.

    ``values`` holds NaN where ``missing`` is set. ``y`` is the binary target
    of the current task: the I2P flag by default, or the exfiltration flag
    after the Phase 2 relabelling.
    """

    schema: FeatureSchema
    values: np.ndarray
    missing: np.ndarray
    class_labels: np.ndarray
    activities: np.ndarray
    ids: Optional[tuple] = None
    y: Optional[np.ndarray] = None
    target_names: tuple = ("Normal", "I2P")
    provenance: str = ""

    def __post_init__(self):
        n, f = self.values.shape
        if f != self.schema.n_features:
            raise SchemaError(f"values have {f} columns, schema has {self.schema.n_features}")
        if self.missing.shape != (n, f):
            raise SchemaError("missing mask shape mismatch")
        if len(self.class_labels) != n or len(self.activities) != n:
            raise SchemaError("label vectors do not match row count")
        if self.ids is not None and len(self.ids) != n:
            raise SchemaError("id vector does not match row count")
        y = self.class_labels if self.y is None else self.y
        bad = (self.activities != NO_ACTIVITY) & (self.class_labels != ClassLabel.I2P)
        if bad.any():
            raise SchemaError("activity label present on non-I2P row", row=int(np.argmax(bad)))
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64)))
        object.__setattr__(self, "missing", _frozen(np.asarray(self.missing, dtype=bool)))
        object.__setattr__(self, "class_labels", _frozen(np.asarray(self.class_labels, dtype=np.int8)))
        object.__setattr__(self, "activities", _frozen(np.asarray(self.activities, dtype=np.int8)))
        object.__setattr__(self, "y", _frozen(np.asarray(y, dtype=np.int8)))
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.schema.n_features

    def record(self, i: int) -> FlowRecord:
        return FlowRecord(self.values[i], self.missing[i])

    def labeled(self, i: int) -> LabeledFlow:
        act = int(self.activities[i])
        return LabeledFlow(
            self.record(i),
            ClassLabel(int(self.class_labels[i])),
            None if act == NO_ACTIVITY else Activity(act),
        )

    def flow_id(self, i: int) -> str:
        return self.ids[i] if self.ids is not None else str(i)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            values=self.values[idx],
            missing=self.missing[idx],
            class_labels=self.class_labels[idx],
            activities=self.activities[idx],
            ids=None if self.ids is None else tuple(self.ids[i] for i in idx),
            y=self.y[idx],
            target_names=self.target_names,
            provenance=self.provenance,
        )

    def with_target(self, y, target_names) -> "Dataset":
        return Dataset(
            schema=self.schema, values=self.values, missing=self.missing,
            class_labels=self.class_labels, activities=self.activities, ids=self.ids,
            y=y, target_names=tuple(target_names), provenance=self.provenance,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values, other.values, equal_nan=True)
            and np.array_equal(self.class_labels, other.class_labels)
            and np.array_equal(self.activities, other.activities)
            and np.array_equal(self.y, other.y)
            and self.ids == other.ids
        )


def empty_dataset(schema: FeatureSchema, provenance="") -> Dataset:
    f = schema.n_features
    return Dataset(
        schema, np.empty((0, f)), np.zeros((0, f), bool),
        np.empty(0, np.int8), np.empty(0, np.int8), ids=(), provenance=provenance,
    )


def _split_header(header_line: str) -> list:
    return [c.strip() for c in next(csv.reader([header_line]))]


def parse_schema(header_line: str, config: ColumnConfig) -> FeatureSchema:
    if not header_line or not header_line.strip():
        raise SchemaError("empty header line")
    cols = _split_header(header_line.rstrip("\r\n"))
    seen = set()
    for c in cols:
        if c in seen:
            raise SchemaError(f"duplicate column name {c!r}")
        seen.add(c)
    if config.label_column not in seen:
        raise SchemaError(f"label column {config.label_column!r} absent from header")
    skip = {config.label_column, *config.id_columns}
    activity = config.activity_column if config.activity_column in seen else None
    if activity:
        skip.add(activity)
    features = tuple(c for c in cols if c not in skip)
    if not features:
        raise SchemaError("header has zero feature columns")
    return FeatureSchema(features, config.label_column, activity)


def _parse_cell(cell: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def ingest_csv(path, schema: FeatureSchema, config: ColumnConfig) -> Dataset:
    """Read a labeled flow file.

    Non-numeric or non-finite feature cells are kept as missing entries.
    Rows whose label is not in the map raise, or are dropped when
    ``config.unknown_label == "skip"``.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header line") from None
        pos = {c: i for i, c in enumerate(header)}
        missing_cols = [n for n in schema.feature_names if n not in pos]
        if missing_cols:
            raise SchemaError(f"{path}: feature columns absent from file: {missing_cols}")
        if schema.label_column not in pos:
            raise SchemaError(f"{path}: label column {schema.label_column!r} absent")
        fpos = [pos[n] for n in schema.feature_names]
        lpos = pos[schema.label_column]
        apos = pos.get(schema.activity_column) if schema.activity_column else None
        id_pos = [pos[c] for c in config.id_columns if c in pos]
        ncol = len(header)

        values, labels, acts, ids = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != ncol:
                raise SchemaError(
                    f"{path} line {lineno}: expected {ncol} columns, found {len(row)}", row=lineno - 2
                )
            label = config.resolve_label(row[lpos])
            if label is None:
                if config.unknown_label == "skip":
                    continue
                raise ConfigError(f"{path} line {lineno}: label {row[lpos]!r} not in label map")
            act = config.resolve_activity(row[apos]) if apos is not None else NO_ACTIVITY
            if label != ClassLabel.I2P:
                act = NO_ACTIVITY
            values.append([_parse_cell(row[i]) for i in fpos])
            labels.append(int(label))
            acts.append(act)
            if id_pos:
                ids.append(row[id_pos[0]].strip())

    f = schema.n_features
    vals = np.array(values, dtype=np.float64).reshape(len(values), f)
    return Dataset(
        schema=schema,
        values=vals,
        missing=np.isnan(vals),
        class_labels=np.array(labels, dtype=np.int8),
        activities=np.array(acts, dtype=np.int8),
        ids=tuple(ids) if id_pos else None,
        provenance=str(path),
    )


def read_features(path, feature_names, id_columns=()):
    """Read flows for scoring: label columns are optional and ignored.

    Returns (values, ids). Rows with the wrong column count raise a
    SchemaError carrying the 0-based data-row index.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            return np.empty((0, len(feature_names))), ()
        pos = {c: i for i, c in enumerate(header)}
        absent = [n for n in feature_names if n not in pos]
        if absent:
            raise SchemaError(f"{path}: feature columns absent from file: {absent}")
        fpos = [pos[n] for n in feature_names]
        id_pos = next((pos[c] for c in id_columns if c in pos), None)
        values, ids = [], []
        row_index = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path} line {lineno}: expected {len(header)} columns, found {len(row)}",
                    row=row_index,
                )
            values.append([_parse_cell(row[i]) for i in fpos])
            ids.append(row[id_pos].strip() if id_pos is not None else str(row_index))
            row_index += 1
    return np.array(values, dtype=np.float64).reshape(len(values), len(feature_names)), tuple(ids)


def read_schema(path, config: ColumnConfig) -> FeatureSchema:
    try:
        with Path(path).open(newline="") as fh:
            header = fh.readline()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    return parse_schema(header, config)


def load_dataset(path, config: ColumnConfig) -> Dataset:
    return ingest_csv(path, read_schema(path, config), config)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def export_csv(ds: Dataset, path, config: Optional[ColumnConfig] = None) -> ColumnConfig:
    """Write ``ds`` in the ingestible format and return the matching column config.

    Labels are written by canonical enum name, so the returned config needs
    no label map to read the file back.
    """
    config = config or ColumnConfig(id_columns=("Flow ID",))
    id_col = config.id_columns[0] if config.id_columns else "Flow ID"
    act_col = config.activity_column or "Activity"
    out_cfg = ColumnConfig(
        label_column=config.label_column, activity_column=act_col, id_columns=(id_col,),
    )
    header = [id_col, *ds.schema.feature_names, config.label_column, act_col]
    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(ds)):
                act = int(ds.activities[i])
                w.writerow([
                    ds.flow_id(i),
                    *(_fmt(v) for v in ds.values[i]),
                    ClassLabel(int(ds.class_labels[i])).display,
                    "" if act == NO_ACTIVITY else Activity(act).display,
                ])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return out_cfg


@dataclass(frozen=True)
class DatasetSummary:
    total: int
    class_counts: dict
    activity_counts: dict

    @property
    def class_pct(self) -> dict:
        return {k: (100.0 * v / self.total if self.total else 0.0) for k, v in self.class_counts.items()}

    @property
    def activity_pct(self) -> dict:
        """Activity shares of the labelled I2P rows."""
        n = sum(self.activity_counts.values())
        return {k: (100.0 * v / n if n else 0.0) for k, v in self.activity_counts.items()}

    def format(self) -> str:
        lines = ["group,name,count,percent"]
        pct = self.class_pct
        for k, v in self.class_counts.items():
            lines.append(f"class,{k},{v},{pct[k]:.1f}")
        pct = self.activity_pct
        for k, v in self.activity_counts.items():
            lines.append(f"activity,{k},{v},{pct[k]:.1f}")
        return "\n".join(lines) + "\n"


def dataset_summary(ds: Dataset) -> DatasetSummary:
    class_counts = {c.display: int(np.sum(ds.class_labels == c)) for c in ClassLabel}
    activity_counts = {a.display: int(np.sum(ds.activities == a)) for a in Activity}
    return DatasetSummary(len(ds), class_counts, activity_counts)


def dataset_from_arrays(
    values,
    class_labels,
    activities=None,
    feature_names: Optional[Sequence[str]] = None,
    ids=None,
    provenance: str = "arrays",
) -> Dataset:
    """Convenience constructor used by tests and the synthetic generator."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise SchemaError("values must be 2-D")
    n, f = values.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(f))
    acts = np.full(n, NO_ACTIVITY, np.int8) if activities is None else np.asarray(activities, np.int8)
    return Dataset(
        FeatureSchema(names, "Label", "Activity"),
        values, np.isnan(values), np.asarray(class_labels, np.int8), acts,
        ids=ids, provenance=provenance,
    )
