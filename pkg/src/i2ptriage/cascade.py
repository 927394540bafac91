"""Two-phase cascade: I2P detection gating exfiltration triage, plus model persistence.

Model file layout (all integers little-endian)::

    magic    8 bytes  b"I2PTRIAG"
    version  u16
    reserved u16
    body_len u64
    body     blocks of: name_len u16, name utf-8, payload_len u64, payload (JSON, utf-8)
    sha256   32 bytes over everything above

JSON floats are written in shortest round-trip form, so node thresholds and
leaf values reload bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .ensemble import model_from_dict, model_to_dict, predict_proba
from .errors import (
    ChecksumError,
    IOFailure,
    ModelFileError,
    SchemaError,
    TrainingError,
    TruncatedError,
    VersionError,
)
from .flow_model import Activity, ClassLabel, Dataset, FlowRecord
from .preprocess import PreprocessArtifacts

MAGIC = b"I2PTRIAG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHHQ")
_DIGEST = 32


class Tier(str, Enum):
    NONE = "None"
    LOW = "Low"
    HIGH = "High"


@dataclass(frozen=True, eq=False)
class PhaseBundle:
    model: object
    artifacts: PreprocessArtifacts
    threshold: float = 0.5
    positive_class_name: str = "I2P"
    phase: int = 1
    columns: Optional[str] = None  # column-config text used to read this phase's files

    def __post_init__(self):
        if self.artifacts.n_model_features != self.model.n_features:
            raise SchemaError(
                f"artifacts retain {self.artifacts.n_model_features} features, "
                f"model expects {self.model.n_features}"
            )

    @property
    def feature_names(self):
        return self.artifacts.feature_names

    def score(self, X_raw) -> np.ndarray:
        return predict_proba(self.model, self.artifacts.transform(X_raw))


@dataclass(frozen=True, eq=False)
class CascadeModel:
    phase1: PhaseBundle
    phase2: PhaseBundle
    version: int = FORMAT_VERSION
    created: Optional[str] = None
    provenance: str = ""

    def __post_init__(self):
        if self.phase1.feature_names != self.phase2.feature_names:
            raise SchemaError("phase bundles were trained on different raw schemas")

    @property
    def feature_names(self):
        return self.phase1.feature_names

    def with_thresholds(self, phase1=None, phase2=None) -> "CascadeModel":
        p1 = self.phase1 if phase1 is None else replace(self.phase1, threshold=phase1)
        p2 = self.phase2 if phase2 is None else replace(self.phase2, threshold=phase2)
        return replace(self, phase1=p1, phase2=p2)


@dataclass(frozen=True)
class AlertRecord:
    flow_id: str
    p1_score: float
    p2_score: Optional[float]
    tier: Tier


@dataclass(frozen=True)
class BatchSummary:
    counts: dict

    @property
    def total(self):
        return sum(self.counts.values())

    @property
    def rates(self):
        n = self.total
        return {k: (v / n if n else 0.0) for k, v in self.counts.items()}


def build_phase2_dataset(ds: Dataset) -> Dataset:
    """I2P rows with FTP/P2P (label 1, Exfiltration) or Browsing (label 0, Legitimate)."""
    keep_acts = (int(Activity.FTP), int(Activity.P2P), int(Activity.BROWSING))
    keep = (ds.class_labels == ClassLabel.I2P) & np.isin(ds.activities, keep_acts)
    if not keep.any():
        raise TrainingError("no I2P rows with FTP, P2P or Browsing activity labels")
    sub = ds.subset(np.flatnonzero(keep))
    y = np.isin(sub.activities, (int(Activity.FTP), int(Activity.P2P))).astype(np.int8)
    return sub.with_target(y, ("Legitimate", "Exfiltration"))


def _raw_matrix(cm: CascadeModel, data) -> np.ndarray:
    names = cm.feature_names
    if isinstance(data, Dataset):
        if data.schema.feature_names != names:
            diff = sorted(set(data.schema.feature_names) ^ set(names))
            raise SchemaError(f"schema mismatch with cascade; differing columns: {diff[:10]}")
        return data.values
    if isinstance(data, np.ndarray) and data.ndim == 2:
        if data.shape[1] != len(names):
            raise SchemaError(f"expected {len(names)} raw features, got {data.shape[1]}")
        return data.astype(np.float64, copy=False)
    rows = list(data)
    for i, r in enumerate(rows):
        if len(r) != len(names):
            raise SchemaError(f"expected {len(names)} raw features, got {len(r)}", row=i)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))


def score_matrix(cm: CascadeModel, X_raw):
    """Vectorized cascade: (p1, p2 with NaN where Phase 2 was not run, tier codes 0/1/2)."""
    X_raw = _raw_matrix(cm, X_raw)
    n = X_raw.shape[0]
    p2 = np.full(n, np.nan)
    tiers = np.zeros(n, np.int8)
    if n == 0:
        return np.zeros(0), p2, tiers
    p1 = cm.phase1.score(X_raw)
    gated = np.flatnonzero(p1 > cm.phase1.threshold)
    if gated.size:
        p2[gated] = cm.phase2.score(X_raw[gated])
        tiers[gated] = np.where(p2[gated] > cm.phase2.threshold, 2, 1)
    return p1, p2, tiers


_TIERS = (Tier.NONE, Tier.LOW, Tier.HIGH)


def score_flow(cm: CascadeModel, record, flow_id="0") -> AlertRecord:
    values = record.values if isinstance(record, FlowRecord) else record
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size != len(cm.feature_names):
        raise SchemaError(f"expected {len(cm.feature_names)} raw features, got {values.size}")
    p1, p2, tiers = score_matrix(cm, values[None, :])
    return AlertRecord(str(flow_id), float(p1[0]),
                       None if np.isnan(p2[0]) else float(p2[0]), _TIERS[tiers[0]])


def score_batch(cm: CascadeModel, data, ids=None):
    """Score every flow; returns (records in input order, BatchSummary)."""
    p1, p2, tiers = score_matrix(cm, data)
    if ids is None:
        ids = data.ids if isinstance(data, Dataset) and data.ids is not None else range(len(p1))
    records = [
        AlertRecord(str(fid), float(a), None if np.isnan(b) else float(b), _TIERS[t])
        for fid, a, b, t in zip(ids, p1, p2, tiers)
    ]
    counts = {t.value: int(np.sum(tiers == k)) for k, t in enumerate(_TIERS)}
    return records, BatchSummary(counts)


def write_alerts(path, records) -> None:
    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["flow_id", "p1_score", "p2_score", "tier"])
            for r in records:
                w.writerow([r.flow_id, repr(r.p1_score),
                            "" if r.p2_score is None else repr(r.p2_score), r.tier.value])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class AlertProjection:
    false_alerts_per_day: float
    missed_flows_per_day: float
    true_alerts_per_day: float


def project_alert_volume(fpr: float, recall: float, daily_flows: float, i2p_fraction: float) -> AlertProjection:
    for name, v in (("fpr", fpr), ("recall", recall), ("i2p_fraction", i2p_fraction)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    i2p = daily_flows * i2p_fraction
    return AlertProjection(
        false_alerts_per_day=fpr * daily_flows * (1.0 - i2p_fraction),
        missed_flows_per_day=(1.0 - recall) * i2p,
        true_alerts_per_day=recall * i2p,
    )


# ---------------------------------------------------------------- persistence

def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _bundle_blocks(prefix: str, b: PhaseBundle) -> list:
    meta = {"threshold": b.threshold, "positive_class_name": b.positive_class_name,
            "phase": b.phase, "columns": b.columns}
    return [
        (f"{prefix}.meta", _dumps(meta)),
        (f"{prefix}.artifacts", _dumps(b.artifacts.to_dict())),
        (f"{prefix}.model", _dumps(model_to_dict(b.model))),
    ]


def _bundle_from_blocks(prefix: str, blocks: dict) -> PhaseBundle:
    try:
        meta = json.loads(blocks[f"{prefix}.meta"])
        art = PreprocessArtifacts.from_dict(json.loads(blocks[f"{prefix}.artifacts"]))
        model = model_from_dict(json.loads(blocks[f"{prefix}.model"]))
    except KeyError as exc:
        raise ModelFileError(f"model file lacks block {exc}") from None
    return PhaseBundle(model, art, float(meta["threshold"]), meta["positive_class_name"],
                       int(meta["phase"]), meta.get("columns"))


def _pack(blocks, version=FORMAT_VERSION) -> bytes:
    body = bytearray()
    for name, payload in blocks:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
    head = _HEADER.pack(MAGIC, version, 0, len(body))
    data = head + bytes(body)
    return data + hashlib.sha256(data).digest()


def _unpack(data: bytes) -> dict:
    if len(data) < _HEADER.size:
        raise TruncatedError("model file is shorter than its header")
    magic, version, _, body_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError("not an i2ptriage model file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise VersionError(f"model file format version {version} is not supported by this "
                           f"reader (supports version {FORMAT_VERSION})")
    end = _HEADER.size + body_len
    if len(data) < end + _DIGEST:
        raise TruncatedError(f"model file truncated: {len(data)} bytes, expected {end + _DIGEST}")
    if len(data) > end + _DIGEST:
        raise ModelFileError("trailing bytes after model file checksum")
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise ChecksumError("model file checksum mismatch; file is corrupted")
    blocks, pos = {}, _HEADER.size
    while pos < end:
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        blocks[name] = data[pos:pos + plen]
        pos += plen
    if pos != end:
        raise ModelFileError("block table overruns model body")
    return blocks


def _write(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def bundle_bytes(b: PhaseBundle) -> bytes:
    return _pack([("meta", _dumps({"kind": "bundle"}))] + _bundle_blocks("phase", b))


def cascade_bytes(cm: CascadeModel) -> bytes:
    meta = {"kind": "cascade", "created": cm.created, "provenance": cm.provenance}
    return _pack([("meta", _dumps(meta))]
                 + _bundle_blocks("phase1", cm.phase1) + _bundle_blocks("phase2", cm.phase2))


def save_bundle(b: PhaseBundle, path) -> None:
    _write(path, bundle_bytes(b))


def _kind(blocks) -> str:
    return json.loads(blocks["meta"])["kind"]


def load_bundle(path) -> PhaseBundle:
    blocks = _unpack(_read(path))
    if _kind(blocks) != "bundle":
        raise ModelFileError(f"{path} holds a {_kind(blocks)}, not a phase bundle")
    return _bundle_from_blocks("phase", blocks)


def save_cascade(cm: CascadeModel, path) -> None:
    _write(path, cascade_bytes(cm))


def load_cascade(path) -> CascadeModel:
    blocks = _unpack(_read(path))
    if _kind(blocks) != "cascade":
        raise ModelFileError(f"{path} holds a {_kind(blocks)}, not a cascade")
    meta = json.loads(blocks["meta"])
    return CascadeModel(
        _bundle_from_blocks("phase1", blocks), _bundle_from_blocks("phase2", blocks),
        FORMAT_VERSION, meta.get("created"), meta.get("provenance", ""),
    )
