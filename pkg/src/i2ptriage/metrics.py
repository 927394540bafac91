"""Confusion matrices, scalar metrics, ROC/PR curves and their CSV export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import IOFailure, SchemaError, TrainingError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def fpr(self):
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    cm: ConfusionMatrix
    threshold: float = 0.5
    roc_auc: Optional[float] = None
    precision_degenerate: bool = False
    recall_degenerate: bool = False


@dataclass(frozen=True)
class CurveSet:
    roc_points: tuple  # (fpr, tpr, threshold)
    pr_points: tuple  # (recall, precision, threshold)


def _aligned(y_true, scores):
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise SchemaError(f"labels {y.shape} and scores {s.shape} are not aligned 1-D vectors")
    return y.astype(np.int64), s


def confusion(y_true, scores, threshold=0.5) -> ConfusionMatrix:
    """Positive prediction iff score > threshold; class 1 is positive."""
    y, s = _aligned(y_true, scores)
    if y.size == 0:
        raise SchemaError("cannot build a confusion matrix from zero samples")
    pred = s > threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)), tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def compute_metrics(cm: ConfusionMatrix, threshold=0.5, roc_auc=None) -> MetricsReport:
    if cm.total == 0:
        raise SchemaError("confusion matrix is empty")
    p_den = cm.tp + cm.fp
    r_den = cm.tp + cm.fn
    precision = cm.tp / p_den if p_den else 0.0
    recall = cm.tp / r_den if r_den else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision, recall=recall, f1=f1, cm=cm, threshold=threshold,
        roc_auc=roc_auc, precision_degenerate=p_den == 0, recall_degenerate=r_den == 0,
    )


def _sweep(y, s):
    """Cumulative (tp, fp) counts when predicting positive for score >= each unique threshold."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tps = np.cumsum(y_sorted)[last_of_run]
    fps = (last_of_run + 1) - tps
    return s_sorted[last_of_run], tps, fps


def roc_curve(y_true, scores):
    y, s = _aligned(y_true, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("ROC is undefined with a single class present")
    thr, tps, fps = _sweep(y, s)
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr, np.r_[np.inf, thr]


def roc_auc(y_true, scores):
    """Midrank AUC plus the ROC points as (fpr, tpr, threshold) triples."""
    y, s = _aligned(y_true, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("AUC is undefined with a single class present")
    ranks = rankdata(s, method="average")
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    fpr, tpr, thr = roc_curve(y, s)
    return float(auc), tuple(zip(fpr.tolist(), tpr.tolist(), thr.tolist()))


def trapezoid_auc(roc_points) -> float:
    pts = np.asarray([(f, t) for f, t, *_ in roc_points])
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def pr_curve(y_true, scores):
    """(recall, precision, threshold) for each unique threshold, highest first."""
    y, s = _aligned(y_true, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise TrainingError("precision-recall curve needs at least one positive")
    thr, tps, fps = _sweep(y, s)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    return tuple(zip(recall.tolist(), precision.tolist(), thr.tolist()))


def curves(y_true, scores) -> CurveSet:
    _, roc = roc_auc(y_true, scores)
    return CurveSet(roc, pr_curve(y_true, scores))


def evaluate_scores(y_true, scores, threshold=0.5):
    """Threshold metrics, AUC and curves in one pass."""
    auc, roc = roc_auc(y_true, scores)
    report = compute_metrics(confusion(y_true, scores, threshold), threshold, auc)
    return report, CurveSet(roc, pr_curve(y_true, scores))


METRIC_COLUMNS = ("model", "accuracy", "precision", "recall", "f1", "roc_auc",
                  "tp", "tn", "fp", "fn", "threshold")


def metrics_row(name: str, r: MetricsReport) -> dict:
    auc = "" if r.roc_auc is None else f"{r.roc_auc:.6f}"
    return {
        "model": name, "accuracy": f"{r.accuracy:.6f}", "precision": f"{r.precision:.6f}",
        "recall": f"{r.recall:.6f}", "f1": f"{r.f1:.6f}", "roc_auc": auc,
        "tp": r.cm.tp, "tn": r.cm.tn, "fp": r.cm.fp, "fn": r.cm.fn, "threshold": f"{r.threshold:.6f}",
    }


def write_metrics_csv(path, rows) -> None:
    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _fmt6(v):
    return "inf" if v == np.inf else f"{v:.6f}"


def write_curves(directory, cs: CurveSet) -> None:
    d = Path(directory)
    try:
        with (d / "roc.csv").open("w") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, thr in cs.roc_points:
                fh.write(f"{f:.6f},{t:.6f},{_fmt6(thr)}\n")
        with (d / "pr.csv").open("w") as fh:
            fh.write("recall,precision,threshold\n")
            for r, p, thr in cs.pr_points:
                fh.write(f"{r:.6f},{p:.6f},{_fmt6(thr)}\n")
    except OSError as exc:
        raise IOFailure(f"cannot write curves to {d}: {exc}") from exc


def read_metrics_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
