"""Slide-level sensitivity, specificity and ROC analysis."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .. import FORMAT_VERSION
from ..errors import SentinelError


def _binary(labels) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, str):
            if v not in ("tumor", "normal"):
                raise ValueError(f"unknown label {v!r}")
            out.append(1 if v == "tumor" else 0)
        else:
            out.append(int(v))
    y = np.array(out, dtype=np.int64)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1 or normal/tumor")
    return y


def auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores get half credit via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise SentinelError("AUC undefined with a single class")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` sweeping every distinct score high -> low, from (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise SentinelError("ROC undefined with a single class")
    pts = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(s)[::-1]:
        pred = s >= thr
        pts.append((float(np.sum(pred & (y == 0)) / n_neg), float(np.sum(pred & (y == 1)) / n_pos), float(thr)))
    return pts


def trapezoid_auc(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class EvalReport:
    sensitivity: float
    specificity: float
    decision_threshold: float
    auc: float
    auc_trapezoid: float
    tp: int
    fn: int
    tn: int
    fp: int
    roc: list[tuple[float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "decision_threshold": self.decision_threshold,
            "auc": self.auc,
            "auc_trapezoid": self.auc_trapezoid,
            "confusion": {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp},
            "roc": [{"fpr": f, "tpr": t, "threshold": None if np.isinf(h) else h} for f, t, h in self.roc],
        }

    def save(self, path, roc_table=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if roc_table is not None:
            with open(roc_table, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr", "threshold"])
                for f, t, h in self.roc:
                    w.writerow([repr(f), repr(t), "inf" if np.isinf(h) else repr(h)])


def evaluate(scores, labels, decision_threshold: float = 0.5) -> EvalReport:
    """Sensitivity/specificity (tumor iff score >= threshold), ROC and AUC."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    pred = s >= decision_threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    pts = roc_points(s, y)
    return EvalReport(
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        decision_threshold=float(decision_threshold),
        auc=auc_rank(s, y),
        auc_trapezoid=trapezoid_auc(pts),
        tp=tp, fn=fn, tn=tn, fp=fp,
        roc=pts,
    )
