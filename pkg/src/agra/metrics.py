"""Accuracy, F1 and macro AUROC, plus the JSON evaluation report."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


class Average(str, enum.Enum):
    BINARY_POSITIVE = "binary"
    MACRO = "macro"


def accuracy(preds, golds) -> float:
    preds, golds = np.asarray(preds), np.asarray(golds)
    if preds.shape != golds.shape:
        raise MetricError(f"length mismatch: {preds.shape} vs {golds.shape}")
    if preds.size == 0:
        raise MetricError("nothing to evaluate")
    return float(np.mean(preds == golds))


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def per_class_f1(preds, golds, n_classes: int) -> np.ndarray:
    """Per-class F1; accepts class indices (M,) or 0/1 indicator matrices (M, K)."""
    preds, golds = np.asarray(preds), np.asarray(golds)
    if preds.shape != golds.shape:
        raise MetricError(f"length mismatch: {preds.shape} vs {golds.shape}")
    if preds.ndim == 1:
        if np.any((preds < 0) | (preds >= n_classes) | (golds < 0) | (golds >= n_classes)):
            raise MetricError("label out of range")
        P = preds[:, None] == np.arange(n_classes)
        G = golds[:, None] == np.arange(n_classes)
    else:
        P, G = preds.astype(bool), golds.astype(bool)
    tp = (P & G).sum(axis=0)
    fp = (P & ~G).sum(axis=0)
    fn = (~P & G).sum(axis=0)
    return np.array([_f1(*c) for c in zip(tp, fp, fn)])


def f1_scores(preds, golds, n_classes: int, average=Average.MACRO) -> float:
    average = Average(average)
    scores = per_class_f1(preds, golds, n_classes)
    if average is Average.BINARY_POSITIVE:
        if n_classes != 2 or np.asarray(preds).ndim != 1:
            raise MetricError("binary F1 needs a 2-class single-label task")
        return float(scores[1])
    return float(scores.mean())


def auroc(scores, golds) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    golds = np.asarray(golds).astype(bool)
    n_pos, n_neg = int(golds.sum()), int((~golds).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs positives and negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[golds].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auroc(scores, golds, min_positives: int = 2) -> dict:
    scores, golds = np.asarray(scores), np.asarray(golds)
    if scores.shape != golds.shape or scores.ndim != 2:
        raise MetricError("scores and golds must both be (M, K)")
    if scores.shape[0] < 2:
        raise MetricError("AUROC needs at least two samples")
    out = {}
    for k in range(scores.shape[1]):
        pos = int(golds[:, k].sum())
        if pos >= min_positives and pos < scores.shape[0]:
            out[k] = auroc(scores[:, k], golds[:, k])
    return out


def macro_auroc(scores, golds, min_positives: int = 2) -> float:
    per_class = per_class_auroc(scores, golds, min_positives)
    if not per_class:
        raise MetricError("no class has enough positives and negatives for AUROC")
    return float(np.mean(list(per_class.values())))


@dataclass
class EvalReport:
    metrics: dict
    per_class: dict = field(default_factory=dict)
    n: int = 0

    def __getitem__(self, name):
        return self.metrics[name]

    def to_dict(self) -> dict:
        return {**self.metrics, "per_class": self.per_class, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
