"""Classification metrics from a confusion matrix (rows true, columns predicted).

Counts are integers, so each metric is evaluated as an exact rational and
rounded to float once; results do not depend on summation order.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import ContractError, MetricError


def confusion_matrix(labels, preds, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ContractError(f"labels {labels.shape} and predictions {preds.shape} differ in shape")
    if labels.size and (min(labels.min(), preds.min()) < 0 or max(labels.max(), preds.max()) >= n_classes):
        raise ContractError(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _counts(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0) or np.any(cm != np.round(cm)):
        raise ContractError("confusion matrix entries must be non-negative integers")
    return [[int(v) for v in row] for row in cm]


def _support(cm):
    cm = _counts(cm)
    support = [sum(row) for row in cm]
    for k, s in enumerate(support):
        if s == 0:
            raise MetricError(f"class {k} has no true samples")
    return cm, support


def balanced_accuracy(cm) -> float:
    cm, support = _support(cm)
    K = len(cm)
    return float(sum(Fraction(cm[k][k], support[k]) for k in range(K)) / K)


def cohens_kappa(cm) -> float:
    cm = _counts(cm)
    K = len(cm)
    total = sum(map(sum, cm))
    if total <= 0:
        raise MetricError("kappa of an empty confusion matrix")
    rows = [sum(r) for r in cm]
    cols = [sum(cm[i][k] for i in range(K)) for k in range(K)]
    p_o = Fraction(sum(cm[k][k] for k in range(K)), total)
    p_e = Fraction(sum(r * c for r, c in zip(rows, cols)), total * total)
    if p_e >= 1:
        raise MetricError("kappa undefined: both margins concentrate on a single class (p_e = 1)")
    return float((p_o - p_e) / (1 - p_e))


def _f1_fractions(cm):
    K = len(cm)
    out = []
    for k in range(K):
        tp = cm[k][k]
        pred_tot = sum(cm[i][k] for i in range(K))
        true_tot = sum(cm[k])
        # F1 = 2 tp / (pred + true); zero when precision + recall = 0
        out.append(Fraction(2 * tp, pred_tot + true_tot) if tp else Fraction(0))
    return out


def per_class_f1(cm):
    return np.array([float(f) for f in _f1_fractions(_counts(cm))])


def weighted_f1(cm) -> float:
    cm, support = _support(cm)
    f1 = _f1_fractions(cm)
    return float(sum(f * s for f, s in zip(f1, support)) / sum(support))


def all_metrics(labels, preds, n_classes):
    cm = confusion_matrix(labels, preds, n_classes)
    return {"bal_acc": balanced_accuracy(cm), "kappa": cohens_kappa(cm), "weighted_f1": weighted_f1(cm)}


class Aggregate(NamedTuple):
    mean: float
    std: float
    std_defined: bool


def aggregate_seeds(values) -> Aggregate:
    """Arithmetic mean and sample (n - 1) standard deviation; n = 1 gives std 0, flagged."""
    v = [float(x) for x in values]
    if not v:
        raise ContractError("cannot aggregate an empty list of values")
    if all(x == v[0] for x in v):
        return Aggregate(v[0], 0.0, len(v) > 1)
    # fsum makes the result independent of input order
    mu = math.fsum(v) / len(v)
    if len(v) == 1:
        return Aggregate(mu, 0.0, False)
    var = math.fsum((x - mu) ** 2 for x in v) / (len(v) - 1)
    return Aggregate(mu, math.sqrt(var), True)
