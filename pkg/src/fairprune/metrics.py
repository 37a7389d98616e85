"""ROC-AUC (binary and one-vs-one) and subgroup evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .models import ModelState, predict

__all__ = ["roc_auc_binary", "roc_auc_ovo", "auc_for", "GroupMetrics", "EvalReport", "evaluate", "report_from_probs"]


def roc_auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 0.5.

    Uses average ranks, so it runs in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_ovo(probs, labels, return_skipped: bool = False):
    """Unweighted one-vs-one AUC over ordered class pairs.

    For the pair (j, k) only samples labelled j or k are used, and class j is
    scored by ``p_j / (p_j + p_k)`` (0.5 when both are zero). Pairs where either
    class is absent are skipped.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError("probs must be [N, K] with K >= 2")
    k = probs.shape[1]
    present = set(np.unique(labels).tolist())
    aucs, skipped = [], []
    for j in range(k):
        for m in range(k):
            if j == m:
                continue
            if j not in present or m not in present:
                skipped.append((j, m))
                continue
            sel = (labels == j) | (labels == m)
            pj, pm = probs[sel, j], probs[sel, m]
            denom = pj + pm
            score = np.divide(pj, denom, out=np.full_like(pj, 0.5), where=denom > 0)
            aucs.append(roc_auc_binary(score, (labels[sel] == j).astype(int)))
    if not aucs:
        raise ValueError("no class pair has samples of both classes")
    result = float(np.mean(aucs))
    return (result, skipped) if return_skipped else result


def auc_for(probs: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Binary AUC on class-1 probability for K=2, one-vs-one otherwise; None if undefined."""
    try:
        if probs.shape[1] == 2:
            return roc_auc_binary(probs[:, 1], labels)
        return roc_auc_ovo(probs, labels)
    except ValueError:
        return None


@dataclass(frozen=True)
class GroupMetrics:
    auc: Optional[float]
    count: int
    accuracy: float


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    auc: Optional[float]
    groups: dict = field(default_factory=dict)  # tag -> GroupMetrics
    degenerate: bool = False
    count: int = 0


def evaluate(state: ModelState, images, labels, groups=None) -> EvalReport:
    """Overall and per-group accuracy/AUC.

    A group missing one of the classes gets ``auc=None``. The report is flagged
    degenerate when the model predicts one class for every sample.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    probs, pred = predict(state, images)
    return report_from_probs(probs, pred, labels, groups)


def report_from_probs(probs, pred, labels, groups=None) -> EvalReport:
    """:func:`evaluate` on precomputed probabilities and predictions."""
    labels = np.asarray(labels)
    correct = pred == labels
    per_group = {}
    if groups is not None:
        groups = np.asarray(groups)
        for tag in sorted(set(groups.tolist())):
            sel = groups == tag
            per_group[tag] = GroupMetrics(auc_for(probs[sel], labels[sel]), int(sel.sum()), float(correct[sel].mean()))
    return EvalReport(
        accuracy=float(correct.mean()),
        auc=auc_for(probs, labels),
        groups=per_group,
        degenerate=bool(len(np.unique(pred)) == 1),
        count=len(labels),
    )
