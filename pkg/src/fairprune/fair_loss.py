"""Performance-weighted (PW) cross-entropy for fairness-aware pruning.

Every sample gets a weight and a target distribution derived once from the
*unpruned* model and frozen for the whole pruning/retraining lifecycle:

* weight ``w = theta + (1 - p_true) ** gamma`` where ``p_true`` is the
  original model's probability for the true class;
* corrected soft label: the original probability vector when the original
  prediction is correct, the one-hot true label otherwise.

The loss is ``sum_i w_i * CE(target_i, pruned_probs_i)``.

Argmax ties resolve to the lowest class index, so a tie only counts as a
correct prediction when the true class is the lowest tied index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .models import ModelState, predict
from .tensor import Tensor

__all__ = [
    "LOG_EPS",
    "VARIANTS",
    "PWConfig",
    "SampleAnnotations",
    "compute_weight",
    "correct_soft_label",
    "annotate",
    "pw_loss",
    "soft_cross_entropy",
    "SoftTargetLoss",
    "make_loss",
    "export_annotations_csv",
]

LOG_EPS = 1e-12
VARIANTS = ("full", "weights_only", "soft_labels_only", "plain_ce")
_PROB_TOL = 1e-9


@dataclass(frozen=True)
class PWConfig:
    theta: float = 0.3
    gamma: float = 1.0
    reduction: str = "sum"
    variant: str = "full"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def compute_weight(prob_true_class, theta: float, gamma: float):
    """Sample weight ``theta + (1 - p) ** gamma``; ``0 ** 0`` is taken as 1.

    Accepts a scalar or an array of probabilities.
    """
    p = np.asarray(prob_true_class, dtype=np.float64)
    if not 0.0 <= theta <= 1.0 or gamma < 0:
        raise ValueError(f"invalid theta={theta} / gamma={gamma}")
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ValueError("prob_true_class must lie in [0, 1]")
    w = theta + (np.ones_like(p) if gamma == 0 else (1.0 - p) ** gamma)
    return float(w) if w.ndim == 0 else w


def _check_probs(probs: np.ndarray) -> None:
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError(f"expected probability rows [N, K>=2], got shape {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > _PROB_TOL):
        raise ValueError("rows must be non-negative and sum to 1")


def correct_soft_label(orig_probs, true_label: int) -> np.ndarray:
    p = np.asarray(orig_probs, dtype=np.float64)
    _check_probs(p[None, :])
    k = p.shape[0]
    if not 0 <= int(true_label) < k:
        raise ValueError(f"label {true_label} out of range for {k} classes")
    if int(np.argmax(p)) == int(true_label):
        return p.copy()
    out = np.zeros(k)
    out[int(true_label)] = 1.0
    return out


@dataclass(frozen=True)
class SampleAnnotations:
    """Frozen per-sample quantities computed with the original model.

    All arrays are read-only and indexed by dataset sample position.
    """

    orig_probs: np.ndarray
    true_label: np.ndarray
    predicted_class: np.ndarray
    prob_true_class: np.ndarray
    weight: np.ndarray
    corrected_soft_label: np.ndarray
    theta: float
    gamma: float

    def __len__(self) -> int:
        return len(self.true_label)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted_class == self.true_label

    @classmethod
    def from_probs(cls, orig_probs, labels, theta: float, gamma: float) -> "SampleAnnotations":
        probs = np.array(orig_probs, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        _check_probs(probs)
        if labels.shape != (len(probs),):
            raise ValueError("labels must align with probability rows")
        if len(probs) == 0:
            raise ValueError("cannot annotate an empty dataset")
        if labels.min() < 0 or labels.max() >= probs.shape[1]:
            raise ValueError("labels out of range for the model's class count")
        pred = probs.argmax(axis=1)
        p_true = probs[np.arange(len(labels)), labels]
        weight = np.asarray(compute_weight(p_true, theta, gamma), dtype=np.float64).reshape(-1)
        soft = np.eye(probs.shape[1])[labels]
        ok = pred == labels
        soft[ok] = probs[ok]
        fields = dict(
            orig_probs=probs,
            true_label=labels,
            predicted_class=pred,
            prob_true_class=p_true,
            weight=weight,
            corrected_soft_label=soft,
        )
        for arr in fields.values():
            arr.setflags(write=False)
        return cls(**fields, theta=float(theta), gamma=float(gamma))


def annotate(original: ModelState, images, labels, theta: float = 0.3, gamma: float = 1.0) -> SampleAnnotations:
    """Annotate every sample with the original (unpruned) model."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("cannot annotate an empty dataset")
    labels = np.asarray(labels)
    if labels.max() >= original.spec.num_classes:
        raise ValueError("dataset has more classes than the model")
    probs, _ = predict(original, images)
    return SampleAnnotations.from_probs(probs, labels, theta, gamma)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def soft_cross_entropy(targets: np.ndarray, probs: Tensor, weights: np.ndarray, reduction: str = "sum") -> Tensor:
    """``sum_i w_i * -sum_k t_ik * log(q_ik + eps)``, optionally divided by N."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise ValueError(f"targets {targets.shape} misaligned with probabilities {probs.shape}")
    coef = -(np.asarray(weights, dtype=np.float64).reshape(-1, 1) * targets)
    if reduction == "mean":
        coef = coef / len(targets)
    return T.sum(T.mul(Tensor(coef), T.log(probs, LOG_EPS)))


def _targets_and_weights(ann: SampleAnnotations, idx, variant: str):
    idx = np.asarray(idx)
    labels = ann.true_label[idx]
    k = ann.orig_probs.shape[1]
    onehot = np.eye(k)[labels]
    if variant == "full":
        return ann.corrected_soft_label[idx], ann.weight[idx]
    if variant == "weights_only":
        return onehot, ann.weight[idx]
    if variant == "soft_labels_only":
        return ann.corrected_soft_label[idx], np.ones(len(idx))
    return onehot, np.ones(len(idx))


def pw_loss(annotations: SampleAnnotations, pruned_probs: Tensor, config: PWConfig, index=None) -> Tensor:
    """PW loss for one batch.

    ``index`` selects the annotation rows aligned with ``pruned_probs``;
    by default the annotations are the batch.
    """
    pruned_probs = pruned_probs if isinstance(pruned_probs, Tensor) else Tensor(pruned_probs)
    idx = np.arange(len(annotations)) if index is None else np.asarray(index)
    if len(idx) != pruned_probs.shape[0]:
        raise ValueError(f"{len(idx)} annotations for a batch of {pruned_probs.shape[0]} rows")
    _check_probs(pruned_probs.data)
    targets, weights = _targets_and_weights(annotations, idx, config.variant)
    return soft_cross_entropy(targets, pruned_probs, weights, config.reduction)


class SoftTargetLoss:
    """Loss provider: weighted cross-entropy against fixed per-sample targets.

    Called as ``loss(probs, idx)`` with ``idx`` the dataset positions of the
    batch rows.
    """

    def __init__(self, targets: np.ndarray, weights: Optional[np.ndarray] = None, reduction: str = "sum", name: str = ""):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.weights = np.ones(len(self.targets)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.reduction = reduction
        self.name = name

    def __call__(self, probs: Tensor, idx) -> Tensor:
        idx = np.asarray(idx)
        return soft_cross_entropy(self.targets[idx], probs, self.weights[idx], self.reduction)

    def __repr__(self) -> str:
        return f"SoftTargetLoss({self.name or 'custom'}, reduction={self.reduction})"


def make_loss(
    kind: str,
    labels: Sequence[int],
    num_classes: int,
    annotations: Optional[SampleAnnotations] = None,
    reduction: str = "sum",
) -> SoftTargetLoss:
    """Build a loss provider.

    ``kind``: ``ce`` (true labels), ``distill`` (original model outputs as
    soft targets), or a PW variant name (``full``, ``weights_only``,
    ``soft_labels_only``, ``plain_ce``), which need ``annotations``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if kind == "ce":
        return SoftTargetLoss(np.eye(num_classes)[labels], None, reduction, "ce")
    if annotations is None:
        raise ValueError(f"loss kind {kind!r} needs annotations from the original model")
    if kind == "distill":
        return SoftTargetLoss(annotations.orig_probs, None, reduction, "distill")
    if kind not in VARIANTS:
        raise ValueError(f"unknown loss kind {kind!r}")
    targets, weights = _targets_and_weights(annotations, np.arange(len(annotations)), kind)
    return SoftTargetLoss(targets, weights, reduction, f"pw:{kind}")


def export_annotations_csv(annotations: SampleAnnotations, path, sample_ids=None) -> None:
    ids = list(range(len(annotations))) if sample_ids is None else list(sample_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "prob_true_class", "weight", "correct_flag"])
        for sid, p, wt, ok in zip(ids, annotations.prob_true_class, annotations.weight, annotations.correct):
            w.writerow([sid, repr(float(p)), repr(float(wt)), int(ok)])
