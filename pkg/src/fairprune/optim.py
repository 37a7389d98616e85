"""AdamW with decoupled weight decay, cosine annealing, and a minibatch trainer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import ModelState, as_tensors, run
from .prune_graph import DependencyGraph, build_dependency_graph, zero_masked
from .tensor import Tape

__all__ = [
    "AdamW",
    "LRSchedule",
    "TrainConfig",
    "loss_and_grads",
    "evaluate_loss",
    "train",
]


@dataclass
class AdamW:
    """AdamW over a flat ``{key: ndarray}`` parameter dict, updated in place.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the Adam step.
    """

    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float, lr_scale: Optional[dict] = None) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            eta = lr * (1.0 if lr_scale is None else lr_scale.get(key, 1.0))
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p *= 1.0 - eta * self.weight_decay
            p -= eta * update


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "cosine"
    base_lr: float = 1e-3
    t_max: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    def lr(self, t: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        t = min(max(t, 0), self.t_max)
        return self.base_lr * (1.0 + math.cos(math.pi * t / self.t_max)) / 2.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 0.0
    schedule: str = "cosine"
    freeze_epochs: int = 0  # head-only epochs before the backbone unfreezes
    backbone_lr_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def loss_and_grads(state: ModelState, images: np.ndarray, idx, loss_fn, gates=None):
    """Forward + backward on one batch.

    Returns ``(loss_value, {(layer, name): grad}, trace, grads)`` where
    ``grads`` is the raw :class:`~fairprune.tensor.Gradients` lookup, useful for
    feature-map gradients.
    """
    idx = np.asarray(idx)
    params = as_tensors(state, requires_grad=True)
    with Tape() as tape:
        trace = run(state.spec, params, images[idx], gates)
        loss = loss_fn(trace.probs, idx)
    grads = tape.backward(loss)
    flat = {(k, n): grads[t] for k, v in params.items() for n, t in v.items()}
    return loss.item(), flat, trace, grads


def evaluate_loss(state: ModelState, images: np.ndarray, idx, loss_fn, batch_size: int = 256) -> float:
    """Sum of per-batch losses over ``idx`` (no gradients)."""
    idx = np.asarray(idx)
    params = as_tensors(state)
    total = 0.0
    for i in range(0, len(idx), batch_size):
        b = idx[i : i + batch_size]
        total += loss_fn(run(state.spec, params, images[b]).probs, b).item()
    return total


def _lr_scale(state: ModelState, epoch: int, config: TrainConfig) -> Optional[dict]:
    if config.freeze_epochs == 0 and config.backbone_lr_multiplier == 1.0:
        return None
    backbone = 0.0 if epoch < config.freeze_epochs else config.backbone_lr_multiplier
    return {(k, n): (1.0 if k == "head" else backbone) for k, v in state.params.items() for n in v}


def train(
    state: ModelState,
    images: np.ndarray,
    loss_fn: Callable,
    config: TrainConfig,
    train_idx=None,
    val_idx=None,
    mask: Optional[dict] = None,
    graph: Optional[DependencyGraph] = None,
    on_epoch: Optional[Callable] = None,
) -> ModelState:
    """Minibatch AdamW training; returns a new state.

    With ``val_idx`` the snapshot with the lowest end-of-epoch validation loss
    is returned (ties keep the earlier epoch). With ``mask`` the removed
    filters are re-zeroed after every step so pseudo-pruning is preserved.
    """
    images = np.asarray(images)
    train_idx = np.arange(len(images)) if train_idx is None else np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ValueError("cannot train on an empty dataset")
    if mask is not None:
        graph = graph or build_dependency_graph(state.spec)
    state = state.copy()
    if mask is not None:
        zero_masked(state.params, graph, mask)
    flat = state.flat()
    opt = AdamW(weight_decay=config.weight_decay)
    sched = LRSchedule(config.schedule, config.lr, config.epochs)
    rng = np.random.default_rng(config.seed)
    best, best_loss = None, math.inf
    for epoch in range(config.epochs):
        lr = sched.lr(epoch)
        scale = _lr_scale(state, epoch, config)
        order = train_idx[rng.permutation(len(train_idx))]
        for i in range(0, len(order), config.batch_size):
            batch = order[i : i + config.batch_size]
            _, grads, _, _ = loss_and_grads(state, images, batch, loss_fn)
            opt.step(flat, grads, lr, scale)
            if mask is not None:
                zero_masked(state.params, graph, mask)
        if val_idx is not None and len(val_idx):
            vl = evaluate_loss(state, images, val_idx, loss_fn)
            if vl < best_loss:
                best, best_loss = state.copy(), vl
        if on_epoch is not None:
            on_epoch(epoch, state)
    return best if best is not None else state
