"""Mask-producing pruners: bottleneck gates, Taylor importance, random.

All pruners take a loss provider ``loss_fn(probs, idx) -> scalar Tensor`` and
an absolute FLOPS target, and operate on coupled groups from
:mod:`fairprune.prune_graph`.

The bottleneck objective is this package's own formulation:

    loss(gated probs) + beta * relu(FLOPS(g) / target - 1) ** 2
                      + gamma * mean(g * (1 - g))

where ``FLOPS(g)`` replaces each layer's kept channel counts by sums of gate
values. It is not a copy of any published loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .models import ConvInfo, DenseInfo, ModelState, as_tensors, run
from .optim import AdamW
from .prune_graph import (
    MIN_KEEP,
    DependencyGraph,
    build_dependency_graph,
    count_flops,
    full_mask,
    mask_from_removed,
    validate_mask,
    zero_masked,
)
from .tensor import Tape, Tensor

__all__ = [
    "TargetUnreachable",
    "AutoBotConfig",
    "TaylorConfig",
    "PruneResult",
    "gated_flops",
    "autobot_prune",
    "raw_taylor_scores",
    "taylor_importance",
    "taylor_prune",
    "random_prune",
    "check_reachable",
]

GATE_INIT = 0.99


class TargetUnreachable(ValueError):
    """The FLOPS target cannot be met while keeping ``MIN_KEEP`` filters per layer."""


@dataclass(frozen=True)
class AutoBotConfig:
    learning_rate: float = 0.85
    batch_size: int = 64
    iterations: int = 200
    beta: float = 2.7
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.iterations, self.beta, self.gamma) <= 0:
            raise ValueError("AutoBot parameters must all be positive")


@dataclass(frozen=True)
class TaylorConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    prune_frequency: int = 5
    filters_per_prune: int = 1
    normalize: bool = True
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.prune_frequency < 1 or self.filters_per_prune < 1:
            raise ValueError("prune_frequency and filters_per_prune must be >= 1")


@dataclass
class PruneResult:
    mask: dict
    state: Optional[ModelState] = None
    log: list = field(default_factory=list)  # dict rows: iteration, loss, flops, removed
    batches: int = 0
    gates: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _space_groups(graph: DependencyGraph) -> dict:
    out: dict = {}
    for g in graph.groups:
        out.setdefault(g.space, []).append(g.index)
    return out


def check_reachable(graph: DependencyGraph, target_flops: float) -> None:
    """Raise :class:`TargetUnreachable` when even the narrowest legal mask is too big."""
    removable = []
    for sp, idxs in _space_groups(graph).items():
        groups = [graph.groups[i] for i in idxs]
        if groups[0].prunable:
            removable += idxs[MIN_KEEP:]
    narrow = mask_from_removed(graph, removable)
    report = count_flops(graph.spec, narrow, graph)
    if report.total > target_flops:
        layer = max(report.per_layer, key=report.per_layer.get)
        raise TargetUnreachable(
            f"target {target_flops:.0f} MACs unreachable: narrowest legal model needs {report.total} "
            f"(binding layer {layer} at {report.per_layer[layer]} MACs)"
        )


def _removable(graph: DependencyGraph, mask: dict, gi: int) -> bool:
    g = graph.groups[gi]
    if not g.prunable:
        return False
    conv_id, f = g.members[0]
    return bool(mask[conv_id][f]) and graph.kept_width(mask, g.space) > MIN_KEEP


def _remove(graph: DependencyGraph, mask: dict, gi: int) -> None:
    for conv_id, f in graph.groups[gi].members:
        mask[conv_id][f] = False


def _batches(rng: np.random.Generator, idx: np.ndarray, batch_size: int):
    while True:
        order = idx[rng.permutation(len(idx))]
        for i in range(0, len(order), batch_size):
            yield order[i : i + batch_size]


# --------------------------------------------------------------------------
# bottleneck gates
# --------------------------------------------------------------------------


def _layer_gates(graph: DependencyGraph, gate_values: Tensor) -> dict:
    """Map conv layer id -> per-filter gate Tensor (prunable spaces only)."""
    gates = {}
    for sp, idxs in _space_groups(graph).items():
        if not graph.groups[idxs[0]].prunable:
            continue
        vec = T.take(gate_values, idxs)
        for conv_id in graph.spaces[sp]:
            gates[conv_id] = vec
    return gates


def gated_flops(graph: DependencyGraph, gate_values: Tensor) -> Tensor:
    """MAC count with each layer's channel counts replaced by gate sums."""
    spaces = _space_groups(graph)
    width: dict = {}
    for sp, idxs in spaces.items():
        if graph.groups[idxs[0]].prunable:
            width[sp] = T.sum(T.take(gate_values, idxs))
        else:
            width[sp] = float(len(idxs))
    terms = []
    for s in graph.spec.plan:
        if isinstance(s, ConvInfo):
            cout = width[graph.producer_space[s.id]]
            sp_in = graph.input_space[s.id]
            cin = float(s.in_channels) if sp_in is None else width[sp_in]
            k = float(s.kernel * s.kernel * s.out_hw[0] * s.out_hw[1])
            terms.append(_times(cin, cout, k))
        elif isinstance(s, DenseInfo):
            sp_in = graph.input_space[s.id]
            fin = float(s.in_features) if sp_in is None else width[sp_in]
            terms.append(_times(fin, 1.0, float(s.units)))
    total = terms[0]
    for t in terms[1:]:
        total = _plus(total, t)
    return total if isinstance(total, Tensor) else Tensor(total)


def _times(a, b, k: float):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return T.scale(T.mul(a, b), k)
    if isinstance(a, Tensor):
        return T.scale(a, k * b)
    if isinstance(b, Tensor):
        return T.scale(b, k * a)
    return a * b * k


def _plus(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a + b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    return T.add(a, b)


def autobot_prune(
    state: ModelState,
    images: np.ndarray,
    loss_fn: Callable,
    config: AutoBotConfig,
    target_flops: float,
    train_idx=None,
    graph: Optional[DependencyGraph] = None,
) -> PruneResult:
    """Optimize per-group bottleneck gates on frozen weights, then threshold.

    After ``config.iterations`` gate updates, groups are removed in order of
    increasing gate value until the masked FLOPS first drops to the target.
    """
    graph = graph or build_dependency_graph(state.spec)
    original = count_flops(state.spec).total
    mask = full_mask(state.spec)
    if original <= target_flops:
        return PruneResult(mask, log=[{"iteration": 0, "loss": "", "flops": original, "removed": ""}])
    check_reachable(graph, target_flops)

    train_idx = np.arange(len(images)) if train_idx is None else np.asarray(train_idx)
    n_groups = len(graph.groups)
    logits = np.full(n_groups, math.log(GATE_INIT / (1 - GATE_INIT)))
    params = as_tensors(state)  # weights stay frozen
    opt = AdamW()
    rng = np.random.default_rng(config.seed)
    batches = _batches(rng, train_idx, config.batch_size)
    log = []
    for it in range(config.iterations):
        idx = next(batches)
        logit_t = Tensor(logits, requires_grad=True)
        with Tape() as tape:
            g = T.sigmoid(logit_t)
            trace = run(state.spec, params, images[idx], _layer_gates(graph, g))
            task = loss_fn(trace.probs, idx)
            flops = gated_flops(graph, g)
            over = T.relu(T.add(T.scale(flops, 1.0 / target_flops), Tensor(np.asarray(-1.0))))
            binar = T.mean(T.mul(g, T.add(T.scale(g, -1.0), Tensor(np.ones(n_groups)))))
            total = T.add(T.add(task, T.scale(T.mul(over, over), config.beta)), T.scale(binar, config.gamma))
        grads = tape.backward(total)
        opt.step({"logits": logits}, {"logits": grads[logit_t]}, config.learning_rate)
        log.append({"iteration": it + 1, "loss": total.item(), "flops": flops.item(), "removed": ""})

    gate_values = 1.0 / (1.0 + np.exp(-logits))
    removed = []
    order = sorted(range(n_groups), key=lambda i: (gate_values[i], i))
    for gi in order:
        if count_flops(state.spec, mask, graph).total <= target_flops:
            break
        if _removable(graph, mask, gi):
            _remove(graph, mask, gi)
            removed.append(gi)
    validate_mask(graph, mask)
    log.append({
        "iteration": config.iterations,
        "loss": "",
        "flops": count_flops(state.spec, mask, graph).total,
        "removed": " ".join(map(str, removed)),
    })
    return PruneResult(mask, log=log, batches=config.iterations, gates=gate_values)


# --------------------------------------------------------------------------
# Taylor importance
# --------------------------------------------------------------------------


def raw_taylor_scores(feature_maps: dict, feature_map_grads: dict) -> dict:
    """Per-filter ``|sum over batch and positions of grad * activation|``.

    This is exactly ``|dL/dg|`` for a multiplicative gate ``g = 1`` on the
    filter's feature map.
    """
    out = {}
    for layer, fmap in feature_maps.items():
        a = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
        g = feature_map_grads.get(layer)
        if g is None:
            raise ValueError(f"no gradient for feature map {layer}")
        if g.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} != feature map shape {a.shape} for {layer}")
        out[layer] = np.abs((g * a).sum(axis=(0, 2, 3)))
    return out


def taylor_importance(
    feature_maps: dict, feature_map_grads: dict, graph: DependencyGraph, normalize: bool = True, raw: Optional[dict] = None
) -> np.ndarray:
    """Coupled-group importance: per-layer L2-normalized filter scores summed over members.

    Pass precomputed (e.g. accumulated) per-layer scores as ``raw`` to skip
    the feature-map step.
    """
    raw = raw if raw is not None else raw_taylor_scores(feature_maps, feature_map_grads)
    scores = {}
    for layer, r in raw.items():
        if normalize:
            norm = float(np.sqrt((r * r).sum()))
            scores[layer] = r / norm if norm > 0 else np.zeros_like(r)
        else:
            scores[layer] = r
    out = np.zeros(len(graph.groups))
    for g in graph.groups:
        out[g.index] = sum(scores[cid][f] for cid, f in g.members)
    return out


def taylor_prune(
    state: ModelState,
    images: np.ndarray,
    loss_fn: Callable,
    config: TaylorConfig,
    target_flops: float,
    train_idx=None,
    graph: Optional[DependencyGraph] = None,
) -> PruneResult:
    """Alternate ``prune_frequency`` training batches with removing the
    ``filters_per_prune`` least important groups, until FLOPS <= target."""
    graph = graph or build_dependency_graph(state.spec)
    mask = full_mask(state.spec)
    flops = count_flops(state.spec).total
    if flops <= target_flops:
        return PruneResult(mask, state.copy(), [{"iteration": 0, "loss": "", "flops": flops, "removed": ""}])
    check_reachable(graph, target_flops)

    train_idx = np.arange(len(images)) if train_idx is None else np.asarray(train_idx)
    state = state.copy()
    flat = state.flat()
    opt = AdamW(weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    batches = _batches(rng, train_idx, config.batch_size)
    log, used, step = [], 0, 0
    while flops > target_flops:
        acc = {c.id: np.zeros(c.filters) for c in state.spec.conv_layers()}
        losses = []
        for _ in range(config.prune_frequency):
            idx = next(batches)
            params = {k: {n: Tensor(a, requires_grad=True) for n, a in v.items()} for k, v in state.params.items()}
            with Tape() as tape:
                trace = run(state.spec, params, images[idx])
                loss = loss_fn(trace.probs, idx)
            grads = tape.backward(loss)
            fm_grads = {k: grads[t] for k, t in trace.feature_maps.items()}
            for k, r in raw_taylor_scores(trace.feature_maps, fm_grads).items():
                acc[k] += r
            opt.step(flat, {(k, n): grads[t] for k, v in params.items() for n, t in v.items()}, config.learning_rate)
            zero_masked(state.params, graph, mask)
            losses.append(loss.item())
            used += 1
        scores = taylor_importance(None, None, graph, config.normalize, raw=acc)
        removed = []
        for gi in sorted(range(len(graph.groups)), key=lambda i: (scores[i], i)):
            if len(removed) == config.filters_per_prune or flops <= target_flops:
                break
            if _removable(graph, mask, gi):
                _remove(graph, mask, gi)
                removed.append(gi)
                flops = count_flops(state.spec, mask, graph).total
        if not removed:
            raise TargetUnreachable("no removable group left before reaching the FLOPS target")
        zero_masked(state.params, graph, mask)
        step += 1
        log.append({"iteration": step, "loss": float(np.mean(losses)), "flops": flops, "removed": " ".join(map(str, removed))})
    validate_mask(graph, mask)
    return PruneResult(mask, state, log, used)


# --------------------------------------------------------------------------
# random
# --------------------------------------------------------------------------


def random_prune(spec, graph: Optional[DependencyGraph], target_flops: float, seed: int) -> PruneResult:
    """Remove uniformly chosen eligible groups until FLOPS <= target."""
    graph = graph or build_dependency_graph(spec)
    mask = full_mask(spec)
    flops = count_flops(spec).total
    log = [{"iteration": 0, "loss": "", "flops": flops, "removed": ""}]
    if flops <= target_flops:
        return PruneResult(mask, log=log)
    check_reachable(graph, target_flops)
    rng = np.random.default_rng(seed)
    order = rng.permutation([g.index for g in graph.groups if g.prunable])
    removed = []
    for gi in order.tolist():
        if flops <= target_flops:
            break
        if _removable(graph, mask, gi):
            _remove(graph, mask, gi)
            removed.append(gi)
            flops = count_flops(spec, mask, graph).total
            log.append({"iteration": len(removed), "loss": "", "flops": flops, "removed": str(gi)})
    if flops > target_flops:
        raise TargetUnreachable("random order exhausted eligible groups before the target")
    return PruneResult(mask, log=log)
