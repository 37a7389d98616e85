"""Dependency-aware structured filter pruning and FLOPS accounting.

Filters whose outputs meet in an elementwise add (residual joins, including
identity skips and projections) share one *channel space*. Channel ``c`` of a
space is a coupled group: all producer filters writing that channel are kept
or removed together, and every consumer loses input channel ``c``.

FLOPS are counted as multiply-accumulates (MACs); pooling, activations and
adds cost nothing. Only ratios between reports are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import (
    AddInfo,
    Conv,
    ConvInfo,
    DenseInfo,
    ModelSpec,
    ModelState,
    PoolInfo,
    ResidualBlock,
)

__all__ = [
    "MIN_KEEP",
    "MaskError",
    "Group",
    "DependencyGraph",
    "FlopsReport",
    "build_dependency_graph",
    "full_mask",
    "mask_from_removed",
    "validate_mask",
    "pseudo_prune",
    "zero_masked",
    "structural_prune",
    "count_flops",
    "speedup",
]

MIN_KEEP = 1


class MaskError(ValueError):
    """Raised for masks that break coupling or leave a layer too narrow."""


@dataclass(frozen=True)
class Group:
    index: int
    space: int
    channel: int
    members: tuple  # ((conv_id, filter_index), ...)
    prunable: bool = True  # False when the channel is tied to the network input by a skip


@dataclass
class DependencyGraph:
    spec: ModelSpec
    groups: list
    spaces: list  # per space: ordered producer conv ids
    space_width: list
    consumers: dict  # space index -> [(layer_id, kind)] kind in {"conv", "dense"}
    producer_space: dict  # conv id -> space index
    input_space: dict  # conv/dense id -> space index or None (network input / hidden dense)
    edges: list = field(default_factory=list)  # (producer tensor id, consumer layer id)

    def groups_of_space(self, space: int) -> list:
        return [g for g in self.groups if g.space == space]

    def group_of(self, conv_id: str, filter_index: int) -> Group:
        s = self.producer_space[conv_id]
        return self.groups[self._offset[s] + filter_index]

    def __post_init__(self):
        self._offset = {}
        for g in self.groups:
            self._offset.setdefault(g.space, g.index)

    def kept_width(self, mask: dict, space: int) -> int:
        conv_id = self.spaces[space][0]
        return int(np.count_nonzero(mask[conv_id]))


def build_dependency_graph(spec: ModelSpec) -> DependencyGraph:
    parent: dict = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    parent["input"] = "input"
    edges = []
    for s in spec.plan:
        parent[s.id] = s.id
        if isinstance(s, AddInfo):
            union(s.inputs[0], s.inputs[1])
            union(s.inputs[0], s.id)
            edges += [(s.inputs[0], s.id), (s.inputs[1], s.id)]
        elif isinstance(s, PoolInfo):
            union(s.source, s.id)
            edges.append((s.source, s.id))
        else:
            edges.append((s.source, s.id))

    convs = spec.conv_layers()
    root_index: dict = {}
    spaces: list = []
    widths: list = []
    for c in convs:
        r = find(c.id)
        if r not in root_index:
            root_index[r] = len(spaces)
            spaces.append([])
            widths.append(c.filters)
        spaces[root_index[r]].append(c.id)

    groups = []
    for si, members in enumerate(spaces):
        tied = find(members[0]) == find("input")
        for ch in range(widths[si]):
            groups.append(Group(len(groups), si, ch, tuple((m, ch) for m in members), not tied))

    producer_space = {c.id: root_index[find(c.id)] for c in convs}
    consumers: dict = {i: [] for i in range(len(spaces))}
    input_space: dict = {}
    for s in spec.plan:
        if isinstance(s, (ConvInfo, DenseInfo)):
            src_space = root_index.get(find(s.source))
            input_space[s.id] = src_space
            if src_space is not None:
                consumers[src_space].append((s.id, "conv" if isinstance(s, ConvInfo) else "dense"))
    return DependencyGraph(spec, groups, [tuple(x) for x in spaces], widths, consumers, producer_space, input_space, edges)


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


def full_mask(spec: ModelSpec) -> dict:
    return {c.id: np.ones(c.filters, dtype=bool) for c in spec.conv_layers()}


def mask_from_removed(graph: DependencyGraph, removed) -> dict:
    """Build a mask removing the given group indices."""
    mask = full_mask(graph.spec)
    for gi in removed:
        for conv_id, f in graph.groups[gi].members:
            mask[conv_id][f] = False
    return mask


def removed_groups(graph: DependencyGraph, mask: dict) -> list:
    return [g.index for g in graph.groups if not mask[g.members[0][0]][g.members[0][1]]]


def validate_mask(graph: DependencyGraph, mask: dict, min_keep: int = MIN_KEEP) -> None:
    for c in graph.spec.conv_layers():
        if c.id not in mask:
            raise MaskError(f"mask has no entry for layer {c.id}")
        m = np.asarray(mask[c.id])
        if m.shape != (c.filters,):
            raise MaskError(f"mask for {c.id} has shape {m.shape}, expected ({c.filters},)")
        if int(np.count_nonzero(m)) < min_keep:
            raise MaskError(f"mask keeps fewer than {min_keep} filter(s) in layer {c.id}")
    for g in graph.groups:
        bits = {bool(mask[cid][f]) for cid, f in g.members}
        if len(bits) > 1:
            raise MaskError(f"mask splits coupled group {g.index} ({', '.join(f'{a}[{b}]' for a, b in g.members)})")
        if not g.prunable and bits == {False}:
            raise MaskError(f"group {g.index} is tied to the network input and cannot be removed")


def _kept_in(graph: DependencyGraph, mask: dict, layer_id: str, default: int) -> np.ndarray:
    sp = graph.input_space.get(layer_id)
    if sp is None:
        return np.ones(default, dtype=bool)
    return np.asarray(mask[graph.spaces[sp][0]], dtype=bool)


# --------------------------------------------------------------------------
# pruning
# --------------------------------------------------------------------------


def pseudo_prune(state: ModelState, mask: dict, graph: Optional[DependencyGraph] = None) -> ModelState:
    """Zero removed filters and the matching consumer input channels; shapes unchanged."""
    graph = graph or build_dependency_graph(state.spec)
    validate_mask(graph, mask)
    out = state.copy()
    zero_masked(out.params, graph, mask)
    return out


def zero_masked(params: dict, graph: DependencyGraph, mask: dict) -> None:
    """In-place version of :func:`pseudo_prune` on a raw parameter dict (no validation)."""
    spec = graph.spec
    for c in spec.conv_layers():
        drop = ~np.asarray(mask[c.id], dtype=bool)
        if drop.any():
            for arr in params[c.id].values():
                arr[drop] = 0.0
    for s in spec.plan:
        if isinstance(s, (ConvInfo, DenseInfo)):
            keep_in = _kept_in(graph, mask, s.id, s.in_channels if isinstance(s, ConvInfo) else s.in_features)
            if not keep_in.all():
                params[s.id]["weight"][:, ~keep_in] = 0.0


def structural_prune(state: ModelState, mask: dict, graph: Optional[DependencyGraph] = None):
    """Physically remove masked filters. Returns ``(new_spec, new_state)``."""
    spec = state.spec
    graph = graph or build_dependency_graph(spec)
    validate_mask(graph, mask)

    kept = {c.id: int(np.count_nonzero(mask[c.id])) for c in spec.conv_layers()}
    ids = {s.id for s in spec.plan}

    def rebuild(pin: bool) -> ModelSpec:
        layers = []
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Conv):
                layers.append(_with_filters(layer, kept[f"conv{i}"]))
            elif isinstance(layer, ResidualBlock):
                proj = f"res{i}.proj" in ids if pin else layer.projection
                layers.append(
                    ResidualBlock(
                        _with_filters(layer.conv1, kept[f"res{i}.conv1"]),
                        _with_filters(layer.conv2, kept[f"res{i}.conv2"]),
                        proj,
                    )
                )
            else:
                layers.append(layer)
        return ModelSpec(tuple(layers), spec.input_shape)

    # keep the original projection setting unless narrowing would flip the
    # automatic decision, in which case pin it explicitly
    new_spec = rebuild(pin=False)
    if {s.id for s in new_spec.plan} != ids:
        new_spec = rebuild(pin=True)

    params = {}
    for s in spec.plan:
        if isinstance(s, ConvInfo):
            keep_out = np.asarray(mask[s.id], dtype=bool)
            keep_in = _kept_in(graph, mask, s.id, s.in_channels)
            p = state.params[s.id]
            params[s.id] = {
                n: (a[keep_out][:, keep_in].copy() if n == "weight" else a[keep_out].copy()) for n, a in p.items()
            }
        elif isinstance(s, DenseInfo):
            keep_in = _kept_in(graph, mask, s.id, s.in_features)
            p = state.params[s.id]
            params[s.id] = {"weight": p["weight"][:, keep_in].copy(), "bias": p["bias"].copy()}
    return new_spec, ModelState(new_spec, params, state.seed)


def _with_filters(conv: Conv, filters: int) -> Conv:
    return Conv(filters, conv.kernel, conv.stride, conv.padding, conv.activation, conv.affine)


# --------------------------------------------------------------------------
# FLOPS
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopsReport:
    per_layer: dict  # layer id -> MACs
    per_layer_params: dict
    total: int
    params_total: int


def count_flops(spec: ModelSpec, mask: Optional[dict] = None, graph: Optional[DependencyGraph] = None) -> FlopsReport:
    if mask is not None:
        graph = graph or build_dependency_graph(spec)
    macs, params = {}, {}
    for s in spec.plan:
        if isinstance(s, ConvInfo):
            cout = s.filters if mask is None else int(np.count_nonzero(mask[s.id]))
            cin = s.in_channels if mask is None else int(_kept_in(graph, mask, s.id, s.in_channels).sum())
            k2 = s.kernel * s.kernel
            macs[s.id] = k2 * cin * cout * s.out_hw[0] * s.out_hw[1]
            params[s.id] = cout * (k2 * cin + 1 + (2 if s.affine else 0))
        elif isinstance(s, DenseInfo):
            fin = s.in_features if mask is None else int(_kept_in(graph, mask, s.id, s.in_features).sum())
            macs[s.id] = fin * s.units
            params[s.id] = s.units * (fin + 1)
    return FlopsReport(macs, params, int(sum(macs.values())), int(sum(params.values())))


def speedup(original: FlopsReport, pruned: FlopsReport) -> float:
    """Theoretical speedup: original FLOPS / pruned FLOPS."""
    o = original.total if isinstance(original, FlopsReport) else float(original)
    p = pruned.total if isinstance(pruned, FlopsReport) else float(pruned)
    if p <= 0:
        raise ValueError("pruned model has zero FLOPS")
    return o / p
