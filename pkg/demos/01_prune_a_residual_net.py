"""Structured pruning of a small residual network, step by step.

Run with ``python demos/01_prune_a_residual_net.py``. Nothing is trained:
the point is to see how filters are coupled, how a mask becomes a smaller
network, and how FLOPS shrink.
"""

import numpy as np

from fairprune.models import as_tensors, build_model, preset, run
from fairprune.prune_graph import (
    build_dependency_graph,
    count_flops,
    mask_from_removed,
    pseudo_prune,
    speedup,
    structural_prune,
)

state = build_model(preset("mini-res"), seed=0)
print("layers:", [c.id for c in state.spec.conv_layers()])
print("parameters:", state.param_count())

# A residual add ties the channels of its two inputs together, so filters in
# those layers must be removed as a unit. The dependency graph finds these
# coupled channel spaces.
graph = build_dependency_graph(state.spec)
for space in graph.spaces:
    print("channel space:", space)
print("coupled groups:", len(graph.groups))

# Remove a few groups: two from the projected block, one from each inner conv.
removed = [
    graph.group_of("res2.proj", 0).index,
    graph.group_of("res2.proj", 1).index,
    graph.group_of("res1.conv1", 3).index,
    graph.group_of("res2.conv1", 5).index,
]
mask = mask_from_removed(graph, removed)

# Pseudo-pruning zeroes the removed filters but keeps every tensor shape.
# Structural pruning rebuilds a genuinely smaller network.
pseudo = pseudo_prune(state, mask, graph)
small_spec, small = structural_prune(state, mask, graph)
print("res2.proj weight:", state.params["res2.proj"]["weight"].shape, "->", small.params["res2.proj"]["weight"].shape)

x = np.random.default_rng(1).normal(size=(4,) + state.spec.input_shape)
a = run(state.spec, as_tensors(pseudo), x).logits.data
b = run(small_spec, as_tensors(small), x).logits.data
print("max logit difference, pseudo vs rebuilt:", np.abs(a - b).max())

before, after = count_flops(state.spec), count_flops(small_spec)
print(f"MACs {before.total} -> {after.total}, speedup {speedup(before, after):.3f}")
for layer, macs in after.per_layer.items():
    print(f"  {layer:12s} {before.per_layer[layer]:8d} -> {macs:8d}")
