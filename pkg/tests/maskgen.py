"""Random valid prune masks for property tests."""

import numpy as np

from fairprune.prune_graph import MIN_KEEP, mask_from_removed


def random_valid_mask(graph, rng, max_fraction=0.9):
    """Remove a random subset of each prunable space's groups, keeping >= MIN_KEEP."""
    removed = []
    for sp in range(len(graph.spaces)):
        groups = graph.groups_of_space(sp)
        if not groups[0].prunable:
            continue
        limit = min(len(groups) - MIN_KEEP, int(np.ceil(max_fraction * len(groups))))
        n = int(rng.integers(0, limit + 1))
        removed += [groups[i].index for i in rng.choice(len(groups), size=n, replace=False)]
    return mask_from_removed(graph, removed)
