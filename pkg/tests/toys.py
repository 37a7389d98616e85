"""Small hand-built problems shared by the pruner tests and the acceptance suite."""

import numpy as np

from fairprune.fair_loss import make_loss
from fairprune.models import Conv, GlobalAvgPool, ModelSpec, SoftmaxHead, build_model, forward
from fairprune.prune_graph import build_dependency_graph, mask_from_removed, pseudo_prune
from fairprune.tensor import Tensor
from oracles import best_masks_by_enumeration

SIGNAL_FILTER = 0


def planted_toy(seed, n=128):
    """One conv layer with four filters; only filter 0 sees the class signal.

    Input channel 0 carries a class-dependent brightness offset, channel 1 is
    pure noise. Filter 0 reads channel 0 through a centre tap, filters 1-3 read
    channel 1 with random kernels. The head relies mostly on filter 0.
    Returns ``(state, images, labels)``.
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec((Conv(4, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (2, 8, 8))
    state = build_model(spec, seed)
    w = np.zeros((4, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1:, 1] = rng.normal(0, 0.5, size=(3, 3, 3))
    state.params["conv0"]["weight"][...] = w
    state.params["conv0"]["bias"][...] = 0.0
    head = np.zeros((2, 4))
    head[1, 0], head[0, 0] = 4.0, -4.0
    head[:, 1:] = rng.normal(0, 0.3, size=(2, 3))
    state.params["head"]["weight"][...] = head
    state.params["head"]["bias"][...] = [1.0, -1.0]

    labels = np.arange(n) % 2
    images = rng.normal(0, 0.3, size=(n, 2, 8, 8))
    images[:, 0] += np.where(labels == 1, 0.6, 0.0)[:, None, None]
    return state, images, labels


def toy_loss(labels):
    return make_loss("ce", labels, 2)


def enumerate_best_kept(state, images, labels, keep):
    """Brute-force every ``keep``-subset of the toy's filters by pseudo-pruned loss."""
    graph = build_dependency_graph(state.spec)
    loss = toy_loss(labels)
    idx = np.arange(len(labels))

    def loss_of_kept(kept):
        removed = [g.index for g in graph.groups if g.members[0][1] not in kept]
        probs = forward(pseudo_prune(state, mask_from_removed(graph, removed), graph), images)
        return loss(Tensor(probs), idx).item()

    return best_masks_by_enumeration(4, keep, loss_of_kept)
