"""How the performance-weighted (PW) loss treats each training sample.

Run with ``python demos/02_performance_weighted_loss.py``.

The original, unpruned model scores every training sample once. Samples it
got right with low confidence, or got wrong, receive larger weights. Wrong
samples also have their target replaced by the one-hot true label.
"""

import numpy as np

from fairprune.fair_loss import PWConfig, SampleAnnotations, compute_weight, correct_soft_label, pw_loss
from fairprune.tensor import Tensor

# Weight as a function of the original model's probability for the true class.
p = np.array([0.0, 0.25, 0.5, 0.75, 0.9, 1.0])
for theta, gamma in [(0.3, 1.0), (0.8, 0.5), (0.1, 3.0)]:
    print(f"theta={theta} gamma={gamma}:", np.round(compute_weight(p, theta, gamma), 3))

# Soft-label correction: a correct prediction keeps its distribution, a wrong
# one becomes one-hot on the true class.
print("correct, kept:      ", correct_soft_label([0.7, 0.3], 0))
print("wrong, corrected:   ", correct_soft_label([0.4, 0.6], 0))

# Three samples scored by the original model. The second is barely right, the
# third is wrong.
original = np.array([[0.95, 0.05], [0.55, 0.45], [0.30, 0.70]])
labels = np.array([0, 0, 0])
ann = SampleAnnotations.from_probs(original, labels, theta=0.3, gamma=1.0)
print("weights:", np.round(ann.weight, 3))
print("targets:\n", ann.corrected_soft_label)

# The pruned model's outputs are compared against those targets.
pruned = Tensor(np.array([[0.9, 0.1], [0.5, 0.5], [0.4, 0.6]]))
for variant in ("full", "weights_only", "soft_labels_only", "plain_ce"):
    value = pw_loss(ann, pruned, PWConfig(0.3, 1.0, variant=variant)).item()
    print(f"{variant:17s} loss {value:.4f}")
