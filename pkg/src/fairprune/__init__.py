"""Fairness-aware structured filter pruning on a small numpy autodiff engine.

Modules:

* :mod:`fairprune.tensor`: tape-based reverse-mode autodiff over numpy arrays;
* :mod:`fairprune.models`: declarative mini CNNs (plain and residual presets);
* :mod:`fairprune.prune_graph`: coupled filter groups, masks, structural
  rebuilds and FLOPS counting;
* :mod:`fairprune.fair_loss`: the performance-weighted loss;
* :mod:`fairprune.pruners`: bottleneck-gate, Taylor and random pruners;
* :mod:`fairprune.optim` and :mod:`fairprune.metrics`: training and ROC-AUC evaluation;
* :mod:`fairprune.data`: biased synthetic images and manifest datasets;
* :mod:`fairprune.config`, :mod:`fairprune.harness`, :mod:`fairprune.cli`: experiments.
"""

__version__ = "0.1.0"
