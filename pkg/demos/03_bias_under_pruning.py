"""Does pruning hurt an under-represented group more, and does PW help?

Run with ``python demos/03_bias_under_pruning.py``. It takes about a minute
on one CPU core. With a single trial the PW-vs-CE difference is mostly seed
noise. The acceptance suite runs three trials over 2x, 4x and 8x.

The "biased" preset has a majority group A (95% of training images) and a
minority group B whose glyphs are drawn darker than the background. Both groups get equal
shares of the test set. A small CNN is trained on the biased data, pruned
with Taylor importance at a fixed target speedup, and retrained. The plain
arm uses cross-entropy. The PW arm uses the performance-weighted loss in
both phases. The change in per-group AUC relative to the unpruned model is
printed for each.
"""

import dataclasses
from pathlib import Path

from fairprune.config import load_config
from fairprune.harness import run_matrix

# The full bias experiment, narrowed to one trial at 8x.
config = load_config(Path(__file__).resolve().parent.parent / "configs" / "bias_desk.toml")
config = dataclasses.replace(config, name="demo-bias", speedups=(8.0,), trials=1)

study = run_matrix(config)
baseline = next(r for r in study.rows if r["row_type"] == "baseline")
print(f"unpruned model: AUC A {baseline['auc_A']:.3f}, AUC B {baseline['auc_B']:.3f}")
for row in study.rows:
    if row["row_type"] != "trial":
        continue
    print(
        f"{row['variant']:3s} at {row['achieved_speedup']:.2f}x:"
        f" delta AUC A {row['delta_auc_A']:+.3f}, delta AUC B {row['delta_auc_B']:+.3f}"
    )
