"""Command-line entry point.

    fairprune train|prune|eval|matrix|subsets|ablation --config FILE
              [--out DIR] [--jobs N] [--seed S]

The exit status is 0 when no trial failed, 1 when at least one did, and 2
for usage or configuration errors. ``FAIRPRUNE_OUT`` overrides ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import (
    OriginalCache,
    StudyResult,
    _fmt,
    _test_report,
    aggregate,
    baseline_row,
    load_dataset,
    resolve_out_dir,
    run_ablation,
    run_matrix,
    run_pipeline,
    run_subset_study,
    write_outputs,
)
from .models import load_state, save_state

log = logging.getLogger("fairprune")

COMMANDS = ("train", "prune", "eval", "matrix", "subsets", "ablation")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairprune", description="Fairness-aware structured pruning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--out", default=None, help="output directory (FAIRPRUNE_OUT takes precedence)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--seed", type=int, default=None, help="override the config's base seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _cmd_train(cfg, out: Path) -> int:
    ds = load_dataset(cfg)
    cache = OriginalCache(cfg, ds, out / "models")
    rows = []
    for trial, seed in enumerate(cfg.seeds()):
        state = cache.get(seed)
        rows.append(baseline_row(cfg, ds, state, trial, seed))
        log.info("original seed %d: test AUC %s", seed, rows[-1]["auc"])
    groups = sorted(ds.group_tags)
    study = StudyResult(rows + [aggregate(rows, groups, "baseline_aggregate")], [], groups)
    write_outputs(study, out, cfg, {"": ds})
    return 0


def _cmd_prune(cfg, out: Path) -> int:
    """One trial: first method, first variant, first speedup, base seed."""
    ds = load_dataset(cfg)
    seed = cfg.base_seed
    original = OriginalCache(cfg, ds, out / "models").get(seed)
    method, variant, speed = cfg.methods[0], cfg.variants[0], cfg.speedups[0]
    res = run_pipeline(cfg, ds, original, method, variant, speed, seed)
    if res.state is not None:
        save_state(res.state, out / "models" / f"pruned_{method}_{variant}_x{speed:g}_seed{seed}.npz")
    groups = sorted(ds.group_tags)
    study = StudyResult([baseline_row(cfg, ds, original, 0, seed), res.row], [res], groups, int(res.row["status"] == "failed"))
    write_outputs(study, out, cfg, {"": ds})
    if res.row["status"] == "failed":
        log.error("trial failed: %s", res.row["reason"])
    return 1 if study.failed else 0


def _cmd_eval(cfg, out: Path) -> int:
    """Evaluate every saved model under ``<out>/models`` on the test split."""
    ds = load_dataset(cfg)
    paths = sorted((out / "models").glob("*.npz"))
    if not paths:
        log.error("no saved models under %s", out / "models")
        return 1
    groups = sorted(ds.group_tags)
    cols = ["model", "params", "accuracy", "auc", "degenerate"] + [f"auc_{g}" for g in groups]
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for p in paths:
            state = load_state(p)
            rep = _test_report(state, ds)
            w.writerow(
                [p.name, state.param_count(), _fmt(rep.accuracy), _fmt(rep.auc), int(rep.degenerate)]
                + [_fmt(rep.groups[g].auc) if g in rep.groups else "" for g in groups]
            )
    return 0


def _report(study: StudyResult) -> int:
    if study.failed:
        log.error("%d trial(s) failed", study.failed)
    return 1 if study.failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("fairprune: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"fairprune: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, base_seed=args.seed)
    out = resolve_out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "train":
        return _cmd_train(cfg, out)
    if args.command == "prune":
        return _cmd_prune(cfg, out)
    if args.command == "eval":
        return _cmd_eval(cfg, out)
    if args.command == "matrix":
        return _report(run_matrix(cfg, out, args.jobs))
    if args.command == "subsets":
        return _report(run_subset_study(cfg, out, args.jobs))
    return _report(run_ablation(cfg, out, args.jobs))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
