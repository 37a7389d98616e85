"""Experiment orchestration: original training, the prune/rebuild/retrain
pipeline, trial matrices, composition-subset studies and component ablations.

Every study writes the same outputs into one directory:

``results.csv`` / ``results.json``
    one row per trial, per unpruned baseline and per aggregate (schema in
    :data:`BASE_COLUMNS` plus per-group columns, documented in the README);
``plotdata/*.csv``
    delta-AUC vs target speedup, one file per (method, variant, scope, group);
``logs/*.csv``
    the pruner's iteration log for every trial;
``annotations/*.csv``
    the per-sample weights computed by each original model;
``timings.csv``
    wall-clock seconds per trial, kept apart so ``results.csv`` stays
    byte-for-byte reproducible.

Seeds are derived as ``base_seed + trial``; the dataset itself is fixed by
``dataset.seed`` and shared by all trials.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .data import LabeledDataset, build_preset, load_manifest
from .fair_loss import annotate, export_annotations_csv, make_loss
from .metrics import EvalReport, evaluate
from .models import ModelState, build_model, load_state, preset, save_state
from .optim import train
from .prune_graph import build_dependency_graph, count_flops, pseudo_prune, speedup, structural_prune
from .pruners import TargetUnreachable, autobot_prune, random_prune, taylor_prune

__all__ = [
    "BASE_COLUMNS",
    "TrialResult",
    "StudyResult",
    "load_dataset",
    "train_original",
    "OriginalCache",
    "pruning_loss_kind",
    "retraining_loss_kind",
    "run_pipeline",
    "run_matrix",
    "run_subset_study",
    "run_ablation",
    "aggregate",
    "write_outputs",
]

BASE_COLUMNS = [
    "row_type",
    "subset",
    "method",
    "variant",
    "scope",
    "target_speedup",
    "trial",
    "seed",
    "status",
    "reason",
    "n_trials",
    "n_degenerate",
    "n_failed",
    "achieved_speedup",
    "achieved_speedup_std",
    "speedup_gap",
    "flops",
    "flops_std",
    "params",
    "params_std",
    "accuracy",
    "accuracy_std",
    "auc",
    "auc_std",
]
TAIL_COLUMNS = ["prune_loss", "retrain_loss", "mask_digest"]
_PW_KIND = {"pw": "full", "pw_weights_only": "weights_only", "pw_soft_labels_only": "soft_labels_only"}


# --------------------------------------------------------------------------
# data and original models
# --------------------------------------------------------------------------


def load_dataset(config: ExperimentConfig, preset_name: Optional[str] = None) -> LabeledDataset:
    """The configured dataset, or the named synthetic preset (subset studies)."""
    d = config.dataset
    if preset_name is None and d.manifest is not None:
        ds = load_manifest(d.manifest)
        for name in ("train", "test"):
            if name not in ds.splits:
                raise ValueError(f"manifest {d.manifest} has no '{name}' split")
        return ds
    return build_preset(
        preset_name or d.preset,
        seed=d.seed,
        val_fraction=d.val_fraction,
        test_per_cell=d.test_per_cell,
        amplitude=d.amplitude,
        noise_std=d.noise_std,
        minority_contrast=d.minority_contrast,
    )


def _val(ds: LabeledDataset):
    return ds.indices("val") if "val" in ds.splits else None


def train_original(config: ExperimentConfig, ds: LabeledDataset, seed: int) -> ModelState:
    """Train the unpruned model for one trial seed (mean CE, early stopping on val)."""
    spec = preset(config.model, ds.num_classes, tuple(ds.images.shape[1:]))
    loss = make_loss("ce", ds.labels, ds.num_classes, reduction=config.pw.reduction)
    recipe = dataclasses.replace(config.original, seed=seed)
    return train(build_model(spec, seed), ds.images, loss, recipe, ds.indices("train"), _val(ds))


def _original_key(config: ExperimentConfig, ds: LabeledDataset) -> str:
    blob = json.dumps(
        {
            "data": ds.provenance,
            "model": config.model,
            "original": dataclasses.asdict(config.original),
            "reduction": config.pw.reduction,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class OriginalCache:
    """Original models keyed by seed: trained on demand, optionally persisted.

    With ``directory`` set, models are stored as
    ``original_<confighash>_seed<s>.npz`` and reloaded by later runs.
    """

    def __init__(self, config: ExperimentConfig, ds: LabeledDataset, directory: Optional[Path] = None):
        self.config = config
        self.ds = ds
        self.directory = Path(directory) if directory is not None else None
        self.key = _original_key(config, ds)
        self._models: dict = {}

    def path(self, seed: int) -> Optional[Path]:
        if self.directory is None:
            return None
        return self.directory / f"original_{self.key}_seed{seed}.npz"

    def get(self, seed: int) -> ModelState:
        if seed not in self._models:
            p = self.path(seed)
            if p is not None and p.exists():
                self._models[seed] = load_state(p)
            else:
                self._models[seed] = train_original(self.config, self.ds, seed)
                if p is not None:
                    p.parent.mkdir(parents=True, exist_ok=True)
                    save_state(self._models[seed], p)
        return self._models[seed]

    def put(self, seed: int, state: ModelState) -> None:
        self._models[seed] = state
        p = self.path(seed)
        if p is not None and not p.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
            save_state(state, p)


# --------------------------------------------------------------------------
# single trial
# --------------------------------------------------------------------------


def pruning_loss_kind(method: str, variant: str) -> str:
    """Loss used while selecting filters.

    The gate pruner's plain objective matches the original model's outputs,
    so its CE arm uses ``distill``; the other pruners use true labels.
    """
    if variant == "ce":
        return "distill" if method == "autobot" else "ce"
    return _PW_KIND[variant]


def retraining_loss_kind(variant: str, scope: str) -> str:
    if variant != "ce" and scope == "pruning_and_retraining":
        return _PW_KIND[variant]
    return "ce"


@dataclass
class TrialResult:
    row: dict
    log: list = field(default_factory=list)
    mask: Optional[dict] = None
    state: Optional[ModelState] = None
    seconds: float = 0.0


def _mask_digest(mask: Optional[dict]) -> str:
    if mask is None:
        return ""
    h = hashlib.sha256()
    for k in sorted(mask):
        h.update(k.encode())
        h.update(np.asarray(mask[k], dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


def _metric_row(report: EvalReport, baseline: Optional[EvalReport]) -> dict:
    row = {"accuracy": report.accuracy, "auc": report.auc}
    for tag, gm in report.groups.items():
        row[f"auc_{tag}"] = gm.auc
        row[f"accuracy_{tag}"] = gm.accuracy
        base = baseline.groups.get(tag) if baseline is not None else None
        if base is not None and gm.auc is not None and base.auc is not None:
            row[f"delta_auc_{tag}"] = gm.auc - base.auc
        else:
            row[f"delta_auc_{tag}"] = None
    return row


def _test_report(state: ModelState, ds: LabeledDataset) -> EvalReport:
    te = ds.indices("test")
    return evaluate(state, ds.images[te], ds.labels[te], ds.groups[te])


def baseline_row(config: ExperimentConfig, ds: LabeledDataset, original: ModelState, trial: int, seed: int, subset: str = "") -> dict:
    report = _test_report(original, ds)
    flops = count_flops(original.spec)
    row = {
        "row_type": "baseline",
        "subset": subset,
        "method": "none",
        "variant": "",
        "scope": "",
        "target_speedup": 1.0,
        "trial": trial,
        "seed": seed,
        "status": "degenerate" if report.degenerate else "ok",
        "reason": "",
        "achieved_speedup": 1.0,
        "speedup_gap": 0.0,
        "flops": flops.total,
        "params": original.param_count(),
    }
    row.update(_metric_row(report, report))
    return row


def run_pipeline(
    config: ExperimentConfig,
    ds: LabeledDataset,
    original: ModelState,
    method: str,
    variant: str,
    target_speedup: float,
    seed: int,
    trial: int = 0,
    scope: Optional[str] = None,
    subset: str = "",
    baseline: Optional[EvalReport] = None,
) -> TrialResult:
    """One trial: annotate, prune to ``original FLOPS / target_speedup``,
    rebuild, retrain, evaluate on the test split.

    ``scope`` (default ``config.apply_pw_to``) decides whether PW variants
    also drive retraining. A pruner that cannot reach the target yields a
    row with ``status=failed`` instead of raising.
    """
    t0 = time.perf_counter()
    scope = scope or config.apply_pw_to
    pw = config.pw_for(method)
    prune_kind = pruning_loss_kind(method, variant)
    retrain_kind = retraining_loss_kind(variant, scope)
    row = {
        "row_type": "trial",
        "subset": subset,
        "method": method,
        "variant": variant,
        "scope": "" if variant == "ce" else scope,
        "target_speedup": float(target_speedup),
        "trial": trial,
        "seed": seed,
        "reason": "",
        "prune_loss": prune_kind if method != "random" else "",
        "retrain_loss": retrain_kind,
    }
    tr = ds.indices("train")
    graph = build_dependency_graph(original.spec)
    original_flops = count_flops(original.spec, graph=graph)
    target = original_flops.total / float(target_speedup)
    ann = annotate(original, ds.images, ds.labels, pw.theta, pw.gamma)

    try:
        if method == "random":
            result = random_prune(original.spec, graph, target, seed)
        else:
            loss = make_loss(prune_kind, ds.labels, ds.num_classes, ann, pw.reduction)
            if method == "taylor":
                cfg = dataclasses.replace(config.taylor, seed=seed)
                result = taylor_prune(original, ds.images, loss, cfg, target, tr, graph)
            else:
                cfg = dataclasses.replace(config.autobot, seed=seed)
                result = autobot_prune(original, ds.images, loss, cfg, target, tr, graph)
    except TargetUnreachable as exc:
        row.update(status="failed", reason=str(exc))
        return TrialResult(row, seconds=time.perf_counter() - t0)

    start = result.state if (config.keep_prune_time_training and result.state is not None) else original
    _, rebuilt = structural_prune(pseudo_prune(start, result.mask, graph), result.mask, graph)
    retrain_loss = make_loss(retrain_kind, ds.labels, ds.num_classes, ann, pw.reduction)
    retrained = train(rebuilt, ds.images, retrain_loss, dataclasses.replace(config.retrain, seed=seed), tr, _val(ds))

    pruned_flops = count_flops(retrained.spec)
    achieved = speedup(original_flops, pruned_flops)
    baseline = baseline or _test_report(original, ds)
    report = _test_report(retrained, ds)
    row.update(
        status="degenerate" if report.degenerate else "ok",
        achieved_speedup=achieved,
        speedup_gap=abs(achieved - float(target_speedup)),
        flops=pruned_flops.total,
        params=retrained.param_count(),
        mask_digest=_mask_digest(result.mask),
    )
    row.update(_metric_row(report, baseline))
    return TrialResult(row, result.log, result.mask, retrained, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# studies
# --------------------------------------------------------------------------


@dataclass
class StudyResult:
    rows: list  # trial, baseline and aggregate rows, in output order
    trials: list  # TrialResult objects (state dropped when run in workers)
    groups: list
    failed: int = 0


_WORKER: dict = {}


def _init_worker(config: ExperimentConfig, datasets: dict, originals: dict) -> None:
    _WORKER.update(config=config, datasets=datasets, originals=originals)


def _run_task(task: tuple) -> TrialResult:
    subset, method, variant, scope, speed, trial, seed = task
    ds = _WORKER["datasets"][subset]
    original, baseline = _WORKER["originals"][(subset, seed)]
    res = run_pipeline(_WORKER["config"], ds, original, method, variant, speed, seed, trial, scope, subset, baseline)
    res.state = None  # keep inter-process traffic small
    return res


def _train_task(args: tuple) -> ModelState:
    config, ds, seed = args
    return train_original(config, ds, seed)


def _map(fn, items: list, jobs: int, initargs: Optional[tuple] = None):
    if jobs <= 1 or len(items) <= 1:
        if initargs is not None:
            _init_worker(*initargs)
        return [fn(x) for x in items]
    kwargs = {"initializer": _init_worker, "initargs": initargs} if initargs is not None else {}
    with ProcessPoolExecutor(max_workers=jobs, **kwargs) as pool:
        return list(pool.map(fn, items))


def _run_study(config: ExperimentConfig, arms: list, datasets: dict, jobs: int, cache_dir: Optional[Path]):
    """``arms``: (subset, method, variant, scope, row_type) tuples."""
    seeds = config.seeds()
    originals, baseline_rows, audits = {}, [], {}
    for subset, ds in datasets.items():
        cache = OriginalCache(config, ds, cache_dir)
        missing = [s for s in seeds if cache.path(s) is None or not cache.path(s).exists()]
        for s, state in zip(missing, _map(_train_task, [(config, ds, s) for s in missing], jobs)):
            cache.put(s, state)
        for trial, seed in enumerate(seeds):
            orig = cache.get(seed)
            report = _test_report(orig, ds)
            originals[(subset, seed)] = (orig, report)
            row = baseline_row(config, ds, orig, trial, seed, subset)
            baseline_rows.append(row)
            audits[(subset, seed)] = annotate(orig, ds.images, ds.labels, config.pw.theta, config.pw.gamma)

    tasks, kinds = [], []
    for subset, method, variant, scope, row_type in arms:
        for speed in config.speedups:
            for trial, seed in enumerate(seeds):
                tasks.append((subset, method, variant, scope, float(speed), trial, seed))
                kinds.append(row_type)
    results = _map(_run_task, tasks, jobs, (config, datasets, originals))
    for res, kind in zip(results, kinds):
        res.row["row_type"] = kind

    groups = sorted({g for ds in datasets.values() for g in ds.group_tags})
    rows = []
    for subset in datasets:
        sub_base = [r for r in baseline_rows if r["subset"] == subset]
        rows += sub_base
        rows.append(aggregate(sub_base, groups, "baseline_aggregate"))
    for subset, method, variant, scope, row_type in arms:
        for speed in config.speedups:
            cell = [
                r.row
                for r in results
                if (r.row["subset"], r.row["method"], r.row["variant"], r.row["target_speedup"]) == (subset, method, variant, float(speed))
                and r.row["row_type"] == row_type
                and r.row["scope"] == ("" if variant == "ce" else scope or config.apply_pw_to)
            ]
            rows += cell
            rows.append(aggregate(cell, groups, "aggregate" if row_type == "trial" else f"{row_type}_aggregate"))
    failed = sum(1 for r in results if r.row["status"] == "failed")
    study = StudyResult(rows, results, groups, failed)
    study.audits = audits
    return study


def run_matrix(config: ExperimentConfig, out_dir=None, jobs: int = 1, ds: Optional[LabeledDataset] = None) -> StudyResult:
    """methods x variants x speedups x trials on the configured dataset."""
    ds = ds if ds is not None else load_dataset(config)
    arms = [("", m, v, None, "trial") for m in config.methods for v in config.variants]
    study = _run_study(config, arms, {"": ds}, jobs, _cache_dir(out_dir))
    if out_dir is not None:
        write_outputs(study, out_dir, config, {"": ds})
    return study


def run_subset_study(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> StudyResult:
    """The matrix repeated on each composition subset, rows tagged by subset."""
    if config.dataset.manifest is not None:
        raise ValueError("subset studies need a synthetic dataset source")
    datasets = {name: load_dataset(config, name) for name in config.subsets}
    arms = [(s, m, v, None, "trial") for s in config.subsets for m in config.methods for v in config.variants]
    study = _run_study(config, arms, datasets, jobs, _cache_dir(out_dir))
    study.metadata = {name: ds.metadata for name, ds in datasets.items()}
    if out_dir is not None:
        write_outputs(study, out_dir, config, datasets)
    return study


def run_ablation(config: ExperimentConfig, out_dir=None, jobs: int = 1, ds: Optional[LabeledDataset] = None) -> StudyResult:
    """PW components x application scopes for one base method.

    With ``ablation.include_ce_reference`` the plain arm runs under the same
    seeds and is emitted as ``reference`` rows, so paired masks can be
    compared via ``mask_digest``.
    """
    ds = ds if ds is not None else load_dataset(config)
    ab = config.ablation
    arms = [("", ab.method, v, s, "trial") for v in ab.variants for s in ab.scopes]
    if ab.include_ce_reference:
        arms.append(("", ab.method, "ce", None, "reference"))
    study = _run_study(config, arms, {"": ds}, jobs, _cache_dir(out_dir))
    if out_dir is not None:
        write_outputs(study, out_dir, config, {"": ds})
    return study


def _cache_dir(out_dir) -> Optional[Path]:
    return Path(out_dir) / "models" if out_dir is not None else None


# --------------------------------------------------------------------------
# aggregation and output
# --------------------------------------------------------------------------

_AGG_FIELDS = ["achieved_speedup", "flops", "params", "accuracy", "auc"]


def _group_fields(groups: list) -> list:
    return [f"{p}_{g}" for g in groups for p in ("auc", "delta_auc", "accuracy")]


def aggregate(rows: list, groups: list, row_type: str = "aggregate") -> dict:
    """Mean and sample std (ddof=1) over ``ok`` rows; std left blank for one trial.

    Degenerate and failed trials are excluded from the statistics but counted.
    """
    first = rows[0] if rows else {}
    ok = [r for r in rows if r["status"] == "ok"]
    out = {k: first.get(k, "") for k in ("subset", "method", "variant", "scope", "target_speedup")}
    out.update(
        row_type=row_type,
        trial="",
        seed=";".join(str(r["seed"]) for r in rows),
        status="ok" if ok else "failed",
        reason="" if ok else "no usable trial",
        n_trials=len(rows),
        n_degenerate=sum(r["status"] == "degenerate" for r in rows),
        n_failed=sum(r["status"] == "failed" for r in rows),
    )
    for key in _AGG_FIELDS + _group_fields(groups):
        vals = [r.get(key) for r in ok]
        vals = [float(v) for v in vals if v is not None and v != ""]
        out[key] = float(np.mean(vals)) if vals else None
        out[f"{key}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    if out.get("achieved_speedup") is not None and out["target_speedup"] != "":
        out["speedup_gap"] = abs(out["achieved_speedup"] - float(out["target_speedup"]))
    return out


def columns_for(groups: list) -> list:
    cols = list(BASE_COLUMNS)
    for g in groups:
        cols += [f"auc_{g}", f"auc_{g}_std", f"delta_auc_{g}", f"delta_auc_{g}_std", f"accuracy_{g}", f"accuracy_{g}_std"]
    return cols + TAIL_COLUMNS


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _slug(*parts) -> str:
    return "_".join(str(p).replace(".", "p") for p in parts if p not in ("", None))


def write_outputs(study: StudyResult, out_dir, config: ExperimentConfig, datasets: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    cols = columns_for(study.groups)

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in study.rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    with open(out / "results.json", "w") as fh:
        json.dump(
            {"config": config.to_dict(), "columns": cols, "rows": [{c: _fmt(r.get(c)) for c in cols} for r in study.rows]},
            fh,
            indent=1,
            sort_keys=True,
        )

    # plot series: delta AUC vs target speedup per (subset, method, variant, scope, group)
    series: dict = {}
    for r in study.rows:
        if not r["row_type"].endswith("aggregate") or r["row_type"] == "baseline_aggregate":
            continue
        for g in study.groups:
            key = (r["subset"], r["method"], r["variant"], r["scope"], g)
            series.setdefault(key, []).append(r)
    for key, rs in sorted(series.items()):
        g = key[-1]
        with open(out / "plotdata" / f"{_slug(*key)}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target_speedup", "achieved_speedup", "delta_auc_mean", "delta_auc_std", "n_used"])
            for r in sorted(rs, key=lambda r: r["target_speedup"]):
                used = r["n_trials"] - r["n_degenerate"] - r["n_failed"]
                w.writerow([_fmt(r["target_speedup"]), _fmt(r["achieved_speedup"]), _fmt(r[f"delta_auc_{g}"]), _fmt(r[f"delta_auc_{g}_std"]), used])

    for res in study.trials:
        r = res.row
        name = _slug(r["subset"], r["method"], r["variant"], r["scope"], f"x{r['target_speedup']}", f"t{r['trial']}")
        with open(out / "logs" / f"{name}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["iteration", "loss", "flops", "removed"], lineterminator="\n")
            w.writeheader()
            for entry in res.log:
                w.writerow({k: _fmt(v) for k, v in entry.items()})
    datasets = datasets or {}
    for (subset, seed), ann in getattr(study, "audits", {}).items():
        ids = datasets[subset].ids if subset in datasets else None
        export_annotations_csv(ann, out / "annotations" / f"{_slug(subset, f'seed{seed}')}.csv", ids)

    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "method", "variant", "scope", "target_speedup", "trial", "seconds"])
        for res in study.trials:
            r = res.row
            w.writerow([r["subset"], r["method"], r["variant"], r["scope"], _fmt(r["target_speedup"]), r["trial"], f"{res.seconds:.3f}"])
    return out


def resolve_out_dir(cli_value: Optional[str], default: str = "runs/latest") -> Path:
    """``FAIRPRUNE_OUT`` wins over ``--out``, which wins over the default."""
    env = os.environ.get("FAIRPRUNE_OUT")
    return Path(env or cli_value or default)
