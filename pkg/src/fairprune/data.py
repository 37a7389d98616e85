"""Synthetic biased image datasets, splits, and PGM/PPM manifest I/O.

Synthetic images are single-channel squares on a mid-gray (0.5) background.
Each class owns an 8x8 glyph with disjoint pixel support (so the class
patterns are mutually orthogonal). Majority-group samples draw the glyph at
full amplitude; minority-group samples draw it at ``minority_contrast`` times
that amplitude (negative values invert it), shifted by a few pixels. The
minority therefore carries a weaker or differently signed version of the
class signal, which is what lets filter pruning hurt it selectively.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "SynthConfig",
    "LabeledDataset",
    "ManifestError",
    "class_glyphs",
    "generate",
    "split",
    "concat",
    "load_manifest",
    "export_manifest",
    "build_preset",
    "DATA_PRESETS",
]

MANIFEST_COLUMNS = ("path", "label", "group", "split")


class ManifestError(ValueError):
    pass


def class_glyphs(num_classes: int) -> np.ndarray:
    """``[K, 8, 8]`` binary glyphs with pairwise-disjoint support (K <= 3)."""
    if not 2 <= num_classes <= 3:
        raise ValueError("synthetic data supports 2 or 3 classes")
    plus = np.zeros((8, 8))
    plus[3:5, :] = 1
    plus[:, 3:5] = 1
    ring = np.zeros((8, 8))
    ring[[0, 7], :] = 1
    ring[:, [0, 7]] = 1
    ring[plus > 0] = 0
    dots = np.zeros((8, 8))
    for r, c in [(1, 1), (2, 2), (5, 5), (6, 6), (1, 6), (2, 5), (5, 2), (6, 1)]:
        dots[r, c] = 1
    return np.stack([plus, ring, dots][:num_classes])


@dataclass(frozen=True)
class SynthConfig:
    """Composition and rendering of a synthetic dataset.

    ``counts`` maps ``(class_index, group_tag)`` to a sample count.
    """

    counts: dict
    num_classes: int = 2
    image_size: int = 16
    amplitude: float = 0.3
    noise_std: float = 0.15
    minority_contrast: float = -1.0  # minority glyph amplitude relative to the majority's
    offset: int = 2
    shift: int = 4
    minority_groups: tuple = ("B",)
    seed: int = 0

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("sample counts must be >= 0")
        classes = {c for (c, _), n in self.counts.items() if n > 0}
        if len(classes) < 2:
            raise ValueError("at least two classes need samples")
        if any(not 0 <= c < self.num_classes for c, _ in self.counts):
            raise ValueError("count keys reference a class outside num_classes")
        if self.offset + self.shift + 8 > self.image_size:
            raise ValueError("shifted glyph does not fit inside the image")

    @property
    def groups(self) -> tuple:
        return tuple(sorted({g for _, g in self.counts}))

    def digest(self) -> str:
        payload = json.dumps(
            {
                "counts": sorted([c, g, n] for (c, g), n in self.counts.items()),
                "k": self.num_classes,
                "size": self.image_size,
                "amp": self.amplitude,
                "noise": self.noise_std,
                "minority_contrast": self.minority_contrast,
                "offset": self.offset,
                "shift": self.shift,
                "minority": list(self.minority_groups),
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray
    groups: np.ndarray
    num_classes: int
    ids: list
    provenance: str = ""
    splits: dict = field(default_factory=dict)  # name -> index array
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, name: str) -> np.ndarray:
        try:
            return self.splits[name]
        except KeyError:
            raise KeyError(f"dataset has no split {name!r}; available: {sorted(self.splits)}") from None

    def counts(self, idx=None) -> dict:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        out: dict = {}
        for c, g in zip(self.labels[idx].tolist(), self.groups[idx].tolist()):
            out[(c, g)] = out.get((c, g), 0) + 1
        return out

    @property
    def group_tags(self) -> list:
        return sorted(set(self.groups.tolist()))


def generate(config: SynthConfig) -> LabeledDataset:
    """Render the configured counts; deterministic per ``config.seed``."""
    total = sum(config.counts.values())
    if total == 0:
        raise ValueError("synthetic config has zero samples")
    rng = np.random.default_rng(config.seed)
    glyphs = class_glyphs(config.num_classes)
    size = config.image_size
    images, labels, groups = [], [], []
    for (c, g) in sorted(config.counts, key=lambda k: (k[0], str(k[1]))):
        n = config.counts[(c, g)]
        base = np.full((size, size), 0.5)
        minority = g in config.minority_groups
        o = config.offset + (config.shift if minority else 0)
        contrast = config.minority_contrast if minority else 1.0
        base[o : o + 8, o : o + 8] += contrast * config.amplitude * glyphs[c]
        noise = rng.normal(0.0, config.noise_std, size=(n, size, size)) if config.noise_std > 0 else np.zeros((n, size, size))
        images.append(np.clip(base[None] + noise, 0.0, 1.0))
        labels += [c] * n
        groups += [g] * n
    images = np.concatenate(images)[:, None]
    order = rng.permutation(total)
    return LabeledDataset(
        images=images[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        groups=np.asarray(groups, dtype=object)[order],
        num_classes=config.num_classes,
        ids=[f"s{i:06d}" for i in range(total)],
        provenance=f"synthetic:{config.digest()}",
        metadata={"counts": dict(config.counts)},
    )


def _allocate(n: int, fractions: Sequence[float]) -> list:
    """Largest-remainder rounding of ``n * fractions`` to integers summing to n."""
    raw = [n * f for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    left = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def split(
    dataset: LabeledDataset,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    stratify_by: str = "none",
    names: Sequence[str] = ("train", "val", "test"),
    within: Optional[np.ndarray] = None,
) -> LabeledDataset:
    """Assign samples (or the ``within`` subset) to named splits.

    ``stratify_by`` is ``none``, ``class`` or ``class_group``; stratified
    splits allocate each stratum separately so per-stratum proportions hold
    to within one sample.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    if len(names) < len(fractions):
        raise ValueError("need one split name per fraction")
    pool = np.arange(len(dataset)) if within is None else np.asarray(within)
    rng = np.random.default_rng(seed)
    if stratify_by == "none":
        strata = [pool]
    elif stratify_by in ("class", "class_group"):
        keys = (
            dataset.labels[pool].astype(str)
            if stratify_by == "class"
            else np.char.add(np.char.add(dataset.labels[pool].astype(str), "|"), dataset.groups[pool].astype(str))
        )
        strata = [pool[keys == k] for k in sorted(set(keys.tolist()))]
        needed = sum(1 for f in fractions if f > 0)
        for s in strata:
            if len(s) < needed:
                raise ValueError(f"stratum of size {len(s)} is smaller than the {needed} requested splits")
    else:
        raise ValueError(f"unknown stratification {stratify_by!r}")

    parts = [[] for _ in fractions]
    for s in strata:
        perm = s[rng.permutation(len(s))]
        start = 0
        for i, k in enumerate(_allocate(len(s), fractions)):
            parts[i].append(perm[start : start + k])
            start += k
    splits = dict(dataset.splits)
    for name, p in zip(names, parts):
        splits[name] = np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64)
    return LabeledDataset(
        dataset.images, dataset.labels, dataset.groups, dataset.num_classes, dataset.ids,
        dataset.provenance, splits, dict(dataset.metadata),
    )


def concat(datasets: Sequence[LabeledDataset], split_names: Optional[Sequence[Optional[str]]] = None) -> LabeledDataset:
    """Stack datasets; split indices are shifted, and ``split_names[i]`` (if set)
    assigns all of dataset ``i`` to that split."""
    images, labels, groups, ids, splits = [], [], [], [], {}
    offset = 0
    for i, d in enumerate(datasets):
        images.append(d.images)
        labels.append(d.labels)
        groups.append(d.groups)
        ids += [f"{i}:{x}" for x in d.ids]
        for name, idx in d.splits.items():
            splits.setdefault(name, []).append(np.asarray(idx) + offset)
        if split_names and split_names[i]:
            splits.setdefault(split_names[i], []).append(np.arange(len(d)) + offset)
        offset += len(d)
    k = max(d.num_classes for d in datasets)
    return LabeledDataset(
        np.concatenate(images),
        np.concatenate(labels),
        np.concatenate(groups),
        k,
        ids,
        "+".join(d.provenance for d in datasets),
        {n: np.sort(np.concatenate(v)) for n, v in splits.items()},
        {},
    )


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def load_manifest(path) -> LabeledDataset:
    """Read a ``path,label,group,split`` CSV of 8-bit PGM/PPM images.

    Image paths are resolved relative to the manifest. Rows whose file is
    missing are skipped and listed in ``metadata["skipped"]``.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise ManifestError(f"{path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: header is missing column(s): {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise ManifestError(f"{path}: manifest has no rows")

    images, labels, groups, ids, split_of, skipped = [], [], [], [], [], []
    for line, row in enumerate(rows, start=2):
        img_path = root / row["path"]
        if not img_path.is_file():
            skipped.append({"line": line, "path": row["path"], "reason": "missing file"})
            continue
        with Image.open(img_path) as im:
            arr = np.asarray(im, dtype=np.float64) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        if images and arr.shape != images[0].shape:
            raise ManifestError(f"{path}:{line}: image shape {arr.shape} differs from {images[0].shape}")
        images.append(arr)
        labels.append(int(row["label"]))
        groups.append(row["group"])
        ids.append(Path(row["path"]).stem)
        split_of.append(row["split"].strip())
    if not images:
        raise ManifestError(f"{path}: no readable images")
    split_arr = np.asarray(split_of)
    splits = {s: np.flatnonzero(split_arr == s) for s in sorted(set(split_of)) if s}
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(
        np.stack(images), labels, np.asarray(groups, dtype=object), int(labels.max()) + 1, ids,
        f"manifest:{path}", splits, {"skipped": skipped},
    )


def export_manifest(dataset: LabeledDataset, out_dir) -> Path:
    """Write ``data/<split>/<id>.pgm`` (or ``.ppm``) plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    split_of = np.full(len(dataset), "unassigned", dtype=object)
    for name, idx in dataset.splits.items():
        split_of[np.asarray(idx, dtype=np.int64)] = name
    rows = []
    for i in range(len(dataset)):
        img = np.clip(np.rint(dataset.images[i] * 255.0), 0, 255).astype(np.uint8)
        ext = "pgm" if img.shape[0] == 1 else "ppm"
        rel = Path("data") / split_of[i] / f"{dataset.ids[i].replace(':', '_')}.{ext}"
        (out_dir / rel.parent).mkdir(parents=True, exist_ok=True)
        pil = Image.fromarray(img[0], "L") if img.shape[0] == 1 else Image.fromarray(img.transpose(1, 2, 0), "RGB")
        pil.save(out_dir / rel)
        rows.append([rel.as_posix(), int(dataset.labels[i]), dataset.groups[i], "" if split_of[i] == "unassigned" else split_of[i]])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


def _cells(per_class_group: dict, num_classes: int) -> dict:
    return {(c, g): n for g, ns in per_class_group.items() for c, n in zip(range(num_classes), ns)}


# per group: counts per class, for the training pool (train + val)
DATA_PRESETS = {
    # minority group B is 5% of the training pool
    "biased": {"A": (950, 950), "B": (50, 50)},
    # composition subsets: balanced, 5:1 group imbalance, 5:1 class imbalance
    "balanced": {"A": (150, 150), "B": (150, 150)},
    "group_imbalanced": {"A": (750, 750), "B": (150, 150)},
    "class_imbalanced": {"A": (750, 150), "B": (750, 150)},
}
TEST_PER_CELL = 250


def build_preset(
    name: str = "biased",
    seed: int = 0,
    val_fraction: float = 0.1,
    test_per_cell: int = TEST_PER_CELL,
    **render,
) -> LabeledDataset:
    """Training pool split into train/val (stratified by class x group) plus a
    separately rendered, balanced test set."""
    if name not in DATA_PRESETS:
        raise ValueError(f"unknown data preset {name!r}; choose from {sorted(DATA_PRESETS)}")
    table = DATA_PRESETS[name]
    k = len(next(iter(table.values())))
    pool_cfg = SynthConfig(_cells(table, k), num_classes=k, seed=seed, **render)
    test_cfg = SynthConfig({(c, g): test_per_cell for g in table for c in range(k)}, num_classes=k, seed=seed + 7919, **render)
    pool = split(generate(pool_cfg), (1 - val_fraction, val_fraction), seed, "class_group", ("train", "val"))
    ds = concat([pool, generate(test_cfg)], [None, "test"])
    ds.provenance = f"preset:{name}:{pool_cfg.digest()}"
    train_counts = ds.counts(ds.indices("train"))
    ds.metadata = {
        "preset": name,
        "pool_counts": {f"{c}|{g}": n for (c, g), n in pool_cfg.counts.items()},
        "group_ratio": _ratio([sum(n for (c, g), n in pool_cfg.counts.items() if g == t) for t in sorted(table)]),
        "class_ratio": _ratio([sum(n for (c, g), n in pool_cfg.counts.items() if c == i) for i in range(k)]),
        "minority_share_train": sum(n for (c, g), n in train_counts.items() if g in pool_cfg.minority_groups)
        / max(1, sum(train_counts.values())),
    }
    return ds


def _ratio(values) -> float:
    return float(max(values) / min(values)) if min(values) > 0 else float("inf")
