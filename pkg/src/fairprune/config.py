"""Experiment configuration loaded from a TOML document.

Every key has a default, so a config file only lists what it changes. See
``configs/default.toml`` for the full annotated layout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .data import DATA_PRESETS
from .models import PRESETS
from .optim import TrainConfig
from .pruners import AutoBotConfig, TaylorConfig

__all__ = [
    "METHODS",
    "LOSS_VARIANTS",
    "SCOPES",
    "ConfigError",
    "DatasetConfig",
    "PWParams",
    "AblationConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
]

METHODS = ("autobot", "taylor", "random")
LOSS_VARIANTS = ("ce", "pw", "pw_weights_only", "pw_soft_labels_only")
SCOPES = ("pruning_only", "pruning_and_retraining")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    preset: Optional[str] = "biased"
    manifest: Optional[str] = None
    seed: int = 0
    val_fraction: float = 0.1
    test_per_cell: int = 250
    amplitude: float = 0.3
    noise_std: float = 0.15
    minority_contrast: float = -1.0

    def __post_init__(self):
        if (self.preset is None) == (self.manifest is None):
            raise ConfigError("dataset needs exactly one of 'preset' or 'manifest'")
        if self.preset is not None and self.preset not in DATA_PRESETS:
            raise ConfigError(f"unknown dataset preset {self.preset!r}; choose from {sorted(DATA_PRESETS)}")


@dataclass(frozen=True)
class PWParams:
    theta: float = 0.3
    gamma: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"pw.theta must lie in [0, 1], got {self.theta}")
        if self.gamma < 0:
            raise ConfigError(f"pw.gamma must be >= 0, got {self.gamma}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("pw.reduction must be 'sum' or 'mean'")


@dataclass(frozen=True)
class AblationConfig:
    method: str = "autobot"
    variants: tuple = ("pw_soft_labels_only", "pw_weights_only")
    scopes: tuple = SCOPES
    include_ce_reference: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"ablation.method must be one of {METHODS}")
        for v in self.variants:
            if v not in LOSS_VARIANTS or v == "ce":
                raise ConfigError(f"ablation variant {v!r} must be a PW variant")
        for s in self.scopes:
            if s not in SCOPES:
                raise ConfigError(f"ablation scope {s!r} must be one of {SCOPES}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: str = "mini-plain"
    methods: tuple = ("taylor",)
    variants: tuple = ("ce", "pw")
    pw: PWParams = field(default_factory=PWParams)
    pw_overrides: dict = field(default_factory=dict)  # method -> PWParams
    autobot: AutoBotConfig = field(default_factory=AutoBotConfig)
    taylor: TaylorConfig = field(default_factory=TaylorConfig)
    speedups: tuple = (2.0, 4.0, 8.0)
    trials: int = 3
    base_seed: int = 0
    original: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.005, epochs=15))
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.001, epochs=5))
    apply_pw_to: str = "pruning_and_retraining"
    keep_prune_time_training: bool = False
    subsets: tuple = ("balanced", "group_imbalanced", "class_imbalanced")
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.speedups or any(s <= 1 for s in self.speedups):
            raise ConfigError("every target speedup must be > 1")
        if self.model not in PRESETS:
            raise ConfigError(f"unknown model preset {self.model!r}; choose from {sorted(PRESETS)}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        for v in self.variants:
            if v not in LOSS_VARIANTS:
                raise ConfigError(f"unknown loss variant {v!r}; choose from {LOSS_VARIANTS}")
        if self.apply_pw_to not in SCOPES:
            raise ConfigError(f"apply_pw_to must be one of {SCOPES}")
        for s in self.subsets:
            if s not in DATA_PRESETS:
                raise ConfigError(f"unknown subset preset {s!r}")
        for m in self.pw_overrides:
            if m not in METHODS:
                raise ConfigError(f"pw override for unknown method {m!r}")

    def pw_for(self, method: str) -> PWParams:
        return self.pw_overrides.get(method, self.pw)

    def seeds(self) -> list:
        return [self.base_seed + t for t in range(self.trials)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, base_seed=int(seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pw_overrides"] = {k: dataclasses.asdict(v) for k, v in self.pw_overrides.items()}
        return d


def _build(cls, table: Optional[dict], section: str, **fixed):
    table = dict(table or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    for k, v in table.items():
        if isinstance(v, list):
            table[k] = tuple(v)
    try:
        return cls(**{**table, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a parsed document (unknown keys are errors)."""
    doc = dict(doc)
    sections = {
        "dataset": DatasetConfig,
        "autobot": AutoBotConfig,
        "taylor": TaylorConfig,
        "original": TrainConfig,
        "retrain": TrainConfig,
        "ablation": AblationConfig,
    }
    kwargs = {}
    for name, cls in sections.items():
        if name in doc:
            table = doc.pop(name)
            if name == "dataset" and "manifest" in table and "preset" not in table:
                table = {**table, "preset": None}  # a manifest replaces the default preset
            kwargs[name] = _build(cls, table, name)
    if "pw" in doc:
        pw = dict(doc.pop("pw"))
        overrides = {m: pw.pop(m) for m in list(pw) if isinstance(pw[m], dict)}
        base = _build(PWParams, pw, "pw")
        kwargs["pw"] = base
        kwargs["pw_overrides"] = {
            m: _build(PWParams, {**dataclasses.asdict(base), **t}, f"pw.{m}") for m, t in overrides.items()
        }
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(sections) - {"pw", "pw_overrides"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    for k, v in doc.items():
        kwargs[k] = tuple(float(x) for x in v) if k == "speedups" else (tuple(v) if isinstance(v, list) else v)
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(doc)
    if cfg.dataset.manifest is not None and not Path(cfg.dataset.manifest).is_absolute():
        ds = dataclasses.replace(cfg.dataset, manifest=str((path.parent / cfg.dataset.manifest).resolve()))
        cfg = dataclasses.replace(cfg, dataset=ds)
    return cfg
