"""Run configuration, read from a YAML document.

Every hyperparameter has a key whose default is the reference setting; a
minimal config only names the task::

    task: semantic            # or panoptic
    seed: 0
    fold: 1
    data:
      source: synthetic       # or pastis-root (root, else $PASTIS_ROOT)
      n_samples: 40
      synthetic: {H: 64, W: 64, n_classes: 5}
    model: {encoder_widths: [64, 64, 64, 128]}
    paps: {shape_size: 16, quality_threshold: tune}
    schedule: [{epochs: 100, lr: 0.001}]
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..core import N_CROP_CLASSES, total_classes
from ..errors import ConfigError
from ..paps import PaPsConfig
from ..sitsgen import GenConfig
from ..utae import UTAEConfig

TASKS = ("semantic", "panoptic")
SOURCES = ("synthetic", "pastis-root")
SEMANTIC_SCHEDULE = ((100, 1e-3),)
PANOPTIC_SCHEDULE = ((50, 1e-2), (50, 1e-3))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    root: str | None = None
    n_samples: int = 40
    synthetic: GenConfig = GenConfig()
    max_dates: int | None = None       # truncate evaluated sequences to their first dates

    def resolve_root(self) -> Path:
        root = self.root or os.environ.get("PASTIS_ROOT")
        if not root:
            raise ConfigError("data.root is not set and PASTIS_ROOT is undefined")
        return Path(root)


@dataclass(frozen=True)
class OptimConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    task: str = "semantic"
    data: DataConfig = DataConfig()
    n_classes: int = N_CROP_CLASSES
    fold: int = 1
    seed: int = 0
    out: str = "runs/default"
    device: str = "cpu"
    model: UTAEConfig = UTAEConfig()
    paps: PaPsConfig | None = None
    quality_threshold: float | str = "tune"
    optim: OptimConfig = OptimConfig()
    batch_size: int = 4
    schedule: tuple[tuple[int, float], ...] = SEMANTIC_SCHEDULE
    augment: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.schedule or any(e < 1 or lr <= 0 for e, lr in self.schedule):
            raise ConfigError("schedule needs stages with epochs >= 1 and lr > 0")
        if self.augment:
            raise ConfigError("data augmentation is not implemented")
        if self.task == "semantic":
            if self.paps is not None:
                raise ConfigError("the semantic task does not accept a paps section")
            if not self.model.out_conv or self.model.out_conv[-1] != total_classes(self.n_classes):
                raise ConfigError(f"model.out_conv must end with {total_classes(self.n_classes)} "
                                  f"outputs for {self.n_classes} crop classes")
        else:
            if self.paps is None:
                raise ConfigError("the panoptic task needs a paps section")
            if self.paps.n_classes != self.n_classes:
                raise ConfigError("paps.n_classes differs from n_classes")
            q = self.quality_threshold
            if q != "tune" and not (isinstance(q, (int, float)) and 0 <= q <= 1):
                raise ConfigError("quality_threshold must be 'tune' or a number in [0, 1]")
        if self.data.source == "synthetic" and self.data.synthetic.n_classes != self.n_classes:
            raise ConfigError("n_classes differs from data.synthetic.n_classes")
        if self.data.source == "synthetic" and self.data.synthetic.channels != self.model.input_dim:
            raise ConfigError("model.input_dim differs from data.synthetic.channels")

    @property
    def n_epochs(self) -> int:
        return sum(e for e, _ in self.schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate of a 0-based epoch."""
        for n, lr in self.schedule:
            if epoch < n:
                return lr
            epoch -= n
        return self.schedule[-1][1]

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def model_hash(self) -> str:
        """Hash of everything that fixes the parameter shapes and their meaning."""
        key = {"task": self.task, "n_classes": self.n_classes, "model": self.model.to_dict(),
               "paps": None if self.paps is None else self.paps.to_dict()}
        return hashlib.sha256(json.dumps(_plain(key), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d, what):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from None


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = dict(d)
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    task = d.get("task", "semantic")

    data = dict(d.get("data") or {})
    syn = dict(data.pop("synthetic", None) or {})
    if "T_range" in syn:
        syn["T_range"] = tuple(syn["T_range"])
    data["synthetic"] = _build(GenConfig, syn, "data.synthetic")
    d["data"] = _build(DataConfig, data, "data")

    if "n_classes" not in d:
        d["n_classes"] = (d["data"].synthetic.n_classes if d["data"].source == "synthetic"
                          else N_CROP_CLASSES)
    K = int(d["n_classes"])

    model = dict(d.get("model") or {})
    if d["data"].source == "synthetic":
        model.setdefault("input_dim", d["data"].synthetic.channels)
    if task == "semantic":
        model.setdefault("out_conv", [32, total_classes(K)])
    else:
        model["out_conv"] = []
    d["model"] = _build(UTAEConfig, model, "model")

    if "paps" in d or task == "panoptic":
        paps = dict(d.get("paps") or {})
        if "quality_threshold" in paps:
            d["quality_threshold"] = paps.pop("quality_threshold")
        paps.setdefault("n_classes", K)
        d["paps"] = _build(PaPsConfig, paps, "paps")
    d["optim"] = _build(OptimConfig, {k: tuple(v) if k == "betas" else v
                                      for k, v in (d.get("optim") or {}).items()}, "optim")
    if "schedule" in d:
        try:
            d["schedule"] = tuple((int(s["epochs"]), float(s["lr"])) for s in d["schedule"])
        except (TypeError, KeyError, ValueError):
            raise ConfigError("schedule must be a list of {epochs, lr} mappings") from None
    else:
        d["schedule"] = SEMANTIC_SCHEDULE if task == "semantic" else PANOPTIC_SCHEDULE
    try:
        return RunConfig(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a YAML config (or the defaults if ``path`` is None) and apply CLI overrides."""
    d = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)


def dump_config(config: RunConfig, path: str | Path) -> None:
    d = config.to_dict()
    d["schedule"] = [{"epochs": e, "lr": lr} for e, lr in config.schedule]
    if d["paps"] is not None:
        d["paps"]["quality_threshold"] = d.pop("quality_threshold")
    else:
        d.pop("paps")
        d.pop("quality_threshold")
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False))
