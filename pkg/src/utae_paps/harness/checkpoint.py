"""Checkpoints: a directory holding

- ``weights.npz``: the model ``state_dict`` as flat named arrays,
- ``optimizer.npz``: Adam moments and step counts (optional),
- ``manifest.json``: run config, config hash, array shapes, normalization
  statistics, epoch and validation metric.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import IncompatibleCheckpoint
from .config import RunConfig, config_from_dict


@dataclass
class Checkpoint:
    config: RunConfig
    state: dict
    norm_stats: tuple[np.ndarray, np.ndarray]
    epoch: int = 0
    metric: float | None = None
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)


def _optimizer_arrays(opt_state: dict) -> dict[str, np.ndarray]:
    out = {}
    for pid, st in opt_state["state"].items():
        for key, val in st.items():
            out[f"{pid}/{key}"] = torch.as_tensor(val).cpu().numpy()
    return out


def _optimizer_state(arrays, param_groups) -> dict:
    state = {}
    for name in arrays.files:
        pid, key = name.split("/")
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arrays[name].copy())
    return {"state": state, "param_groups": param_groups}


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: RunConfig, norm_stats,
                    epoch: int = 0, metric: float | None = None, optimizer=None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path / "weights.npz", **state)
    groups = None
    if optimizer is not None:
        opt = optimizer.state_dict()
        np.savez(path / "optimizer.npz", **_optimizer_arrays(opt))
        groups = opt["param_groups"]
    manifest = {
        "config": config.to_dict(), "config_hash": config.model_hash(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "norm_stats": {"mean": [float(x) for x in norm_stats[0]],
                       "std": [float(x) for x in norm_stats[1]]},
        "epoch": int(epoch), "metric": None if metric is None else float(metric),
        "optimizer_param_groups": groups, "extra": extra or {},
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(path / "manifest.json")
    return path


def _config_from_manifest(d: dict) -> RunConfig:
    d = dict(d)
    d["schedule"] = [{"epochs": e, "lr": lr} for e, lr in d["schedule"]]
    if d.get("paps") is not None:
        d["paps"] = dict(d["paps"])
    else:
        d.pop("paps", None)
        d.pop("quality_threshold", None)
    return config_from_dict(d)


def load_checkpoint(path: str | Path, expected: RunConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``expected``, its model config hash must match."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise IncompatibleCheckpoint(f"no checkpoint manifest in {path}") from None
    if expected is not None and manifest["config_hash"] != expected.model_hash():
        raise IncompatibleCheckpoint(
            f"{path}: checkpoint config hash {manifest['config_hash']} does not match "
            f"the run config ({expected.model_hash()})")
    with np.load(path / "weights.npz") as w:
        state = {k: torch.from_numpy(w[k].copy()) for k in w.files}
    shapes = {k: list(v.shape) for k, v in state.items()}
    if shapes != manifest["shapes"]:
        raise IncompatibleCheckpoint(f"{path}: weight shapes differ from the manifest")
    opt = None
    if (path / "optimizer.npz").is_file() and manifest.get("optimizer_param_groups"):
        with np.load(path / "optimizer.npz") as a:
            opt = _optimizer_state(a, manifest["optimizer_param_groups"])
    stats = (np.asarray(manifest["norm_stats"]["mean"]), np.asarray(manifest["norm_stats"]["std"]))
    return Checkpoint(_config_from_manifest(manifest["config"]), state, stats, manifest["epoch"],
                      manifest["metric"], opt, manifest.get("extra", {}))
