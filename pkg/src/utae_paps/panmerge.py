"""Turn instance proposals into a panoptic map, using centerness as mask quality."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BACKGROUND
from .errors import ThresholdError

MASK_THRESHOLD = 0.4
MIN_REMAIN = 0.5
DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(19))   # 0.0 .. 0.9


@dataclass
class InstanceMask:
    """A binarized proposal in image coordinates."""

    mask: np.ndarray            # H x W bool
    quality: float
    center: tuple[int, int]
    class_probs: np.ndarray | None = None
    label: int | None = None    # explicit crop class; overrides class_probs

    @property
    def crop_class(self) -> int:
        if self.label is not None:
            return int(self.label)
        return int(np.argmax(self.class_probs)) + 1


@dataclass
class PanopticMap:
    semantic: np.ndarray
    instance: np.ndarray
    records: list = field(default_factory=list)   # dicts: id, class, quality, center

    def table(self) -> list[dict]:
        return [dict(r) for r in self.records]


def binarize(l_c: np.ndarray, window, shape, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Threshold mask probabilities (``>= threshold``) and paste them into an ``H x W`` frame."""
    r0, r1, c0, c1 = window
    out = np.zeros(shape, dtype=bool)
    out[r0:r1, c0:c1] = np.asarray(l_c) >= threshold
    return out


def from_proposals(proposals, shape, threshold: float = MASK_THRESHOLD) -> list[InstanceMask]:
    """Binarize :class:`paps.Proposal` objects into full-frame instance masks."""
    return [InstanceMask(binarize(p.mask, p.window, shape, threshold), p.quality, p.center,
                         p.class_probs) for p in proposals]


def _rank(masks: Sequence[InstanceMask]) -> list[InstanceMask]:
    return sorted(masks, key=lambda m: (-m.quality, m.center[0], m.center[1]))


def resolve_overlaps(masks: Sequence[InstanceMask], min_quality: float = 0.0,
                     min_remain: float = MIN_REMAIN) -> list[InstanceMask]:
    """Disjoint surviving masks, ordered by decreasing quality.

    Masks under ``min_quality`` are dropped first. Each pixel then goes to the
    highest-quality mask covering it. A mask that lost more than
    ``1 - min_remain`` of its pixels is removed, and its remaining pixels are
    left unassigned (they do not fall back to lower-ranked masks).
    """
    ranked = [m for m in _rank(masks) if m.quality >= min_quality]
    if not ranked:
        return []
    shape = ranked[0].mask.shape
    owner = np.full(shape, -1, dtype=np.int64)
    for k in reversed(range(len(ranked))):
        owner[ranked[k].mask] = k
    survivors = []
    for k, m in enumerate(ranked):
        total = int(m.mask.sum())
        kept = owner == k
        n_kept = int(kept.sum())
        if total == 0 or n_kept < min_remain * total:
            continue
        survivors.append(InstanceMask(kept, m.quality, m.center, m.class_probs, m.label))
    return survivors


def to_panoptic(survivors: Sequence[InstanceMask], shape=None) -> PanopticMap:
    """Paint disjoint masks; ids follow quality rank, uncovered pixels are background."""
    survivors = _rank(survivors)
    if shape is None:
        if not survivors:
            raise ValueError("shape is required when there are no survivors")
        shape = survivors[0].mask.shape
    semantic = np.full(shape, BACKGROUND, dtype=np.int64)
    instance = np.zeros(shape, dtype=np.int64)
    records = []
    for k, m in enumerate(survivors, start=1):
        cls = m.crop_class
        semantic[m.mask] = cls
        instance[m.mask] = k
        records.append({"id": k, "class": cls, "quality": float(m.quality),
                        "center": [int(m.center[0]), int(m.center[1])]})
    return PanopticMap(semantic, instance, records)


def merge(proposals, shape, min_quality: float = 0.0, threshold: float = MASK_THRESHOLD,
          min_remain: float = MIN_REMAIN) -> PanopticMap:
    masks = from_proposals(proposals, shape, threshold)
    return to_panoptic(resolve_overlaps(masks, min_quality, min_remain), shape)


# --------------------------------------------------------------------------- threshold tuning

def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def detection_counts(survivors: Sequence[InstanceMask], parcels) -> tuple[int, int, int]:
    """Class-agnostic ``(TP, FP, FN)``: a detection is an IoU > 0.5 match.

    Predictions matching a void parcel are ignored.
    """
    valid = [p for p in parcels if not p.is_void]
    voids = [p for p in parcels if p.is_void]
    matched = set()
    tp = fp = 0
    for m in survivors:
        hit = next((p.id for p in valid if p.id not in matched and _iou(m.mask, p.mask) > 0.5), None)
        if hit is not None:
            matched.add(hit)
            tp += 1
        elif not any(_iou(m.mask, v.mask) > 0.5 for v in voids):
            fp += 1
    return tp, fp, len(valid) - len(matched)


def tune_quality_threshold(proposal_sets: Sequence[Sequence[InstanceMask]], ground_truths,
                           grid: Sequence[float] = DEFAULT_GRID,
                           min_remain: float = MIN_REMAIN) -> float:
    """Grid value maximizing the detection F1 over a validation set (ties -> lowest).

    ``proposal_sets[n]`` are the binarized proposals of image ``n`` and
    ``ground_truths[n]`` its parcel records.
    """
    if len(proposal_sets) == 0 or len(proposal_sets) != len(ground_truths):
        raise ThresholdError("need a non-empty validation set with one ground truth per image")
    best_t, best_f = None, -1.0
    for t in sorted(grid):
        tp = fp = fn = 0
        for masks, parcels in zip(proposal_sets, ground_truths):
            a, b, c = detection_counts(resolve_overlaps(masks, t, min_remain), parcels)
            tp, fp, fn = tp + a, fp + b, fn + c
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f + 1e-12:
            best_t, best_f = t, f1
    return float(best_t)


# --------------------------------------------------------------------------- serialization

def save_panoptic(pmap: PanopticMap, prefix: str | Path) -> dict[str, Path]:
    """Write ``<prefix>_semantic.png``, ``<prefix>_instance.png`` (16-bit grayscale)
    and ``<prefix>_instances.json``.
    """
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"semantic": prefix.with_name(prefix.name + "_semantic.png"),
             "instance": prefix.with_name(prefix.name + "_instance.png"),
             "table": prefix.with_name(prefix.name + "_instances.json")}
    for key in ("semantic", "instance"):
        arr = getattr(pmap, key)
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{key} map out of 16-bit range")
        Image.fromarray(arr.astype(np.uint16)).save(paths[key])
    paths["table"].write_text(json.dumps({"instances": pmap.table()}, indent=1))
    return paths


def load_panoptic(prefix: str | Path) -> PanopticMap:
    from PIL import Image

    prefix = Path(prefix)
    sem = np.asarray(Image.open(prefix.with_name(prefix.name + "_semantic.png")), dtype=np.int64)
    inst = np.asarray(Image.open(prefix.with_name(prefix.name + "_instance.png")), dtype=np.int64)
    table = json.loads(prefix.with_name(prefix.name + "_instances.json").read_text())
    return PanopticMap(sem, inst, table["instances"])
