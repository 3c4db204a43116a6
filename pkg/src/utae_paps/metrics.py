"""Semantic (OA, IoU, mIoU) and panoptic (SQ, RQ, PQ) evaluation.

Void pixels never count. Panoptic metrics are computed on parcels ("things")
only, background excluded. Predicted segments overlapping a void parcel with
IoU > 0.5 are ignored instead of being counted as false positives.
"""
from __future__ import annotations

import logging
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyEvaluation

log = logging.getLogger(__name__)

MATCH_IOU = 0.5


@dataclass
class ConfusionMatrix:
    """Pixel counts, rows = truth, columns = prediction."""

    n_classes: int
    counts: np.ndarray = None
    class_names: tuple = ()

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    def update(self, pred, truth, ignore_index: int | None = None) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel()
        truth = np.asarray(truth).ravel()
        if pred.shape != truth.shape:
            raise ValueError("prediction and truth shapes differ")
        keep = np.ones_like(truth, dtype=bool) if ignore_index is None else truth != ignore_index
        p, t = pred[keep], truth[keep]
        ok = (p >= 0) & (p < self.n_classes) & (t >= 0) & (t < self.n_classes)
        if not ok.all():
            raise ValueError("labels outside [0, n_classes)")
        self.counts += np.bincount(t * self.n_classes + p, minlength=self.n_classes ** 2).reshape(
            self.n_classes, self.n_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts, self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall_accuracy(self) -> float:
        if self.total == 0:
            raise EmptyEvaluation("no non-void pixel to evaluate")
        return float(np.trace(self.counts) / self.total)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def mean_iou(self) -> float:
        iou = self.per_class_iou()
        if np.all(np.isnan(iou)):
            raise EmptyEvaluation("no class present")
        return float(np.nanmean(iou))


def semantic_metrics(pred, truth, n_classes: int, void_label: int | None = None) -> dict:
    """OA, per-class IoU, mIoU (over classes present in truth or prediction) and matrix.

    ``n_classes`` is the total number of labels (background and crop classes,
    plus void if it can appear in ``pred``).
    """
    cm = ConfusionMatrix(n_classes).update(pred, truth, void_label)
    return summarize_confusion(cm)


def summarize_confusion(cm: ConfusionMatrix) -> dict:
    if cm.total == 0:
        raise EmptyEvaluation("no non-void pixel to evaluate")
    return {"OA": cm.overall_accuracy(), "IoU": cm.per_class_iou(), "mIoU": cm.mean_iou(),
            "confusion": cm.counts.copy()}


# --------------------------------------------------------------------------- panoptic

@dataclass
class PanopticStats:
    """Per-class accumulators; mergeable by addition."""

    n_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    iou_sum: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        for name, dt in (("tp", np.int64), ("fp", np.int64), ("fn", np.int64), ("iou_sum", np.float64)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_classes + 1, dtype=dt))

    def __add__(self, other: "PanopticStats") -> "PanopticStats":
        return PanopticStats(self.n_classes, self.tp + other.tp, self.fp + other.fp,
                             self.fn + other.fn, self.iou_sum + other.iou_sum,
                             self.ignored + other.ignored)

    def merge(self, other: "PanopticStats") -> "PanopticStats":
        return self + other


def _segments(instance: np.ndarray, semantic: np.ndarray):
    out = {}
    for sid in np.unique(instance):
        if sid == 0:
            continue
        m = instance == sid
        out[int(sid)] = (m, int(np.bincount(semantic[m]).argmax()))
    return out


def panoptic_match(pred_semantic, pred_instance, truth_parcels, n_classes: int,
                   void_ignore: bool = True) -> PanopticStats:
    """Match predicted segments against ground-truth parcels of the same class.

    A match requires IoU > 0.5, which makes matches unique. For matching, the
    predicted segment loses its pixels lying on void parcels. Unmatched
    predictions overlapping a void parcel with IoU > 0.5 are ignored when
    ``void_ignore`` is set (otherwise they count as false positives, which is
    the historical bug kept for comparison).
    """
    pred_semantic = np.asarray(pred_semantic)
    pred_instance = np.asarray(pred_instance)
    stats = PanopticStats(n_classes)
    truth = [p for p in truth_parcels if not p.is_void]
    voids = [p for p in truth_parcels if p.is_void]
    void_px = np.zeros(pred_instance.shape, dtype=bool)
    for v in voids:
        void_px |= v.mask

    matched_truth = set()
    for sid, (pm, cls) in _segments(pred_instance, pred_semantic).items():
        if not 1 <= cls <= n_classes:
            continue
        pm_valid = pm & ~void_px
        hit = None
        for g in truth:
            if g.crop_class != cls or g.id in matched_truth:
                continue
            inter = np.logical_and(pm_valid, g.mask).sum()
            if inter == 0:
                continue
            iou = inter / np.logical_or(pm_valid, g.mask).sum()
            if iou > MATCH_IOU:
                hit = (g.id, iou)
                break
        if hit is not None:
            matched_truth.add(hit[0])
            stats.tp[cls] += 1
            stats.iou_sum[cls] += hit[1]
            continue
        if void_ignore and any(
                np.logical_and(pm, v.mask).sum() / np.logical_or(pm, v.mask).sum() > MATCH_IOU
                for v in voids):
            stats.ignored += 1
            continue
        stats.fp[cls] += 1
    for g in truth:
        if g.id not in matched_truth:
            stats.fn[g.crop_class] += 1
    return stats


def panoptic_quality(stats: PanopticStats) -> dict:
    """Per-class and class-averaged SQ, RQ, PQ over crop classes.

    Classes without any segment are excluded from the averages (with a log
    warning); SQ is averaged only over classes having at least one TP.
    """
    K = stats.n_classes
    per_class = {}
    sq_vals, rq_vals, pq_vals = [], [], []
    for k in range(1, K + 1):
        tp, fp, fn = int(stats.tp[k]), int(stats.fp[k]), int(stats.fn[k])
        denom = tp + 0.5 * fp + 0.5 * fn
        if denom == 0:
            log.warning("class %d has no segment; excluded from panoptic averages", k)
            continue
        sq = stats.iou_sum[k] / tp if tp else float("nan")
        rq = tp / denom
        pq = stats.iou_sum[k] / denom
        per_class[k] = {"SQ": sq, "RQ": rq, "PQ": pq, "TP": tp, "FP": fp, "FN": fn}
        if tp:
            sq_vals.append(sq)
        rq_vals.append(rq)
        pq_vals.append(pq)
    mean = lambda v: float(np.mean(v)) if v else float("nan")
    return {"SQ": mean(sq_vals), "RQ": mean(rq_vals), "PQ": mean(pq_vals), "per_class": per_class,
            "ignored": stats.ignored}


# --------------------------------------------------------------------------- reports

def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_report(report: dict, prefix: str | Path, class_names=None) -> dict[str, Path]:
    """Write ``<prefix>.json`` and a per-class ``<prefix>.csv``.

    ``report`` may hold a ``semantic`` entry (from :func:`semantic_metrics`)
    and a ``panoptic`` entry (from :func:`panoptic_quality`).
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"json": prefix.with_suffix(".json"), "csv": prefix.with_suffix(".csv")}
    paths["json"].write_text(json.dumps(_jsonable(report), indent=1))
    sem = report.get("semantic")
    pan = report.get("panoptic")
    n = len(sem["IoU"]) if sem else (max(pan["per_class"], default=0) + 1 if pan else 0)
    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "name", "IoU", "SQ", "RQ", "PQ", "TP", "FP", "FN"])
        for k in range(n):
            name = class_names[k] if class_names is not None and k < len(class_names) else ""
            iou = sem["IoU"][k] if sem else np.nan
            pc = pan["per_class"].get(k, {}) if pan else {}
            row = [k, name, iou] + [pc.get(c, "") for c in ("SQ", "RQ", "PQ", "TP", "FP", "FN")]
            w.writerow(["" if isinstance(x, float) and np.isnan(x) else x for x in row])
    return paths
