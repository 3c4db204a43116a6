"""Training loop, evaluation, prediction and ablation runs."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import panmerge
from ..core import SITSSample, normalize_channels, pad_and_batch, total_classes, void_label
from ..errors import ConfigError, Divergence, EmptyEvaluation, EmptyTrainingSet, UnknownAblation
from ..metrics import (ConfusionMatrix, PanopticStats, panoptic_match, panoptic_quality,
                       summarize_confusion, write_report)
from ..paps import UTAEPaPs
from ..pastis_io import compute_norm_stats, fold_split, load_index
from ..sitsgen import generate_dataset
from ..utae import ABLATIONS, UTAE, count_parameters, semantic_loss
from . import figures
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- data and model

def load_samples(config: RunConfig) -> list[SITSSample]:
    """All samples of the configured dataset, sorted by id."""
    if config.data.source == "synthetic":
        return generate_dataset(config.data.synthetic, config.data.n_samples)
    index = load_index(config.data.resolve_root())
    if index.n_classes != config.n_classes:
        raise ConfigError(f"dataset has {index.n_classes} classes, config says {config.n_classes}")
    return index.load_all()


def split_samples(samples, config: RunConfig):
    return fold_split(samples, config.fold)


def build_model(config: RunConfig) -> torch.nn.Module:
    """Fresh model; the initialization depends only on ``config.seed``."""
    torch.manual_seed(config.seed)
    if config.task == "semantic":
        return UTAE(config.model)
    return UTAEPaPs(config.model, config.paps)


def get_device(name: str) -> torch.device:
    try:
        dev = torch.device(name)
        torch.empty(1, device=dev)
    except (RuntimeError, AssertionError) as e:
        raise ConfigError(f"device {name!r} is unavailable: {e}") from None
    return dev


def to_tensors(samples: Sequence[SITSSample], stats, device):
    batch = normalize_channels(pad_and_batch(samples), stats)
    x = torch.tensor(batch.images, dtype=torch.float32, device=device)
    dates = torch.tensor(batch.dates, dtype=torch.long, device=device)
    pad = torch.tensor(batch.pad_mask, device=device).bool()
    return x, dates, pad


def batch_loss(model, config: RunConfig, samples, stats, device):
    x, dates, pad = to_tensors(samples, stats, device)
    void = void_label(config.n_classes)
    if config.task == "semantic":
        logits = model(x, dates, pad)
        target = torch.as_tensor(np.stack([s.semantic for s in samples]), dtype=torch.long,
                                 device=device)
        loss = semantic_loss(logits, target, void)
        return loss, {}
    out = model(x, dates, pad, targets=list(samples), void_label=void)
    terms = {k: float(v) for k, v in out.terms.items()}
    return out.loss, terms


# --------------------------------------------------------------------------- inference

@torch.no_grad()
def predict_semantic(model, samples, stats, device, batch_size=4) -> list[np.ndarray]:
    model.eval()
    out = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        logits = model(*to_tensors(chunk, stats, device))
        out.extend(logits.argmax(dim=1).cpu().numpy())
    return out


@torch.no_grad()
def predict_panoptic(model, samples, stats, device, batch_size=4):
    """Binarized proposals per sample, plus heatmaps and saliency maps."""
    model.eval()
    masks, heat, sal = [], [], []
    thr = model.head.config.mask_threshold
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        out = model(*to_tensors(chunk, stats, device))
        shape = out.heatmap.shape[-2:]
        for b, props in enumerate(out.proposals):
            masks.append(panmerge.from_proposals(props, tuple(shape), thr))
            heat.append(out.heatmap[b].cpu().numpy())
            sal.append(torch.sigmoid(out.saliency[b]).cpu().numpy())
    return masks, heat, sal


def semantic_report(preds, samples, config: RunConfig) -> dict:
    cm = ConfusionMatrix(total_classes(config.n_classes))
    void = void_label(config.n_classes)
    for p, s in zip(preds, samples):
        cm.update(p, s.semantic, ignore_index=void)
    return summarize_confusion(cm)


def panoptic_report(mask_sets, samples, config: RunConfig, threshold: float) -> dict:
    cfg = config.paps
    stats = PanopticStats(config.n_classes)
    cm = ConfusionMatrix(total_classes(config.n_classes))
    maps = []
    for masks, s in zip(mask_sets, samples):
        pmap = panmerge.to_panoptic(panmerge.resolve_overlaps(masks, threshold, cfg.min_remain),
                                    s.semantic.shape)
        maps.append(pmap)
        stats = stats + panoptic_match(pmap.semantic, pmap.instance, s.parcels, config.n_classes)
        cm.update(pmap.semantic, s.semantic, ignore_index=void_label(config.n_classes))
    report = panoptic_quality(stats)
    report["quality_threshold"] = threshold
    report["semantic"] = summarize_confusion(cm) if cm.total else None
    report["maps"] = maps
    return report


def _threshold(config: RunConfig, val_masks, val_samples) -> float:
    if config.quality_threshold != "tune":
        return float(config.quality_threshold)
    if not val_samples:
        return 0.0
    return panmerge.tune_quality_threshold(val_masks, [s.parcels for s in val_samples],
                                           min_remain=config.paps.min_remain)


def validation_metric(model, config: RunConfig, samples, stats, device) -> dict:
    """mIoU for the semantic task, PQ (threshold tuned on the same set) for panoptic."""
    if config.task == "semantic":
        rep = semantic_report(predict_semantic(model, samples, stats, device, config.batch_size),
                              samples, config)
        return {"metric": rep["mIoU"], "mIoU": rep["mIoU"], "OA": rep["OA"]}
    masks, _, _ = predict_panoptic(model, samples, stats, device, config.batch_size)
    thr = _threshold(config, masks, samples)
    rep = panoptic_report(masks, samples, config, thr)
    pq = 0.0 if math.isnan(rep["PQ"]) else rep["PQ"]
    return {"metric": pq, "PQ": rep["PQ"], "SQ": rep["SQ"], "RQ": rep["RQ"], "threshold": thr}


# --------------------------------------------------------------------------- training

@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_metric: float = float("-inf")
    best_epoch: int = -1
    model: torch.nn.Module | None = None
    stats: tuple | None = None


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def _snapshot(out: Path, info: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "divergence.json").write_text(json.dumps(info, indent=1))


def fit(config: RunConfig, train_set: Sequence[SITSSample], val_set: Sequence[SITSSample] = (),
        out: str | Path | None = None, resume: bool = False, epochs: int | None = None,
        eval_every: int = 1) -> FitResult:
    """Train on ``train_set``; keeps ``<out>/last`` and the best-validation ``<out>/best``.

    ``epochs`` stops early (the schedule is unchanged), which with ``resume``
    gives the same result as an uninterrupted run. Without ``val_set``, the
    training loss selects the best checkpoint.
    """
    if not train_set:
        raise EmptyTrainingSet("no training sample")
    device = get_device(config.device)
    out = Path(out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    stats = compute_norm_stats(train_set)
    model = build_model(config).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_at(0), betas=config.optim.betas,
                           eps=config.optim.eps, weight_decay=config.optim.weight_decay)
    res = FitResult(model=model, stats=stats)
    start = 0
    log_path = out / "log.jsonl"
    if resume and (out / "last" / "manifest.json").is_file():
        ck = load_checkpoint(out / "last", expected=config)
        model.load_state_dict(ck.state)
        if ck.optimizer is not None:
            opt.load_state_dict(ck.optimizer)
        start = ck.epoch
        res.best_metric = ck.extra.get("best_metric", float("-inf"))
        res.best_epoch = ck.extra.get("best_epoch", -1)
        lines = log_path.read_text().splitlines()[:start] if log_path.is_file() else []
        res.history = [json.loads(l) for l in lines]
        log_path.write_text("".join(l + "\n" for l in lines))
    elif log_path.exists():
        log_path.unlink()

    n_epochs = config.n_epochs if epochs is None else min(epochs, config.n_epochs)
    for epoch in range(start, n_epochs):
        t0 = time.time()
        lr = config.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = epoch_order(config.seed, epoch, len(train_set))
        losses, term_sums = [], {}
        for k in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[k:k + config.batch_size]]
            loss, terms = batch_loss(model, config, chunk, stats, device)
            if not torch.isfinite(loss):
                _snapshot(out, {"epoch": epoch, "step": k // config.batch_size, "lr": lr,
                                "loss": float(loss.detach()), "terms": terms,
                                "samples": [s.sample_id for s in chunk]})
                raise Divergence(f"non-finite loss at epoch {epoch}, step {k // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            for key, v in terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + v
        entry = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                 "terms": {k: v / len(losses) for k, v in term_sums.items()}}
        last_epoch = epoch + 1 == n_epochs
        if val_set and ((epoch + 1) % eval_every == 0 or last_epoch):
            entry["val"] = validation_metric(model, config, list(val_set), stats, device)
            metric = entry["val"]["metric"]
        elif val_set:
            metric = None
        else:
            metric = -entry["train_loss"]
        if metric is not None and metric > res.best_metric:
            res.best_metric, res.best_epoch = metric, epoch + 1
            save_checkpoint(out / "best", model, config, stats, epoch + 1, metric)
        entry["seconds"] = round(time.time() - t0, 3)
        res.history.append(entry)
        with open(log_path, "a") as f:
            f.write(json.dumps(entry) + "\n")
        save_checkpoint(out / "last", model, config, stats, epoch + 1, metric, opt,
                        extra={"best_metric": res.best_metric, "best_epoch": res.best_epoch})
        log.info("epoch %d loss %.4f %s", epoch + 1, entry["train_loss"], entry.get("val", ""))
    return res


def train(config: RunConfig, samples: Sequence[SITSSample] | None = None, resume: bool = False,
          epochs: int | None = None) -> FitResult:
    """Train on the fold's training split, selecting on its validation split."""
    samples = load_samples(config) if samples is None else samples
    tr, va, _ = split_samples(samples, config)
    return fit(config, tr, va, config.out, resume=resume, epochs=epochs)


# --------------------------------------------------------------------------- evaluation

def load_model(config: RunConfig, checkpoint: str | Path):
    ck = load_checkpoint(checkpoint, expected=config)
    device = get_device(config.device)
    model = build_model(config)
    model.load_state_dict(ck.state)
    return model.to(device).eval(), ck.norm_stats, device


def _split(samples, config, split):
    tr, va, te = split_samples(samples, config)
    try:
        return {"train": tr, "val": va, "test": te, "all": list(samples)}[split]
    except KeyError:
        raise ConfigError(f"unknown split {split!r}") from None


def evaluate(config: RunConfig, checkpoint: str | Path | None = None, split: str = "test",
             samples: Sequence[SITSSample] | None = None, out: str | Path | None = None,
             figures_out: bool = True) -> dict:
    """Metrics of a checkpoint on a split; writes ``eval_<split>.json/.csv`` and figures."""
    checkpoint = Path(checkpoint or Path(config.out) / "best")
    model, stats, device = load_model(config, checkpoint)
    samples = load_samples(config) if samples is None else list(samples)
    evald = _split(samples, config, split)
    if not evald:
        raise EmptyEvaluation(f"split {split!r} of fold {config.fold} is empty")
    if config.data.max_dates:
        evald = [s.truncated(config.data.max_dates) for s in evald]
    names = [f"class_{k}" for k in range(total_classes(config.n_classes))]
    if config.task == "semantic":
        preds = predict_semantic(model, evald, stats, device, config.batch_size)
        report = {"semantic": semantic_report(preds, evald, config)}
    else:
        masks, _, _ = predict_panoptic(model, evald, stats, device, config.batch_size)
        val = _split(samples, config, "val")
        if config.quality_threshold == "tune" and split != "val" and val:
            vmasks, _, _ = predict_panoptic(model, val, stats, device, config.batch_size)
            thr = _threshold(config, vmasks, val)
        else:
            thr = _threshold(config, masks, evald)
        pan = panoptic_report(masks, evald, config, thr)
        pan.pop("maps")
        report = {"panoptic": pan, "semantic": pan.pop("semantic")}
    report["split"] = split
    report["checkpoint"] = str(checkpoint)
    report["n_samples"] = len(evald)
    if out is not None or figures_out:
        out = Path(out or config.out)
        write_report({k: v for k, v in report.items() if v is not None}, out / f"eval_{split}",
                     names)
        sem = report.get("semantic")
        if figures_out and sem is not None:
            figures.confusion_figure(sem["confusion"], out / f"confusion_{split}.png")
            figures.iou_bars(sem["IoU"], names, out / f"iou_{split}.png")
    return report


def predict(config: RunConfig, checkpoint: str | Path | None = None, sample: int | str = 0,
            samples: Sequence[SITSSample] | None = None, out: str | Path | None = None,
            n_dates: int = 8) -> dict[str, Path]:
    """Maps and figures for one sample (index into the dataset or sample id)."""
    checkpoint = Path(checkpoint or Path(config.out) / "best")
    model, stats, device = load_model(config, checkpoint)
    samples = load_samples(config) if samples is None else list(samples)
    if isinstance(sample, str) and not sample.isdigit():
        match = [s for s in samples if s.sample_id == sample]
        if not match:
            raise EmptyEvaluation(f"no sample with id {sample!r}")
        s = match[0]
    else:
        s = samples[int(sample)]
    out = Path(out or Path(config.out) / "predict") / s.sample_id
    out.mkdir(parents=True, exist_ok=True)
    x, dates, pad = to_tensors([s], stats, device)
    paths = {}
    with torch.no_grad():
        if config.task == "semantic":
            logits, pyr = model(x, dates, pad, return_pyramid=True)
            sem = logits.argmax(dim=1)[0].cpu().numpy()
            paths["semantic"] = figures.save_label_png(sem, out / "semantic.png")
        else:
            res = model(x, dates, pad)
            pyr = res.pyramid
            masks = panmerge.from_proposals(res.proposals[0], tuple(s.semantic.shape),
                                            config.paps.mask_threshold)
            thr = 0.0 if config.quality_threshold == "tune" else float(config.quality_threshold)
            pmap = panmerge.to_panoptic(panmerge.resolve_overlaps(masks, thr, config.paps.min_remain),
                                        s.semantic.shape)
            figures.attach_colors(pmap)
            paths.update(panmerge.save_panoptic(pmap, out / "panoptic"))
            paths["semantic"] = out / "panoptic_semantic.png"
            paths["heatmap"] = figures.render_heatmap(res.heatmap[0].cpu().numpy(), out / "heatmap.png")
            paths["saliency"] = figures.render_heatmap(torch.sigmoid(res.saliency[0]).cpu().numpy(),
                                                       out / "saliency.png")
            paths["overlay"] = figures.panoptic_overlay(figures.rgb_composite(s), pmap,
                                                        out / "overlay.png")
    if pyr.a:
        attn = pyr.a[-1][:, 0].cpu().numpy()           # G x T x h x w
        real = np.flatnonzero(pad[0].cpu().numpy())
        pick = real[np.unique(np.linspace(0, len(real) - 1, min(n_dates, len(real))).round().astype(int))]
        paths["attention"] = figures.attention_montage(attn[:, pick], out / "attention.png")
    return paths


# --------------------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("variant", "params", "best_epoch", "val_metric", "val_OA", "val_mIoU",
                    "test_OA", "test_mIoU")


def ablate(config: RunConfig, variants: Sequence[str], samples: Sequence[SITSSample] | None = None,
           out: str | Path | None = None, evaluate_test: bool = True) -> list[dict]:
    """Train every variant with the same seed, data and schedule; writes ``ablation.csv``."""
    for v in variants:
        if v not in ABLATIONS:
            raise UnknownAblation(f"unknown ablation {v!r}; expected one of {ABLATIONS}")
    out = Path(out or config.out)
    samples = load_samples(config) if samples is None else list(samples)
    rows = []
    for v in variants:
        cfg = config.replace(model=config.model.replace(ablation=v), out=str(out / v))
        res = train(cfg, samples)
        val = evaluate(cfg, split="val", samples=samples, figures_out=False) \
            if _split(samples, cfg, "val") else None
        row = {"variant": v, "params": count_parameters(res.model), "best_epoch": res.best_epoch,
               "val_metric": res.best_metric}
        row.update(_summary("val", val))
        if evaluate_test and _split(samples, cfg, "test"):
            row.update(_summary("test", evaluate(cfg, split="test", samples=samples,
                                                 figures_out=False)))
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(ABLATION_COLUMNS)
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, restval="")
        w.writeheader()
        w.writerows(rows)
    return rows


def _summary(prefix, report):
    if report is None:
        return {}
    out = {}
    sem = report.get("semantic")
    if sem is not None:
        out[f"{prefix}_OA"] = sem["OA"]
        out[f"{prefix}_mIoU"] = sem["mIoU"]
    pan = report.get("panoptic")
    if pan is not None:
        for k in ("SQ", "RQ", "PQ"):
            out[f"{prefix}_{k}"] = pan[k]
    return out
