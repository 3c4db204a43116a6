"""Image outputs: maps, attention montages, panoptic overlays and metric charts."""
from __future__ import annotations

import colorsys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

HEATMAP_CMAP = "viridis"
GOLDEN = 0.618033988749895


def _prep(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def render_heatmap(m: np.ndarray, path, cmap: str = HEATMAP_CMAP) -> Path:
    """Values in [0, 1] mapped through ``cmap`` at one pixel per array cell."""
    path = _prep(path)
    plt.imsave(path, np.asarray(m, dtype=np.float64), cmap=cmap, vmin=0.0, vmax=1.0)
    return path


def heatmap_rgb(m: np.ndarray, cmap: str = HEATMAP_CMAP) -> np.ndarray:
    """The RGB array :func:`render_heatmap` writes, for golden comparisons."""
    norm = matplotlib.colors.Normalize(vmin=0.0, vmax=1.0)
    rgba = matplotlib.colormaps[cmap](norm(np.asarray(m, dtype=np.float64)), bytes=True)
    return rgba[..., :3]


def save_label_png(labels: np.ndarray, path) -> Path:
    path = _prep(path)
    Image.fromarray(np.asarray(labels).astype(np.uint16)).save(path)
    return path


def montage_array(attn: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile ``G x n x h x w`` masks: one row per head, one column per date."""
    G, n, h, w = attn.shape
    out = np.ones((G * (h + pad) - pad, n * (w + pad) - pad))
    for g in range(G):
        for t in range(n):
            out[g * (h + pad): g * (h + pad) + h, t * (w + pad): t * (w + pad) + w] = attn[g, t]
    return out


def attention_montage(attn: np.ndarray, path, pad: int = 1, scale: int = 4) -> Path:
    """Save the montage of per-head attention masks for the selected dates."""
    path = _prep(path)
    tiles = montage_array(np.asarray(attn), pad)
    tiles = np.kron(tiles, np.ones((scale, scale)))
    plt.imsave(path, tiles, cmap="magma", vmin=0.0, vmax=1.0)
    return path


def instance_color(instance_id: int) -> tuple[int, int, int]:
    """Deterministic, well-spread color of an instance id."""
    h = (instance_id * GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.75, 0.95)
    return int(round(255 * r)), int(round(255 * g)), int(round(255 * b))


def attach_colors(pmap) -> None:
    for rec in pmap.records:
        rec["color"] = list(instance_color(rec["id"]))


def rgb_composite(sample, channels=(2, 1, 0)) -> np.ndarray:
    """A uint8 RGB view of the middle acquisition, stretched per channel."""
    x = np.asarray(sample.images[sample.T // 2, list(channels)], dtype=np.float64)
    lo = np.percentile(x, 2, axis=(1, 2), keepdims=True)
    hi = np.percentile(x, 98, axis=(1, 2), keepdims=True)
    x = np.clip((x - lo) / np.maximum(hi - lo, 1e-12), 0, 1)
    return (255 * np.moveaxis(x, 0, -1)).round().astype(np.uint8)


def overlay_array(background: np.ndarray, pmap) -> np.ndarray:
    """Gray background with each instance painted in its table color."""
    gray = np.asarray(background, dtype=np.float64).mean(axis=-1)
    out = np.repeat((0.6 * gray).round().astype(np.uint8)[..., None], 3, axis=-1)
    for rec in pmap.records:
        color = rec.get("color") or instance_color(rec["id"])
        out[pmap.instance == rec["id"]] = color
    return out


def panoptic_overlay(background: np.ndarray, pmap, path) -> Path:
    path = _prep(path)
    Image.fromarray(overlay_array(background, pmap)).save(path)
    return path


def confusion_figure(counts: np.ndarray, path, names=None) -> Path:
    """Row-normalized confusion matrix."""
    path = _prep(path)
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xlabel("prediction")
    ax.set_ylabel("truth")
    if names is not None:
        ax.set_xticks(range(len(names)), names, rotation=90, fontsize=6)
        ax.set_yticks(range(len(names)), names, fontsize=6)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def iou_bars(iou: np.ndarray, names, path) -> Path:
    """Per-class IoU; absent classes (NaN) are skipped."""
    path = _prep(path)
    iou = np.asarray(iou, dtype=np.float64)
    keep = ~np.isnan(iou)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(np.flatnonzero(keep), iou[keep], color="tab:green")
    ax.set_xticks(np.flatnonzero(keep), [names[k] for k in np.flatnonzero(keep)],
                  rotation=90, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
