"""Parcels-as-Points: single-stage panoptic head on top of the U-TAE pyramid.

Parcels are detected as local maxima of a single centerness heatmap. Each
detected center reads a multi-scale feature vector from the decoder maps and
predicts a box size, class probabilities and a coarse ``S x S`` shape patch.
The shape patch is resized to the box, added to a crop of a shared saliency map
and refined by a small residual CNN into a pixel-precise mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ParcelRecord, kernel_exponents, pixel_to_parcel_map
from .errors import SizeError
from .utae import UTAE, MaybeBatchNorm1d, UTAEConfig

FOCAL_BETA = 4
HEATMAP_EPS = 1e-7
CENTER_TOL = 1e-6
HEATMAP_PRIOR_BIAS = -2.19   # sigmoid^-1(0.1)


@dataclass(frozen=True)
class PaPsConfig:
    n_classes: int = 18             # crop classes predicted by the class head
    shape_size: int = 16            # S
    heatmap_width: int = 32
    heatmap_kernel: int = 5         # kernel of the first heatmap/saliency layer
    mask_cnn_width: int = 16
    multiplicative_saliency: bool = False
    mask_threshold: float = 0.4
    min_remain: float = 0.5
    # Inference-time proposal budget per image.
    min_confidence: float = 0.05
    max_proposals: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- targets

def build_heatmap_target(parcels: Sequence[ParcelRecord], H: int, W: int) -> np.ndarray:
    """Pointwise max of the parcels' anisotropic Gaussian kernels (void parcels skipped)."""
    parcels = [p for p in parcels if not p.is_void]
    if not parcels:
        return np.zeros((H, W))
    return np.exp(-kernel_exponents(parcels, H, W)).max(axis=0)


def center_loss(m: torch.Tensor, m_hat: torch.Tensor, n_parcels: int,
                valid: torch.Tensor | None = None) -> torch.Tensor:
    """Penalty-reduced focal loss on the centerness heatmap, normalized by parcel count.

    ``valid`` optionally masks out pixels (void) from the sum. With no parcel
    the loss is defined as zero, with zero gradient.
    """
    if n_parcels == 0:
        return m.sum() * 0.0
    m = m.clamp(HEATMAP_EPS, 1 - HEATMAP_EPS)
    is_center = m_hat >= 1 - CENTER_TOL
    pos = torch.log(m)
    neg = (1 - m_hat) ** FOCAL_BETA * torch.log(1 - m)
    per_pixel = torch.where(is_center, pos, neg)
    if valid is not None:
        per_pixel = per_pixel * valid
    return -per_pixel.sum() / n_parcels


# --------------------------------------------------------------------------- centers

def local_maxima(m: torch.Tensor) -> torch.Tensor:
    """Boolean map of pixels equal to their 3x3 neighborhood max (replicate borders).

    ``m``: ... x H x W.
    """
    shape = m.shape
    x = m.reshape(-1, 1, *shape[-2:])
    pooled = F.max_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    return (x == pooled).reshape(shape)


def detect_centers(m) -> list[tuple[int, int, float]]:
    """Local maxima of a single H x W heatmap as ``(i, j, q)``, by ``q`` descending.

    Ties in ``q`` are broken by row then column.
    """
    mt = torch.as_tensor(m)
    peaks = torch.nonzero(local_maxima(mt)).tolist()
    mv = mt.detach().cpu().numpy()
    out = [(int(i), int(j), float(mv[i, j])) for i, j in peaks]
    out.sort(key=lambda c: (-c[2], c[0], c[1]))
    return out


def assign_centers(parcels: Sequence[ParcelRecord], centers: Sequence[tuple[int, int, float]],
                   p2p: np.ndarray | None = None) -> dict[int, int]:
    """Map parcel id -> index into ``centers`` of its best detected center.

    A center is eligible for parcel ``p`` when the pixel-to-parcel map sends its
    coordinates to ``p``; the eligible center with highest centerness wins.
    Parcels with no eligible center are absent from the result (not detected).
    """
    if p2p is None:
        H, W = parcels[0].mask.shape
        p2p = pixel_to_parcel_map(parcels, H, W)
    best: dict[int, int] = {}
    ids = {p.id for p in parcels}
    for k, (i, j, q) in enumerate(centers):
        pid = int(p2p[i, j])
        if pid not in ids:
            continue
        if pid not in best or q > centers[best[pid]][2]:
            best[pid] = k
    return best


def extract_multiscale_features(d: Sequence[torch.Tensor], b: torch.Tensor, i: torch.Tensor,
                                j: torch.Tensor) -> torch.Tensor:
    """Concatenate ``d^l[b, :, i // 2^(l-1), j // 2^(l-1)]`` over levels (M x sum D_l)."""
    feats = []
    for l, dl in enumerate(d):
        s = 2 ** l
        feats.append(dl[b, :, torch.div(i, s, rounding_mode="floor"), torch.div(j, s, rounding_mode="floor")])
    return torch.cat(feats, dim=1)


# --------------------------------------------------------------------------- shapes

def box_window(center, size, H, W):
    """Box of ``ceil(h) x ceil(w)`` centered on ``center`` and its clipped part.

    Returns ``(r0, c0, bh, bw)`` of the full box and ``(rr0, rr1, cc0, cc1)`` of
    the clipped window in image coordinates.
    """
    bh, bw = int(math.ceil(size[0])), int(math.ceil(size[1]))
    if bh < 1 or bw < 1:
        raise SizeError(f"degenerate box size {size}")
    r0 = center[0] - bh // 2
    c0 = center[1] - bw // 2
    return (r0, c0, bh, bw), (max(r0, 0), min(r0 + bh, H), max(c0, 0), min(c0 + bw, W))


def resize_patch(patch: torch.Tensor, bh: int, bw: int) -> torch.Tensor:
    """Bilinear resize of an ``S x S`` patch to ``bh x bw``."""
    return F.interpolate(patch[None, None], size=(bh, bw), mode="bilinear",
                         align_corners=False)[0, 0]


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel spatial normalization; unlike the torch layers it
    accepts 1 x 1 inputs (which it maps to zero)."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class MaskRefiner(nn.Module):
    """Residual CNN 1 -> w -> w -> 1, instance normalization after the first layer."""

    def __init__(self, width=16):
        super().__init__()
        self.conv1 = nn.Conv2d(1, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x):
        h = F.relu(instance_norm(self.conv1(x)))
        h = F.relu(self.conv2(h))
        return self.conv3(h)


def assemble_shape(shape_patch, z, center, size, refiner: nn.Module | None = None,
                   multiplicative: bool = False):
    """Pixel-precise mask probabilities of one proposal.

    ``shape_patch``: S x S logits, ``z``: H x W saliency logits. The patch is
    resized to the full predicted box; the parts of the box outside the image
    are dropped, for both the resized patch and the saliency crop. Returns the
    mask ``l`` over the clipped window and the window ``(r0, r1, c0, c1)``.
    """
    H, W = z.shape
    (r0, c0, bh, bw), (rr0, rr1, cc0, cc1) = box_window(center, size, H, W)
    resized = resize_patch(shape_patch, bh, bw)[rr0 - r0: rr1 - r0, cc0 - c0: cc1 - c0]
    crop = z[rr0:rr1, cc0:cc1]
    if multiplicative:
        mask = torch.sigmoid(resized) * torch.sigmoid(crop)
    else:
        pre = (resized + crop)[None, None]
        if refiner is not None:
            pre = pre + refiner(pre)
        mask = torch.sigmoid(pre)[0, 0]
    return mask, (rr0, rr1, cc0, cc1)


# --------------------------------------------------------------------------- module

@dataclass
class Proposal:
    batch_index: int
    center: tuple[int, int]
    quality: float
    size: tuple[float, float]
    class_probs: np.ndarray
    shape_patch: np.ndarray
    mask: np.ndarray
    window: tuple[int, int, int, int]

    @property
    def predicted_class(self) -> int:
        """Crop class id (1-based)."""
        return int(np.argmax(self.class_probs)) + 1


@dataclass
class PaPsOutput:
    heatmap: torch.Tensor
    saliency: torch.Tensor
    loss: torch.Tensor | None = None
    terms: dict = field(default_factory=dict)
    proposals: list = field(default_factory=list)
    pyramid: object = None


def _head(d_in, hidden, d_out):
    layers = []
    for a, b in zip((d_in,) + hidden[:-1], hidden):
        layers += [nn.Linear(a, b), MaybeBatchNorm1d(b), nn.ReLU()]
    layers.append(nn.Linear(hidden[-1], d_out))
    return nn.Sequential(*layers)


class PaPs(nn.Module):
    def __init__(self, decoder_widths: Sequence[int], config: PaPsConfig = PaPsConfig()):
        super().__init__()
        self.config = cfg = config
        d1 = decoder_widths[0]
        stack = sum(decoder_widths)
        k = cfg.heatmap_kernel

        def conv_head():
            return nn.Sequential(
                nn.Conv2d(d1, cfg.heatmap_width, k, padding=k // 2, padding_mode="reflect"),
                nn.BatchNorm2d(cfg.heatmap_width), nn.ReLU(),
                nn.Conv2d(cfg.heatmap_width, 1, 3, padding=1, padding_mode="reflect"),
            )

        self.heatmap_conv = conv_head()
        # start from a low uniform centerness, as usual for focal-loss keypoint heads
        nn.init.constant_(self.heatmap_conv[-1].bias, HEATMAP_PRIOR_BIAS)
        self.saliency_conv = conv_head()
        self.shape_mlp = _head(stack, (stack // 2,), cfg.shape_size ** 2)
        self.size_mlp = _head(stack, (stack // 2,), 2)
        self.class_mlp = _head(stack, (stack // 2, stack // 4), cfg.n_classes)
        self.refiner = None if cfg.multiplicative_saliency else MaskRefiner(cfg.mask_cnn_width)

    def heatmap(self, d1):
        return torch.sigmoid(self.heatmap_conv(d1))[:, 0]

    def saliency(self, d1):
        """Saliency logits shared by all proposals, B x H x W."""
        return self.saliency_conv(d1)[:, 0]

    def predict_heads(self, feats):
        """Sizes (M x 2, positive), class logits (M x K), shape logits (M x S x S)."""
        S = self.config.shape_size
        size = F.softplus(self.size_mlp(feats))
        logits = self.class_mlp(feats)
        shape = self.shape_mlp(feats).view(-1, S, S)
        return size, logits, shape

    def assemble(self, shape_patch, z, center, size):
        return assemble_shape(shape_patch, z, center, size, self.refiner,
                              self.config.multiplicative_saliency)

    # -- training ----------------------------------------------------------

    def forward(self, d: Sequence[torch.Tensor], targets=None, p2p_maps=None, heatmap_targets=None,
                void_label: int | None = None):
        """Loss computation when ``targets`` (one SITSSample per batch row) is given,
        otherwise proposal extraction.
        """
        m = self.heatmap(d[0])
        z = self.saliency(d[0])
        if targets is None:
            return PaPsOutput(m, z, proposals=self.propose(d, m, z))
        return self._loss(d, m, z, targets, p2p_maps, heatmap_targets, void_label)

    def _loss(self, d, m, z, targets, p2p_maps, heatmap_targets, void_label):
        B, H, W = m.shape
        dev, dt = m.device, m.dtype
        n_parcels = 0
        c_loss = m.sum() * 0.0
        rows, picks = [], []
        for b, sample in enumerate(targets):
            parcels = sample.valid_parcels()
            n_parcels += len(parcels)
            if heatmap_targets is not None:
                m_hat = heatmap_targets[b]
            else:
                m_hat = build_heatmap_target(parcels, H, W)
            m_hat = torch.as_tensor(m_hat, dtype=dt, device=dev)
            valid = None
            if void_label is not None:
                valid = torch.as_tensor(sample.semantic != void_label, device=dev)
            c_loss = c_loss + center_loss(m[b], m_hat, 1, valid)
            if not parcels:
                continue
            p2p = p2p_maps[b] if p2p_maps is not None else pixel_to_parcel_map(parcels, H, W)
            centers = detect_centers(m[b].detach())
            for pid, k in sorted(assign_centers(parcels, centers, p2p).items()):
                rows.append((b, centers[k][0], centers[k][1]))
                picks.append(sample.parcel(pid))
        c_loss = c_loss / n_parcels if n_parcels else m.sum() * 0.0
        terms = {"center": c_loss.detach(), "n_parcels": n_parcels, "n_detected": len(picks)}
        if not picks:
            terms.update(cls=0.0, size=0.0, shape=0.0)
            return PaPsOutput(m, z, loss=c_loss, terms=terms)

        idx = torch.tensor(rows, device=dev)
        feats = extract_multiscale_features(d, idx[:, 0], idx[:, 1], idx[:, 2])
        size, logits, shape = self.predict_heads(feats)
        cls_t = torch.tensor([p.crop_class - 1 for p in picks], device=dev)
        l_cls = F.cross_entropy(logits, cls_t, reduction="none")
        true_size = torch.tensor([p.bbox_size for p in picks], dtype=dt, device=dev)
        l_size = ((size - true_size).abs() / true_size).sum(dim=1)
        l_shape = []
        for k, ((b, i, j), p) in enumerate(zip(rows, picks)):
            mask, (r0, r1, c0, c1) = self.assemble(shape[k], z[b], (i, j), size[k].detach().tolist())
            target = torch.tensor(p.mask[r0:r1, c0:c1], dtype=dt, device=dev)
            l_shape.append(F.binary_cross_entropy(mask.clamp(HEATMAP_EPS, 1 - HEATMAP_EPS), target))
        l_shape = torch.stack(l_shape)
        per_parcel = l_cls + l_size + l_shape
        loss = c_loss + per_parcel.mean()
        terms.update(cls=float(l_cls.detach().mean()), size=float(l_size.detach().mean()),
                     shape=float(l_shape.detach().mean()))
        return PaPsOutput(m, z, loss=loss, terms=terms)

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def propose(self, d, m, z) -> list[list[Proposal]]:
        cfg = self.config
        B = m.shape[0]
        out = []
        for b in range(B):
            centers = [c for c in detect_centers(m[b]) if c[2] >= cfg.min_confidence]
            centers = centers[: cfg.max_proposals]
            if not centers:
                out.append([])
                continue
            idx = torch.tensor([(b, i, j) for i, j, _ in centers], device=m.device)
            feats = extract_multiscale_features(d, idx[:, 0], idx[:, 1], idx[:, 2])
            size, logits, shape = self.predict_heads(feats)
            probs = torch.softmax(logits, dim=1)
            props = []
            for k, (i, j, q) in enumerate(centers):
                sz = size[k].tolist()
                mask, window = self.assemble(shape[k], z[b], (i, j), sz)
                props.append(Proposal(b, (i, j), q, tuple(sz), probs[k].cpu().numpy(),
                                      shape[k].cpu().numpy(), mask.cpu().numpy(), window))
            out.append(props)
        return out


def head_losses(size, class_logits, mask, true_size, true_class, true_mask_crop):
    """Per-parcel ``(class, size, shape)`` losses for one detected parcel.

    ``true_class`` is the 1-based crop class; ``true_mask_crop`` the ground truth
    mask cropped on the same clipped window as ``mask``.
    """
    size = torch.as_tensor(size)
    ts = torch.as_tensor(true_size, dtype=size.dtype)
    l_size = ((size - ts).abs() / ts).sum()
    l_cls = -torch.log_softmax(torch.as_tensor(class_logits), dim=-1)[int(true_class) - 1]
    target = torch.as_tensor(true_mask_crop, dtype=torch.as_tensor(mask).dtype)
    l_shape = F.binary_cross_entropy(torch.as_tensor(mask).clamp(HEATMAP_EPS, 1 - HEATMAP_EPS), target)
    return l_cls, l_size, l_shape


def total_loss(l_center, per_parcel_terms) -> torch.Tensor:
    """``l_center`` plus the mean over detected parcels of their summed head losses."""
    if not per_parcel_terms:
        return torch.as_tensor(l_center)
    sums = [sum(t) for t in per_parcel_terms]
    return l_center + sum(sums) / len(sums)


class UTAEPaPs(nn.Module):
    """U-TAE backbone (without semantic head) followed by the PaPs module."""

    def __init__(self, utae_config: UTAEConfig, paps_config: PaPsConfig = PaPsConfig()):
        super().__init__()
        if utae_config.out_conv:
            utae_config = utae_config.replace(out_conv=())
        self.backbone = UTAE(utae_config)
        self.head = PaPs(utae_config.decoder_widths, paps_config)

    def forward(self, x, dates, pad_mask, targets=None, void_label=None) -> PaPsOutput:
        _, pyr = self.backbone(x, dates, pad_mask, return_pyramid=True)
        out = self.head(pyr.d, targets=targets, void_label=void_label)
        out.pyramid = pyr
        return out


# --------------------------------------------------------------------------- debugging dump

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths of a binary mask, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def dump_proposals(proposals: Sequence[Proposal], path, threshold: float = 0.4) -> None:
    """One JSON object per line: center, q, size, class argmax, window and RLE mask."""
    import json

    with open(path, "w") as f:
        for p in proposals:
            r0, r1, c0, c1 = p.window
            f.write(json.dumps({
                "batch_index": p.batch_index, "center": list(p.center), "q": float(p.quality),
                "size": [float(s) for s in p.size], "class": p.predicted_class,
                "window": [r0, r1, c0, c1], "mask_shape": [r1 - r0, c1 - c0],
                "mask_rle": rle_encode(np.asarray(p.mask) >= threshold),
            }) + "\n")
