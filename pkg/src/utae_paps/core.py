"""Shared data model: image sequences, parcel annotations, padding and batching.

Label convention used everywhere in the package:

* ``0`` is the background ("stuff") class,
* ``1..K`` are crop classes (``K = 18`` for PASTIS),
* ``K + 1`` is the void label, excluded from all losses and metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateStats, EmptyBatch, ShapeMismatch

N_CROP_CLASSES = 18
BACKGROUND = 0
VOID_LABEL = N_CROP_CLASSES + 1
N_TOTAL_CLASSES = N_CROP_CLASSES + 2

# Kernel deviation is this fraction of the parcel's bounding box extent.
SIGMA_FRACTION = 1.0 / 20.0
SIGMA_FLOOR = 0.5


def void_label(n_classes: int) -> int:
    return n_classes + 1


def total_classes(n_classes: int) -> int:
    return n_classes + 2


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParcelRecord:
    """One annotated parcel.

    ``center`` is an integer ``(row, col)`` pair lying inside ``mask`` and
    ``bbox_size`` the ``(height, width)`` of the tight axis-aligned box of
    ``mask`` in pixels.
    """

    id: int
    center: tuple[int, int]
    bbox_size: tuple[float, float]
    mask: np.ndarray
    crop_class: int
    is_void: bool = False

    def __post_init__(self):
        mask = _frozen(np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "mask", mask)
        if not mask.any():
            raise ValueError(f"parcel {self.id}: empty mask")
        i, j = self.center
        H, W = mask.shape
        if not (0 <= i < H and 0 <= j < W):
            raise ValueError(f"parcel {self.id}: center {self.center} outside image")
        h, w = self.bbox_size
        if h < 1 or w < 1:
            raise ValueError(f"parcel {self.id}: bbox size {self.bbox_size} < 1")
        r0, c0, r1, c1 = self.bbox
        if (r1 - r0, c1 - c0) != (int(round(h)), int(round(w))):
            raise ValueError(f"parcel {self.id}: bbox size does not match mask extent")

    @classmethod
    def from_mask(cls, id: int, mask: np.ndarray, crop_class: int, is_void: bool = False):
        """Derive center and box size from a binary mask.

        The center is the mask centroid rounded to the nearest pixel, snapped
        to the closest in-mask pixel when the rounded centroid falls outside
        (non-convex parcels).
        """
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            raise ValueError(f"parcel {id}: empty mask")
        ci, cj = int(np.rint(rows.mean())), int(np.rint(cols.mean()))
        if not mask[ci, cj]:
            d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
            k = int(np.argmin(d2))
            ci, cj = int(rows[k]), int(cols[k])
        h = float(rows.max() - rows.min() + 1)
        w = float(cols.max() - cols.min() + 1)
        return cls(id=int(id), center=(ci, cj), bbox_size=(h, w), mask=mask,
                   crop_class=int(crop_class), is_void=bool(is_void))

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Half-open box ``(row0, col0, row1, col1)`` of the mask."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    @property
    def sigmas(self) -> tuple[float, float]:
        h, w = self.bbox_size
        return max(h * SIGMA_FRACTION, SIGMA_FLOOR), max(w * SIGMA_FRACTION, SIGMA_FLOOR)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class SITSSample:
    """A single patch: ``T x C x H x W`` reflectances plus panoptic labels."""

    images: np.ndarray
    dates: np.ndarray
    semantic: np.ndarray
    instances: np.ndarray
    parcels: tuple[ParcelRecord, ...] = ()
    sample_id: str = ""
    fold: int = 1

    def __post_init__(self):
        images = _frozen(np.asarray(self.images, dtype=np.float32))
        dates = _frozen(np.asarray(self.dates, dtype=np.int64))
        semantic = _frozen(np.asarray(self.semantic, dtype=np.int64))
        instances = _frozen(np.asarray(self.instances, dtype=np.int64))
        parcels = tuple(sorted(self.parcels, key=lambda p: p.id))
        for name, value in (("images", images), ("dates", dates), ("semantic", semantic),
                            ("instances", instances), ("parcels", parcels)):
            object.__setattr__(self, name, value)

        if images.ndim != 4 or images.shape[0] < 1:
            raise ShapeMismatch(f"images must be T x C x H x W with T >= 1, got {images.shape}")
        T, _, H, W = images.shape
        if dates.shape != (T,):
            raise ShapeMismatch(f"dates shape {dates.shape} != ({T},)")
        if T > 1 and np.any(np.diff(dates) <= 0):
            raise ValueError("dates must be strictly increasing")
        if semantic.shape != (H, W) or instances.shape != (H, W):
            raise ShapeMismatch("label maps must be H x W")
        if not 1 <= self.fold <= 5:
            raise ValueError(f"fold {self.fold} outside 1..5")

        by_id = {p.id: p for p in parcels}
        if len(by_id) != len(parcels):
            raise ValueError("duplicate parcel ids")
        ids = np.unique(instances)
        for pid in ids[ids > 0]:
            if int(pid) not in by_id:
                raise ValueError(f"instance {pid} has no parcel record")
            classes = np.unique(semantic[instances == pid])
            if classes.size != 1:
                raise ValueError(f"instance {pid} spans several semantic classes")

    @property
    def T(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.images.shape

    def parcel(self, pid: int) -> ParcelRecord:
        for p in self.parcels:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def valid_parcels(self) -> list[ParcelRecord]:
        return [p for p in self.parcels if not p.is_void]

    def truncated(self, n_dates: int) -> "SITSSample":
        """Copy restricted to the first ``n_dates`` acquisitions."""
        n = max(1, min(n_dates, self.T))
        return SITSSample(self.images[:n], self.dates[:n], self.semantic, self.instances,
                          self.parcels, self.sample_id, self.fold)


@dataclass(frozen=True, eq=False)
class PaddedBatch:
    images: np.ndarray      # B x T_max x C x H x W
    pad_mask: np.ndarray    # B x T_max, True on real acquisitions
    dates: np.ndarray       # B x T_max
    targets: tuple[SITSSample, ...] = field(default=())

    @property
    def lengths(self) -> np.ndarray:
        return self.pad_mask.sum(axis=1)

    def __len__(self) -> int:
        return self.images.shape[0]


def pad_and_batch(samples: Sequence[SITSSample]) -> PaddedBatch:
    """Stack samples, appending all-zero frames after shorter sequences."""
    samples = list(samples)
    if not samples:
        raise EmptyBatch("cannot batch an empty list of samples")
    chw = samples[0].images.shape[1:]
    for s in samples[1:]:
        if s.images.shape[1:] != chw:
            raise ShapeMismatch(f"sample {s.sample_id!r} has C,H,W {s.images.shape[1:]}, expected {chw}")
    t_max = max(s.T for s in samples)
    B = len(samples)
    images = np.zeros((B, t_max) + chw, dtype=np.float32)
    pad_mask = np.zeros((B, t_max), dtype=bool)
    dates = np.zeros((B, t_max), dtype=np.int64)
    for b, s in enumerate(samples):
        images[b, : s.T] = s.images
        pad_mask[b, : s.T] = True
        dates[b, : s.T] = s.dates
    return PaddedBatch(_frozen(images), _frozen(pad_mask), _frozen(dates), tuple(samples))


def unpad(batch: PaddedBatch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`pad_and_batch`: per-sample ``(images, dates)``."""
    out = []
    for b, n in enumerate(batch.lengths):
        out.append((batch.images[b, :n], batch.dates[b, :n]))
    return out


def append_padding(batch: PaddedBatch, n: int) -> PaddedBatch:
    """Append ``n`` extra padded (all-zero) frames to every sequence."""
    B, T = batch.pad_mask.shape
    images = np.concatenate([batch.images, np.zeros((B, n) + batch.images.shape[2:], np.float32)], 1)
    pad_mask = np.concatenate([batch.pad_mask, np.zeros((B, n), bool)], 1)
    dates = np.concatenate([batch.dates, np.zeros((B, n), np.int64)], 1)
    return PaddedBatch(_frozen(images), _frozen(pad_mask), _frozen(dates), batch.targets)


def normalize_channels(batch: PaddedBatch, stats) -> PaddedBatch:
    """Standardize real frames per channel; padded frames stay exactly zero."""
    mean, std = (np.asarray(x, dtype=np.float64) for x in stats)
    if np.any(std <= 0):
        raise DegenerateStats("channel std must be positive")
    C = batch.images.shape[2]
    if mean.shape != (C,) or std.shape != (C,):
        raise ShapeMismatch(f"stats must have shape ({C},)")
    norm = (batch.images - mean[None, None, :, None, None]) / std[None, None, :, None, None]
    norm = np.where(batch.pad_mask[:, :, None, None, None], norm, 0.0).astype(np.float32)
    return PaddedBatch(_frozen(norm), batch.pad_mask, batch.dates, batch.targets)


def kernel_exponents(parcels: Sequence[ParcelRecord], H: int, W: int) -> np.ndarray:
    """Per-parcel Gaussian exponent ``q_p(i, j)`` (P x H x W); kernel is ``exp(-q)``."""
    ii = np.arange(H, dtype=np.float64)[:, None]
    jj = np.arange(W, dtype=np.float64)[None, :]
    out = np.empty((len(parcels), H, W))
    for k, p in enumerate(parcels):
        sv, sh = p.sigmas
        ci, cj = p.center
        out[k] = (ii - ci) ** 2 / (2 * sv ** 2) + (jj - cj) ** 2 / (2 * sh ** 2)
    return out


def pixel_to_parcel_map(parcels: Sequence[ParcelRecord], H: int, W: int) -> np.ndarray:
    """Id of the parcel whose kernel is largest at each pixel.

    Comparison is done on the kernel exponent so that pixels far from every
    center, where all kernels underflow to zero, still go to the parcel with the
    smallest Mahalanobis distance. Ties go to the lowest parcel id.
    """
    if not parcels:
        return np.zeros((H, W), dtype=np.int64)
    parcels = sorted(parcels, key=lambda p: p.id)
    ids = np.array([p.id for p in parcels], dtype=np.int64)
    return ids[np.argmin(kernel_exponents(parcels, H, W), axis=0)]
