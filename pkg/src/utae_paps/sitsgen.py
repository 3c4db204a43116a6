"""Deterministic synthetic satellite image time series.

Layouts are Voronoi partitions of Poisson-sampled sites separated by one pixel
wide background corridors. Every crop class owns a double-logistic phenology
curve per channel; reflectances are that curve sampled at irregular dates plus
Gaussian noise, with occasional bright low-contrast clouds.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ParcelRecord, SITSSample, void_label
from .errors import EmptyLayout

MAX_LAYOUT_ATTEMPTS = 8


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    H: int = 64
    W: int = 64
    T_range: tuple[int, int] = (10, 14)
    n_classes: int = 5
    parcel_density: float = 2.0     # expected parcels per 1000 px
    cloud_prob: float = 0.1
    noise_std: float = 0.02
    channels: int = 10
    mean_gap: float = 5.0           # days between acquisitions
    background_prob: float = 0.1    # share of Voronoi cells left as background
    void_prob: float = 0.0          # share of parcels outside the nomenclature
    class_margin: float = 0.6       # min peak-date separation, as fraction of a class slot
    # All crop classes share one spectral signature and season length, so they
    # differ only by the timing of their peak (no class cue in a temporal mean).
    shared_spectra: bool = False

    def __post_init__(self):
        if self.H < 16 or self.W < 16:
            raise ValueError("H and W must be >= 16")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        lo, hi = self.T_range
        if lo < 4 or hi < lo:
            raise ValueError(f"invalid T_range {self.T_range}")
        if not 0.0 <= self.cloud_prob <= 1.0:
            raise ValueError("cloud_prob must lie in [0, 1]")
        if self.parcel_density <= 0 or self.noise_std < 0 or self.channels < 1:
            raise ValueError("invalid density / noise / channels")

    @property
    def season_days(self) -> float:
        return self.mean_gap * self.T_range[1]


@dataclass(frozen=True)
class PhenologyProfile:
    """Per-channel double-logistic curve ``baseline + amplitude * bump(t)``."""

    class_id: int
    onset: float
    peak: float
    senescence: float
    amplitude: np.ndarray   # (C,)
    baseline: np.ndarray    # (C,)
    slope: float = 6.0

    def __call__(self, days) -> np.ndarray:
        """Reflectance, shape ``(len(days), C)``."""
        t = np.asarray(days, dtype=np.float64)[:, None]
        rise = 1.0 / (1.0 + np.exp(-(t - self.onset) / self.slope))
        fall = 1.0 / (1.0 + np.exp(-(t - self.senescence) / self.slope))
        return np.clip(self.baseline + self.amplitude * (rise - fall), 0.0, 1.5)


@dataclass(frozen=True)
class Layout:
    instances: np.ndarray
    parcels: tuple[ParcelRecord, ...]


def make_profiles(config: GenConfig, rng: np.random.Generator) -> dict[int, PhenologyProfile]:
    """One profile per crop class, plus background (0) and void (K + 1).

    Peak dates come from disjoint slots of the season so any two crop classes
    differ in peak date by at least ``class_margin`` slot widths.
    """
    C = config.channels
    season = config.season_days
    K = config.n_classes
    slot = season / K
    order = rng.permutation(K)
    shared = (rng.uniform(0.12, 0.22) * season, rng.uniform(0.35, 0.7, C), rng.uniform(0.05, 0.2, C))
    profiles = {}
    for k in range(1, K + 1):
        s = order[k - 1]
        lo = s * slot + 0.5 * (1 - config.class_margin) * slot
        peak = lo + rng.uniform(0, config.class_margin * slot)
        width = rng.uniform(0.12, 0.22) * season
        amplitude, baseline = rng.uniform(0.35, 0.7, C), rng.uniform(0.05, 0.2, C)
        if config.shared_spectra:
            width, amplitude, baseline = shared
        profiles[k] = PhenologyProfile(
            class_id=k, onset=peak - width / 2, peak=peak, senescence=peak + width / 2,
            amplitude=amplitude, baseline=baseline, slope=season / 60,
        )
    profiles[0] = PhenologyProfile(
        class_id=0, onset=-1e4, peak=0.0, senescence=-1e4,
        amplitude=np.zeros(C), baseline=rng.uniform(0.25, 0.35, C), slope=1.0,
    )
    vpeak = rng.uniform(0, season)
    profiles[void_label(K)] = PhenologyProfile(
        class_id=void_label(K), onset=vpeak - season / 8, peak=vpeak,
        senescence=vpeak + season / 8, amplitude=rng.uniform(0.2, 0.5, C),
        baseline=rng.uniform(0.1, 0.3, C), slope=season / 60,
    )
    return profiles


def _voronoi(sites: np.ndarray, H: int, W: int) -> np.ndarray:
    ii, jj = np.mgrid[0:H, 0:W]
    d2 = (ii[None] - sites[:, 0, None, None]) ** 2 + (jj[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d2, axis=0)


def generate_layout(config: GenConfig, rng: np.random.Generator,
                    forced_class: int | None = None) -> Layout:
    """Partition the patch into parcels and background.

    Cells are grown from Poisson sites (nearest-site assignment); the pixel on
    one side of every cell border becomes background so that distinct parcels
    never touch 4-connectedly. ``forced_class`` pins the class of the first
    parcel (used to spread classes over folds).
    """
    H, W = config.H, config.W
    mu = config.parcel_density * H * W / 1000.0
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        n = rng.poisson(mu)
        if n == 0:
            continue
        sites = np.stack([rng.uniform(0, H, n), rng.uniform(0, W, n)], axis=1)
        cells = _voronoi(sites, H, W)
        border = np.zeros((H, W), dtype=bool)
        border[:, :-1] |= cells[:, :-1] != cells[:, 1:]
        border[:-1, :] |= cells[:-1, :] != cells[1:, :]

        keep_bg = rng.random(n) < config.background_prob
        classes = rng.integers(1, config.n_classes + 1, n)
        voids = rng.random(n) < config.void_prob
        instances = np.zeros((H, W), dtype=np.int64)
        parcels = []
        next_id = 1
        for c in range(n):
            mask = (cells == c) & ~border
            if keep_bg[c] or not mask.any():
                continue
            k = int(classes[c])
            is_void = bool(voids[c])
            if forced_class is not None and next_id == 1:
                k, is_void = forced_class, False
            instances[mask] = next_id
            parcels.append(ParcelRecord.from_mask(next_id, mask, k, is_void))
            next_id += 1
        if parcels:
            return Layout(instances, tuple(parcels))
    raise EmptyLayout(f"no parcel sampled after {MAX_LAYOUT_ATTEMPTS} attempts (mean {mu:.3f})")


def sample_dates(config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    T = int(rng.integers(config.T_range[0], config.T_range[1] + 1))
    gaps = 1 + rng.poisson(config.mean_gap - 1, T - 1)
    start = int(rng.integers(0, max(1, int(config.mean_gap))))
    return start + np.concatenate([[0], np.cumsum(gaps)]).astype(np.int64)


def _cloud_field(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Soft elliptic opacity map in [0, 1] covering a random region."""
    ci, cj = rng.uniform(0, H), rng.uniform(0, W)
    ri, rj = rng.uniform(0.25, 0.7) * H, rng.uniform(0.25, 0.7) * W
    ii, jj = np.mgrid[0:H, 0:W]
    r = ((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2
    return np.clip(1.5 - r, 0.0, 1.0)


def render_sequence(layout: Layout, profiles: dict[int, PhenologyProfile], config: GenConfig,
                    rng: np.random.Generator, sample_id: str = "", fold: int = 1) -> SITSSample:
    H, W, C = config.H, config.W, config.channels
    K = config.n_classes
    dates = sample_dates(config, rng)
    T = len(dates)

    semantic = np.zeros((H, W), dtype=np.int64)
    for p in layout.parcels:
        semantic[p.mask] = void_label(K) if p.is_void else p.crop_class

    # curves[label] : T x C
    curves = {label: prof(dates) for label, prof in profiles.items()}
    images = np.empty((T, C, H, W), dtype=np.float64)
    for label, curve in curves.items():
        sel = semantic == label
        if sel.any():
            images[:, :, sel] = curve[:, :, None]
    if config.noise_std > 0:
        images += rng.normal(0.0, config.noise_std, images.shape)
    for t in range(T):
        if rng.random() < config.cloud_prob:
            alpha = 0.8 * _cloud_field(H, W, rng)
            haze = 1.1 + 0.03 * rng.standard_normal((C, 1, 1))
            images[t] = (1 - alpha) * images[t] + alpha * haze
    return SITSSample(images.astype(np.float32), dates, semantic, layout.instances,
                      layout.parcels, sample_id, fold)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, index])


def generate_dataset(config: GenConfig, n_samples: int) -> list[SITSSample]:
    """``n_samples`` patches with folds assigned round-robin 1..5.

    Each sample draws from its own generator seeded by ``(seed, index)``, so
    samples can be produced independently and in any order.
    """
    profiles = make_profiles(config, np.random.default_rng([config.seed, 0]))
    samples = []
    for i in range(n_samples):
        rng = sample_rng(config.seed, i)
        forced = (i // 5) % config.n_classes + 1
        layout = generate_layout(config, rng, forced_class=forced)
        samples.append(render_sequence(layout, profiles, config, rng,
                                       sample_id=f"{i:05d}", fold=i % 5 + 1))
    return samples


def write_dataset(config: GenConfig, n_samples: int, root: str | Path) -> Path:
    """Generate and write a dataset in the on-disk layout read by :mod:`pastis_io`."""
    from .pastis_io import save_dataset

    samples = generate_dataset(config, n_samples)
    names = [f"crop_{k}" for k in range(1, config.n_classes + 1)]
    return save_dataset(samples, root, n_classes=config.n_classes, class_names=names,
                        extra={"generator": _config_dict(config)})


def _config_dict(config: GenConfig) -> dict:
    from dataclasses import asdict

    d = asdict(config)
    d["T_range"] = list(d["T_range"])
    return d

