"""Dataset I/O: on-disk layout, fold splitting and normalization statistics.

Layout of a dataset root::

    <root>/metadata.json
    <root>/DATA/<id>.npy          T x C x H x W, '<f4', NPY v1.0
    <root>/ANNOT/<id>_sem.npy     H x W, '<i4'
    <root>/ANNOT/<id>_inst.npy    H x W, '<i4'

``metadata.json`` holds the nomenclature and one entry per patch with its fold,
acquisition dates (integer day offsets) and parcel records. Parcel masks are not
stored; they are recovered from the instance map. See ``docs/formats.md``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ParcelRecord, SITSSample, void_label
from .errors import DatasetIndexError, EmptyTrainingSet, FormatError, InvalidFold

FORMAT_NAME = "utae-paps-sits"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6

PASTIS_NOMENCLATURE = (
    "Background", "Meadow", "Soft winter wheat", "Corn", "Winter barley",
    "Winter rapeseed", "Spring barley", "Sunflower", "Grapevine", "Beet",
    "Winter triticale", "Winter durum wheat", "Fruits, vegetables, flowers",
    "Potatoes", "Leguminous fodder", "Soybeans", "Orchard", "Mixed cereal",
    "Sorghum", "Void label",
)


# ---------------------------------------------------------------- NPY helpers

def write_npy(path: Path, array: np.ndarray, dtype: str) -> None:
    """Write ``array`` as an NPY version 1.0 file with an explicit little-endian dtype."""
    array = np.ascontiguousarray(array, dtype=np.dtype(dtype))
    with open(path, "wb") as f:
        np.lib.format.write_array(f, array, version=(1, 0), allow_pickle=False)


def read_npy_header(path: Path) -> tuple[tuple[int, ...], bool, np.dtype]:
    """Parse and validate an NPY v1.0 header; returns ``(shape, fortran_order, dtype)``."""
    try:
        with open(path, "rb") as f:
            major, minor = np.lib.format.read_magic(f)
            if (major, minor) != (1, 0):
                raise FormatError(f"{path}: NPY version {major}.{minor}, expected 1.0")
            return np.lib.format.read_array_header_1_0(f)
    except FileNotFoundError:
        raise DatasetIndexError(f"missing file {path}", path) from None
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def read_npy(path: Path, shape: Sequence[int] | None = None, kind: str | None = None) -> np.ndarray:
    hdr_shape, fortran, dtype = read_npy_header(path)
    if shape is not None and tuple(hdr_shape) != tuple(shape):
        raise FormatError(f"{path}: shape {hdr_shape} does not match metadata {tuple(shape)}")
    if fortran:
        raise FormatError(f"{path}: fortran_order arrays are not supported")
    if kind is not None and dtype.kind != kind:
        raise FormatError(f"{path}: dtype {dtype.str} is not of kind {kind!r}")
    return np.load(path, allow_pickle=False)


# ---------------------------------------------------------------- index

@dataclass(frozen=True)
class PatchEntry:
    sample_id: str
    fold: int
    data_path: Path
    sem_path: Path
    inst_path: Path
    dates: tuple[int, ...]
    shape: tuple[int, int, int, int]
    parcels: tuple[dict, ...] = ()

    @property
    def T(self) -> int:
        return self.shape[0]

    @property
    def n_parcels(self) -> int:
        return len(self.parcels)


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    entries: tuple[PatchEntry, ...]
    nomenclature: tuple[str, ...]
    n_classes: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_folds(self, folds: Iterable[int]) -> list[PatchEntry]:
        folds = set(folds)
        return [e for e in self.entries if e.fold in folds]

    def load(self, entry: PatchEntry) -> SITSSample:
        return load_sample(entry)

    def load_all(self, entries: Iterable[PatchEntry] | None = None) -> list[SITSSample]:
        return [load_sample(e) for e in (self.entries if entries is None else entries)]


def _entry_from_meta(root: Path, item: dict) -> PatchEntry:
    try:
        sid = str(item["id"])
        fold = int(item["fold"])
        dates = tuple(int(d) for d in item["dates"])
        shape = tuple(int(s) for s in item["shape"])
        parcels = tuple(item.get("parcels", ()))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetIndexError(f"{root / 'metadata.json'}: bad patch entry ({e})",
                                root / "metadata.json") from None
    if fold not in range(1, 6):
        raise DatasetIndexError(f"{root / 'metadata.json'}: patch {sid} has fold {fold}",
                                root / "metadata.json")
    if len(shape) != 4 or shape[0] != len(dates):
        raise FormatError(f"patch {sid}: shape {shape} inconsistent with {len(dates)} dates")
    entry = PatchEntry(sid, fold, root / "DATA" / f"{sid}.npy",
                       root / "ANNOT" / f"{sid}_sem.npy", root / "ANNOT" / f"{sid}_inst.npy",
                       dates, shape, parcels)
    for path in (entry.data_path, entry.sem_path, entry.inst_path):
        if not path.is_file():
            raise DatasetIndexError(f"missing file {path}", path)
    hdr_shape, _, _ = read_npy_header(entry.data_path)
    if tuple(hdr_shape) != shape:
        raise FormatError(f"{entry.data_path}: header shape {hdr_shape} != metadata {shape}")
    return entry


def load_index(root: str | Path) -> DatasetIndex:
    """Read and validate ``metadata.json``; arrays are loaded lazily."""
    root = Path(root)
    meta_path = root / "metadata.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetIndexError(f"missing metadata file {meta_path}", meta_path) from None
    except json.JSONDecodeError as e:
        raise DatasetIndexError(f"corrupt metadata file {meta_path}: {e}", meta_path) from None
    if not isinstance(meta, dict) or meta.get("format") != FORMAT_NAME:
        raise DatasetIndexError(f"{meta_path}: not a {FORMAT_NAME} metadata file", meta_path)
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unsupported version {meta.get('version')}")
    entries = [_entry_from_meta(root, item) for item in meta.get("patches", [])]
    entries.sort(key=lambda e: e.sample_id)
    n_classes = int(meta.get("n_classes", len(meta.get("nomenclature", [])) - 2))
    return DatasetIndex(root, tuple(entries), tuple(meta.get("nomenclature", ())), n_classes,
                        meta.get("extra", {}))


def load_sample(entry: PatchEntry) -> SITSSample:
    images = read_npy(entry.data_path, entry.shape, kind="f")
    H, W = entry.shape[2:]
    semantic = read_npy(entry.sem_path, (H, W), kind="i")
    instances = read_npy(entry.inst_path, (H, W), kind="i")
    parcels = []
    for rec in entry.parcels:
        pid = int(rec["id"])
        mask = instances == pid
        if not mask.any():
            raise FormatError(f"{entry.inst_path}: parcel {pid} has no pixels")
        parcels.append(ParcelRecord(
            id=pid, center=tuple(int(c) for c in rec["center"]),
            bbox_size=tuple(float(s) for s in rec["bbox_size"]), mask=mask,
            crop_class=int(rec["crop_class"]), is_void=bool(rec.get("is_void", False)),
        ))
    return SITSSample(images, np.asarray(entry.dates), semantic, instances, tuple(parcels),
                      entry.sample_id, entry.fold)


def save_dataset(samples: Sequence[SITSSample], root: str | Path, n_classes: int,
                 class_names: Sequence[str] | None = None, extra: dict | None = None) -> Path:
    root = Path(root)
    (root / "DATA").mkdir(parents=True, exist_ok=True)
    (root / "ANNOT").mkdir(parents=True, exist_ok=True)
    if class_names is None:
        if n_classes == len(PASTIS_NOMENCLATURE) - 2:
            class_names = PASTIS_NOMENCLATURE[1:-1]
        else:
            class_names = [f"class_{k}" for k in range(1, n_classes + 1)]
    nomenclature = ["Background", *class_names, "Void"]
    patches = []
    for s in samples:
        write_npy(root / "DATA" / f"{s.sample_id}.npy", s.images, "<f4")
        write_npy(root / "ANNOT" / f"{s.sample_id}_sem.npy", s.semantic, "<i4")
        write_npy(root / "ANNOT" / f"{s.sample_id}_inst.npy", s.instances, "<i4")
        patches.append({
            "id": s.sample_id, "fold": int(s.fold), "dates": [int(d) for d in s.dates],
            "shape": list(s.images.shape),
            "parcels": [{"id": p.id, "center": list(p.center), "bbox_size": list(p.bbox_size),
                         "crop_class": p.crop_class, "is_void": p.is_void} for p in s.parcels],
        })
    meta = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "n_classes": n_classes,
            "void_label": void_label(n_classes), "nomenclature": nomenclature,
            "patches": patches, "extra": extra or {}}
    (root / "metadata.json").write_text(json.dumps(meta, indent=1))
    return root


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldScheme:
    fold: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def fold_scheme(fold: int) -> FoldScheme:
    """Cyclic 5-fold rotation: fold I trains on 1-2-3, validates on 4, tests on 5."""
    if fold not in range(1, 6):
        raise InvalidFold(f"fold must be in 1..5, got {fold}")
    cyc = [(fold - 1 + k) % 5 + 1 for k in range(5)]
    return FoldScheme(fold, tuple(cyc[:3]), (cyc[3],), (cyc[4],))


def fold_split(items, fold: int):
    """Split index entries (or samples) into train/val/test lists by their fold."""
    scheme = fold_scheme(fold)
    items = list(items.entries if isinstance(items, DatasetIndex) else items)
    pick = lambda folds: [x for x in items if x.fold in folds]
    return pick(scheme.train), pick(scheme.val), pick(scheme.test)


# ---------------------------------------------------------------- statistics

def compute_norm_stats(samples: Sequence[SITSSample], scheme: FoldScheme | None = None):
    """Per-channel mean and population std over all real frames of the training folds.

    Partial moments of each sample are merged with Chan's parallel update, in
    float64, so the result does not depend on how samples are chunked.
    """
    if scheme is not None:
        samples = [s for s in samples if s.fold in scheme.train]
    if not samples:
        raise EmptyTrainingSet("no training samples to compute statistics on")
    n = 0
    mean = None
    m2 = None
    for s in samples:
        x = np.moveaxis(np.asarray(s.images, dtype=np.float64), 1, 0).reshape(s.images.shape[1], -1)
        nb = x.shape[1]
        mb = x.mean(axis=1)
        m2b = ((x - mb[:, None]) ** 2).sum(axis=1)
        if mean is None:
            n, mean, m2 = nb, mb, m2b
            continue
        delta = mb - mean
        tot = n + nb
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta ** 2 * n * nb / tot
        n = tot
    std = np.sqrt(m2 / n)
    return mean, np.maximum(std, STD_FLOOR)
