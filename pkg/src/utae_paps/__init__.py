"""U-TAE and Parcels-as-Points for panoptic segmentation of satellite image time series."""
from . import core, metrics, panmerge, paps, pastis_io, sitsgen, utae
from .core import PaddedBatch, ParcelRecord, SITSSample, pad_and_batch
from .paps import PaPs, PaPsConfig, UTAEPaPs
from .utae import UTAE, UTAEConfig

__version__ = "0.1.0"

__all__ = [
    "core", "metrics", "panmerge", "paps", "pastis_io", "sitsgen", "utae",
    "PaddedBatch", "ParcelRecord", "SITSSample", "pad_and_batch",
    "PaPs", "PaPsConfig", "UTAEPaPs", "UTAE", "UTAEConfig",
]
