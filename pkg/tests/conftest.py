import numpy as np
import pytest
import torch

from utae_paps.core import ParcelRecord, SITSSample


def rect_mask(H, W, r0, r1, c0, c1):
    m = np.zeros((H, W), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def make_sample(T=3, C=2, H=8, W=8, parcels=(), seed=0, sample_id="s", fold=1, dates=None):
    """Random-image sample whose labels come from ``(mask, class, is_void)`` triples."""
    rng = np.random.default_rng(seed)
    semantic = np.zeros((H, W), dtype=np.int64)
    instances = np.zeros((H, W), dtype=np.int64)
    recs = []
    for pid, (mask, cls, void) in enumerate(parcels, start=1):
        instances[mask] = pid
        semantic[mask] = cls
        recs.append(ParcelRecord.from_mask(pid, mask, cls, void))
    if dates is None:
        dates = np.arange(T) * 5
    return SITSSample(rng.normal(size=(T, C, H, W)).astype(np.float32), dates, semantic,
                      instances, tuple(recs), sample_id, fold)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
