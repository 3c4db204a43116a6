import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utae_paps.core import (ParcelRecord, SITSSample, append_padding, kernel_exponents,
                            normalize_channels, pad_and_batch, pixel_to_parcel_map, unpad)
from utae_paps.errors import DegenerateStats, EmptyBatch, ShapeMismatch
from utae_paps.pastis_io import compute_norm_stats

from conftest import make_sample, rect_mask


# ---------------------------------------------------------------- batching

def test_pad_and_batch_lengths_3_5():
    b = pad_and_batch([make_sample(T=3), make_sample(T=5)])
    assert b.images.shape[1] == 5
    assert b.pad_mask.astype(int).tolist() == [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
    assert np.all(b.images[0, 3:] == 0)


def test_pad_and_batch_single_sample_identity():
    s = make_sample(T=4)
    b = pad_and_batch([s])
    assert np.array_equal(b.images[0], s.images)
    assert b.pad_mask.all()


def test_pad_and_batch_longest_and_shortest_real_lengths():
    s61 = make_sample(T=61, C=1, H=2, W=2)
    s38 = make_sample(T=38, C=1, H=2, W=2)
    b = pad_and_batch([s61, s38])
    assert b.images.shape[1] == 61
    assert (~b.pad_mask[1]).sum() == 23
    assert np.all(b.images[1, 38:] == 0)


def test_pad_and_batch_errors():
    with pytest.raises(EmptyBatch):
        pad_and_batch([])
    with pytest.raises(ShapeMismatch):
        pad_and_batch([make_sample(H=8), make_sample(H=16, W=8)])


def test_pad_mask_is_prefix_and_order_preserved():
    ss = [make_sample(T=t, sample_id=str(t)) for t in (2, 6, 4)]
    b = pad_and_batch(ss)
    assert [s.sample_id for s in b.targets] == ["2", "6", "4"]
    for row, t in zip(b.pad_mask, (2, 6, 4)):
        assert row[:t].all() and not row[t:].any()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=4))
def test_unpad_inverts_pad(lengths):
    ss = [make_sample(T=t, seed=k) for k, t in enumerate(lengths)]
    for s, (img, dates) in zip(ss, unpad(pad_and_batch(ss))):
        assert np.array_equal(img, s.images)
        assert np.array_equal(dates, s.dates)


def test_append_padding_adds_zero_frames():
    b = append_padding(pad_and_batch([make_sample(T=3)]), 2)
    assert b.images.shape[1] == 5 and b.pad_mask.sum() == 3
    assert np.all(b.images[0, 3:] == 0)


# ---------------------------------------------------------------- records

def test_parcel_record_from_mask_geometry():
    m = rect_mask(10, 10, 2, 5, 3, 9)
    p = ParcelRecord.from_mask(1, m, 2)
    assert p.bbox == (2, 3, 5, 9)
    assert p.bbox_size == (3.0, 6.0)
    assert p.center == (3, 6)
    assert p.mask[p.center]


def test_parcel_center_snapped_inside_nonconvex_mask():
    m = np.zeros((9, 9), dtype=bool)
    m[0, :] = True
    m[:, 0] = True            # an L shape whose centroid lies outside
    p = ParcelRecord.from_mask(1, m, 1)
    assert m[p.center]


def test_parcel_record_validation():
    m = rect_mask(6, 6, 1, 3, 1, 3)
    with pytest.raises(ValueError):
        ParcelRecord(1, (1, 1), (2.0, 2.0), np.zeros((6, 6), bool), 1)
    with pytest.raises(ValueError):
        ParcelRecord(1, (7, 1), (2.0, 2.0), m, 1)
    with pytest.raises(ValueError):
        ParcelRecord(1, (1, 1), (3.0, 2.0), m, 1)


def test_sample_invariants():
    with pytest.raises(ValueError):
        make_sample(T=3, dates=[0, 5, 5])
    m = rect_mask(8, 8, 0, 4, 0, 4)
    s = make_sample(parcels=[(m, 2, False)])
    sem = s.semantic.copy()
    sem[0, 0] = 3
    with pytest.raises(ValueError):
        SITSSample(s.images, s.dates, sem, s.instances, s.parcels)
    inst = s.instances.copy()
    inst[7, 7] = 9
    with pytest.raises(ValueError):
        SITSSample(s.images, s.dates, s.semantic, inst, s.parcels)


# ---------------------------------------------------------------- pixel -> parcel

def _brute_force_map(parcels, H, W):
    """Per-pixel loop over parcels with the kernel written out explicitly."""
    out = np.zeros((H, W), dtype=np.int64)
    for i in range(H):
        for j in range(W):
            best, best_q = None, None
            for p in sorted(parcels, key=lambda p: p.id):
                sv = max(p.bbox_size[0] / 20, 0.5)
                sh = max(p.bbox_size[1] / 20, 0.5)
                q = (i - p.center[0]) ** 2 / (2 * sv * sv) + (j - p.center[1]) ** 2 / (2 * sh * sh)
                if best_q is None or q < best_q:
                    best, best_q = p.id, q
            out[i, j] = best
    return out


def test_pixel_to_parcel_single_parcel_covers_image():
    p = ParcelRecord.from_mask(4, rect_mask(16, 16, 3, 6, 3, 6), 1)
    assert np.all(pixel_to_parcel_map([p], 16, 16) == 4)


def test_pixel_to_parcel_empty():
    assert np.all(pixel_to_parcel_map([], 5, 7) == 0)


def test_pixel_to_parcel_identical_kernels_split_by_distance_and_tie():
    a = ParcelRecord.from_mask(2, rect_mask(9, 21, 3, 6, 2, 5), 1)     # center (4, 3)
    b = ParcelRecord.from_mask(1, rect_mask(9, 21, 3, 6, 16, 19), 1)   # center (4, 17)
    m = pixel_to_parcel_map([a, b], 9, 21)
    assert np.all(m[:, :10] == 2) and np.all(m[:, 11:] == 1)
    assert np.all(m[:, 10] == 1)        # exact midpoint: lowest id wins


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_pixel_to_parcel_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    H = W = 32
    parcels = []
    for pid in rng.permutation(np.arange(1, 5))[: rng.integers(1, 5)]:
        r0, c0 = rng.integers(0, 28, 2)
        h, w = rng.integers(1, 32 - r0), rng.integers(1, 32 - c0)
        parcels.append(ParcelRecord.from_mask(int(pid), rect_mask(H, W, r0, r0 + h, c0, c0 + w), 1))
    assert np.array_equal(pixel_to_parcel_map(parcels, H, W), _brute_force_map(parcels, H, W))


def test_kernel_exponent_hand_value():
    p = ParcelRecord.from_mask(1, rect_mask(40, 60, 10, 30, 10, 50), 1)   # 20 x 40 box
    q = kernel_exponents([p], 40, 60)[0]
    i, j = p.center
    assert q[i, j] == 0
    assert q[i + 1, j] == pytest.approx(0.5)       # sigma_ver = 1
    assert q[i, j + 2] == pytest.approx(0.5)       # sigma_hor = 2


# ---------------------------------------------------------------- normalization

def test_normalize_identity_and_padding_zero():
    b = pad_and_batch([make_sample(T=2, C=3), make_sample(T=4, C=3)])
    n = normalize_channels(b, (np.zeros(3), np.ones(3)))
    assert np.allclose(n.images[b.pad_mask], b.images[b.pad_mask])
    assert np.all(n.images[~b.pad_mask] == 0)


def test_normalize_constant_channel_becomes_zero():
    s = make_sample(T=3, C=2)
    img = s.images.copy()
    img[:, 1] = 7.5
    s = SITSSample(img, s.dates, s.semantic, s.instances)
    mean, std = compute_norm_stats([s])
    n = normalize_channels(pad_and_batch([s]), (mean, std))
    assert np.all(n.images[0, :, 1] == 0)


def test_normalize_rejects_zero_std():
    with pytest.raises(DegenerateStats):
        normalize_channels(pad_and_batch([make_sample()]), (np.zeros(2), np.array([1.0, 0.0])))


def test_normalized_fold_has_zero_mean():
    ss = [make_sample(T=t, C=3, seed=t) for t in (3, 5, 4)]
    ss = [type(s)(s.images * 3 + 10, s.dates, s.semantic, s.instances) for s in ss]
    stats = compute_norm_stats(ss)
    b = normalize_channels(pad_and_batch(ss), stats)
    real = np.moveaxis(b.images[b.pad_mask], 1, 0).reshape(3, -1)
    assert np.all(np.abs(real.mean(axis=1)) < 1e-3)
