import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rect_mask
from utae_paps.core import BACKGROUND, ParcelRecord
from utae_paps.errors import ThresholdError
from utae_paps.panmerge import (DEFAULT_GRID, InstanceMask, binarize, load_panoptic,
                                resolve_overlaps, save_panoptic, to_panoptic,
                                tune_quality_threshold)


def inst(mask, q, center=(0, 0), label=1):
    return InstanceMask(np.asarray(mask, dtype=bool), q, center, label=label)


def check_panoptic(pmap):
    assert np.array_equal(pmap.instance > 0, pmap.semantic != BACKGROUND)
    ids = np.unique(pmap.instance[pmap.instance > 0])
    assert list(ids) == list(range(1, len(pmap.records) + 1))


# ---------------------------------------------------------------- binarize

def test_binarize_threshold_rule():
    shape = (6, 6)
    assert binarize(np.full((2, 3), 0.5), (1, 3, 2, 5), shape).sum() == 6
    assert binarize(np.full((2, 3), 0.39), (1, 3, 2, 5), shape).sum() == 0
    out = binarize(np.full((2, 3), 0.4), (1, 3, 2, 5), shape)
    assert np.array_equal(out, rect_mask(6, 6, 1, 3, 2, 5))


# ---------------------------------------------------------------- overlaps

def test_disjoint_masks_survive_unchanged():
    a, b = rect_mask(8, 8, 0, 4, 0, 4), rect_mask(8, 8, 4, 8, 4, 8)
    out = resolve_overlaps([inst(a, 0.3), inst(b, 0.8)])
    assert [m.quality for m in out] == [0.8, 0.3]
    assert np.array_equal(out[0].mask, b) and np.array_equal(out[1].mask, a)


def test_losing_sixty_percent_removes_the_mask():
    low = rect_mask(10, 10, 0, 1, 0, 10)                   # 10 pixels
    high = rect_mask(10, 10, 0, 1, 0, 6)                   # covers 6 of them
    out = resolve_overlaps([inst(high, 0.9), inst(low, 0.5)])
    assert len(out) == 1 and out[0].quality == 0.9
    pmap = to_panoptic(out, (10, 10))
    assert np.all(pmap.instance[0, 6:] == 0)               # no cascade, pixels become background


def test_losing_exactly_half_keeps_the_rest():
    low = rect_mask(10, 10, 0, 1, 0, 10)
    high = rect_mask(10, 10, 0, 1, 0, 5)
    out = resolve_overlaps([inst(high, 0.9), inst(low, 0.5)])
    assert len(out) == 2
    assert np.array_equal(out[1].mask, rect_mask(10, 10, 0, 1, 5, 10))


def test_min_quality_drops_first():
    low = rect_mask(4, 4, 0, 4, 0, 4)
    high = rect_mask(4, 4, 0, 4, 0, 3)
    out = resolve_overlaps([inst(high, 0.2), inst(low, 0.5)], min_quality=0.3)
    assert len(out) == 1 and out[0].mask.sum() == 16


def brute_force_resolve(masks, min_quality=0.0):
    """Per-pixel winner by (q desc, i asc, j asc), then a single removal pass."""
    masks = [m for m in masks if m.quality >= min_quality]
    H, W = masks[0].mask.shape if masks else (0, 0)
    owner = {}
    for r in range(H):
        for c in range(W):
            cands = [k for k, m in enumerate(masks) if m.mask[r, c]]
            if cands:
                owner[r, c] = min(cands, key=lambda k: (-masks[k].quality, *masks[k].center))
    out = []
    for k, m in enumerate(masks):
        kept = np.zeros((H, W), dtype=bool)
        for (r, c), o in owner.items():
            kept[r, c] = o == k
        if m.mask.sum() and 2 * kept.sum() >= m.mask.sum():
            out.append((m.quality, m.center, kept))
    out.sort(key=lambda t: (-t[0], *t[1]))
    return out


@pytest.mark.parametrize("seed", range(50))
def test_resolve_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(rng.integers(0, 11)):
        r0, c0 = rng.integers(0, 28, size=2)
        h, w = rng.integers(1, 14, size=2)
        m = rect_mask(32, 32, r0, r0 + h, c0, c0 + w) & (rng.random((32, 32)) > 0.1)
        q = float(rng.choice([0.2, 0.5, 0.7, rng.random()]))          # quality ties happen
        masks.append(inst(m, q, tuple(int(v) for v in rng.integers(0, 32, size=2)),
                          label=int(rng.integers(1, 5))))
    got = resolve_overlaps(masks, min_quality=0.1)
    ref = brute_force_resolve(masks, min_quality=0.1)
    assert len(got) == len(ref)
    for g, (q, center, kept) in zip(got, ref):
        assert g.quality == q and g.center == center and np.array_equal(g.mask, kept)
    if got:
        check_panoptic(to_panoptic(got))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11), st.integers(1, 6),
                          st.integers(1, 6), st.floats(0, 1), st.integers(1, 5)), max_size=8))
def test_panoptic_invariants_fuzz(specs):
    masks = [inst(rect_mask(12, 12, r, r + h, c, c + w), q, (r, c), label=k)
             for r, c, h, w, q, k in specs]
    check_panoptic(to_panoptic(resolve_overlaps(masks), (12, 12)))
    a = to_panoptic(resolve_overlaps(masks), (12, 12))
    b = to_panoptic(resolve_overlaps(masks[::-1]), (12, 12))
    if len({(m.quality, m.center) for m in masks}) == len(masks):
        assert np.array_equal(a.instance, b.instance)


# ---------------------------------------------------------------- panoptic map

def test_to_panoptic_cases():
    empty = to_panoptic([], (4, 4))
    assert np.all(empty.semantic == 0) and np.all(empty.instance == 0)
    full = to_panoptic([inst(np.ones((4, 4)), 0.5, label=3)])
    assert np.all(full.semantic == 3) and np.all(full.instance == 1)
    three = to_panoptic([inst(rect_mask(4, 4, 0, 1, 0, 4), 0.2, label=1),
                         inst(rect_mask(4, 4, 1, 2, 0, 4), 0.9, label=2),
                         inst(rect_mask(4, 4, 2, 3, 0, 4), 0.5, label=3)])
    assert [r["class"] for r in three.table()] == [2, 3, 1]
    assert three.instance[:3, 0].tolist() == [3, 1, 2]


def test_class_from_probabilities():
    m = InstanceMask(np.ones((2, 2), dtype=bool), 0.5, (0, 0), np.array([0.1, 0.7, 0.2]))
    assert to_panoptic([m]).semantic[0, 0] == 2


def test_png_json_round_trip(tmp_path):
    pmap = to_panoptic([inst(rect_mask(5, 7, 0, 2, 0, 3), 0.8, (1, 1), label=18),
                        inst(rect_mask(5, 7, 3, 5, 2, 7), 0.3, (4, 4), label=2)])
    paths = save_panoptic(pmap, tmp_path / "x" / "p")
    back = load_panoptic(tmp_path / "x" / "p")
    assert np.array_equal(back.semantic, pmap.semantic)
    assert np.array_equal(back.instance, pmap.instance)
    assert back.records == pmap.records
    from PIL import Image
    assert Image.open(paths["instance"]).mode.startswith("I;16")


# ---------------------------------------------------------------- threshold tuning

def scene(n=4):
    parcels = [ParcelRecord.from_mask(k + 1, rect_mask(16, 16, 4 * k, 4 * k + 3, 0, 16), 1)
               for k in range(n)]
    return parcels


def test_tune_all_perfect_gives_zero():
    parcels = scene()
    props = [inst(p.mask, 0.8, p.center) for p in parcels]
    assert tune_quality_threshold([props], [parcels]) == 0.0


def test_tune_spurious_low_quality_proposals():
    parcels = scene()
    good = [inst(p.mask, 0.7 + 0.05 * k, p.center) for k, p in enumerate(parcels)]
    junk = [inst(rect_mask(16, 16, 4 * k + 3, 4 * k + 4, 0, 16), 0.1 + 0.05 * k, (4 * k + 3, 0))
            for k in range(4)]
    t = tune_quality_threshold([good + junk], [parcels])
    # F1 is 1 exactly when every junk quality (max 0.25) is dropped and every good one kept
    assert t == min(g for g in DEFAULT_GRID if g > 0.25)
    assert 0.25 < t <= 0.7


def test_tune_no_matches_gives_zero():
    parcels = scene(2)
    junk = [inst(rect_mask(16, 16, 12, 16, 0, 16), 0.9, (14, 0))]
    assert tune_quality_threshold([junk], [parcels]) == 0.0


def test_tune_empty_validation_set():
    with pytest.raises(ThresholdError):
        tune_quality_threshold([], [])
