import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_sample, rect_mask
from utae_paps.core import ParcelRecord, pixel_to_parcel_map
from utae_paps.errors import SizeError
from utae_paps.paps import (PaPs, PaPsConfig, UTAEPaPs, assemble_shape, assign_centers,
                            build_heatmap_target, center_loss, detect_centers, dump_proposals,
                            extract_multiscale_features, head_losses, resize_patch, rle_decode,
                            rle_encode, total_loss)
from utae_paps.utae import UTAEConfig, count_parameters

WIDTHS = (8, 8, 16)


def rect_parcel(pid, H, W, r0, r1, c0, c1, cls=1, void=False):
    return ParcelRecord.from_mask(pid, rect_mask(H, W, r0, r1, c0, c1), cls, void)


# ---------------------------------------------------------------- heatmap targets

def test_heatmap_hand_value():
    p = rect_parcel(1, 64, 64, 10, 30, 10, 50)          # 20 x 40 box
    assert p.bbox_size == (20.0, 40.0) and p.sigmas == (1.0, 2.0)
    m = build_heatmap_target([p], 64, 64)
    i, j = p.center
    assert m[i, j] == 1.0
    assert m[i + 1, j] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert m[i, j + 2] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_heatmap_is_pointwise_max_of_kernels():
    a = rect_parcel(1, 32, 32, 0, 10, 0, 14)
    b = rect_parcel(2, 32, 32, 6, 30, 8, 20)
    ii, jj = np.mgrid[:32, :32]

    def kernel(p):
        sv, sh = p.sigmas
        return np.exp(-((ii - p.center[0]) ** 2 / (2 * sv ** 2) + (jj - p.center[1]) ** 2 / (2 * sh ** 2)))

    ref = np.maximum(kernel(a), kernel(b))
    assert np.allclose(build_heatmap_target([a, b], 32, 32), ref, atol=1e-15)
    assert np.array_equal(build_heatmap_target([b, a], 32, 32), build_heatmap_target([a, b], 32, 32))


def test_heatmap_skips_void_and_empty():
    v = rect_parcel(1, 16, 16, 2, 8, 2, 8, cls=19, void=True)
    assert np.all(build_heatmap_target([v], 16, 16) == 0)
    assert np.all(build_heatmap_target([], 16, 16) == 0)


def test_isolated_centers_are_detected():
    parcels = [rect_parcel(k + 1, 64, 64, r, r + 12, c, c + 12) for k, (r, c) in
               enumerate([(2, 2), (2, 40), (40, 10), (44, 46)])]
    found = {(i, j) for i, j, _ in detect_centers(build_heatmap_target(parcels, 64, 64))}
    assert {p.center for p in parcels} <= found


# ---------------------------------------------------------------- center loss

def test_center_loss_single_pixel_hand_value():
    loss = center_loss(torch.tensor([[0.5]]), torch.tensor([[0.5]]), 1)
    assert loss.item() == pytest.approx(-(0.5 ** 4) * math.log(0.5), abs=1e-6)
    assert loss.item() == pytest.approx(0.0433, abs=1e-4)


def test_center_loss_perfect_prediction_vanishes():
    m_hat = torch.zeros(8, 8)
    m_hat[3, 4] = 1
    assert center_loss(m_hat.clone(), m_hat, 1).item() < 1e-5


def test_center_loss_is_normalized_per_parcel():
    g = torch.Generator().manual_seed(0)
    p = rect_parcel(1, 16, 16, 3, 12, 4, 10)
    m_hat = torch.tensor(build_heatmap_target([p], 16, 16))
    m = torch.rand(16, 16, generator=g, dtype=torch.float64)
    single = center_loss(m, m_hat, 1)
    double = center_loss(torch.cat([m, m], 1), torch.cat([m_hat, m_hat], 1), 2)
    assert double.item() == pytest.approx(single.item(), rel=1e-12)


def test_center_loss_without_parcels_is_zero_with_zero_gradient():
    m = torch.rand(4, 4, requires_grad=True)
    loss = center_loss(m, torch.zeros(4, 4), 0)
    loss.backward()
    assert loss.item() == 0 and torch.all(m.grad == 0)


def test_center_loss_valid_mask_drops_pixels():
    m = torch.full((2, 2), 0.3)
    m_hat = torch.zeros(2, 2)
    valid = torch.tensor([[1, 0], [0, 0]]).bool()
    assert center_loss(m, m_hat, 1, valid).item() == pytest.approx(-math.log(0.7), abs=1e-6)


# ---------------------------------------------------------------- center detection

def brute_force_maxima(m):
    H, W = m.shape
    out = set()
    for i in range(H):
        for j in range(W):
            nb = [m[min(max(i + di, 0), H - 1), min(max(j + dj, 0), W - 1)]
                  for di in (-1, 0, 1) for dj in (-1, 0, 1)]
            if m[i, j] >= max(nb):
                out.add((i, j))
    return out


@pytest.mark.parametrize("seed", range(3))
def test_detect_centers_matches_brute_force(seed):
    m = np.random.default_rng(seed).random((64, 64))
    found = detect_centers(torch.tensor(m))
    assert {(i, j) for i, j, _ in found} == brute_force_maxima(m)
    qs = [q for _, _, q in found]
    assert qs == sorted(qs, reverse=True)
    assert all(q == m[i, j] for i, j, q in found)


def test_detect_centers_quantized_ties_match_brute_force():
    m = np.random.default_rng(5).integers(0, 3, size=(20, 20)).astype(np.float64)
    assert {(i, j) for i, j, _ in detect_centers(torch.tensor(m))} == brute_force_maxima(m)


def test_single_bump_and_plateau():
    ii, jj = np.mgrid[:16, :16]
    bump = np.exp(-((ii - 5) ** 2 + (jj - 9) ** 2) / 8)
    assert [(i, j) for i, j, _ in detect_centers(bump)] == [(5, 9)]
    assert len(detect_centers(np.full((6, 7), 0.3))) == 42


# ---------------------------------------------------------------- assignment

def test_assign_centers():
    a = rect_parcel(1, 16, 16, 0, 8, 0, 8)
    b = rect_parcel(2, 16, 16, 8, 16, 8, 16)
    p2p = pixel_to_parcel_map([a, b], 16, 16)
    # every pixel maps to some parcel: (1, 3) lies nearer to a's center than b's
    centers = [(2, 2, 0.4), (5, 5, 0.9), (1, 3, 0.3)]
    assert assign_centers([a, b], centers, p2p) == {1: 1}     # b undetected
    assert assign_centers([a, b], centers + [(12, 12, 0.2)], p2p) == {1: 1, 2: 3}
    assert assign_centers([a], [(3, 3, 0.5)]) == {1: 0}


# ---------------------------------------------------------------- features and heads

def test_multiscale_reads_floor_coordinates():
    d = []
    for l, s in enumerate((128, 64, 32, 16)):
        ii, jj = torch.meshgrid(torch.arange(s), torch.arange(s), indexing="ij")
        d.append(torch.stack([ii * 1000 + jj + l * 1e6] * 2)[None].double())
    b, i, j = torch.tensor([0, 0]), torch.tensor([127, 0]), torch.tensor([127, 0])
    f = extract_multiscale_features(d, b, i, j)
    assert f.shape == (2, 8)
    assert f[0, 6].item() == 3e6 + 15 * 1000 + 15
    assert f[0, 2].item() == 1e6 + 63 * 1000 + 63
    assert torch.all(f[1].remainder(1e6) == 0)


def test_default_feature_length_and_head_shapes():
    head = PaPs(UTAEConfig().decoder_widths)
    assert head.shape_mlp[0].in_features == 256
    size, logits, shape = head.eval().predict_heads(10 * torch.randn(7, 256))
    assert size.shape == (7, 2) and torch.all(size > 0)
    assert logits.shape == (7, 18) and shape.shape == (7, 16, 16)
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(7), atol=1e-6)


def test_paps_parameter_count():
    n = count_parameters(PaPs(UTAEConfig().decoder_widths, PaPsConfig()))
    assert abs(n - 190_000) / 190_000 < 0.05


def test_saliency_zero_weights_gives_bias():
    head = PaPs(WIDTHS, PaPsConfig(n_classes=3)).eval()
    with torch.no_grad():
        for prm in head.saliency_conv.parameters():
            prm.zero_()
        head.saliency_conv[-1].bias.fill_(0.7)
    z = head.saliency(torch.randn(2, 8, 12, 10))
    assert z.shape == (2, 12, 10) and torch.allclose(z, torch.full_like(z, 0.7))


# ---------------------------------------------------------------- shape assembly

def test_identity_resize():
    patch = torch.randn(16, 16)
    assert torch.allclose(resize_patch(patch, 16, 16), patch, atol=1e-6)


def test_zero_refiner_gives_plain_sigmoid():
    head = PaPs(WIDTHS, PaPsConfig(n_classes=3))
    with torch.no_grad():
        for prm in head.refiner.parameters():
            prm.zero_()
    s, z = torch.randn(16, 16), torch.randn(32, 32)
    mask, win = head.assemble(s, z, (16, 16), (16.0, 16.0))
    assert win == (8, 24, 8, 24)
    assert torch.allclose(mask, torch.sigmoid(s + z[8:24, 8:24]), atol=1e-6)


def test_corner_clipping_on_toy():
    z = torch.arange(64.0).view(8, 8)
    s = torch.zeros(16, 16)
    mask, win = assemble_shape(s, z, (0, 0), (3.2, 4.0))          # 4 x 4 box at (-2, -2)
    assert win == (0, 2, 0, 2) and mask.shape == (2, 2)
    assert torch.allclose(mask, torch.sigmoid(z[:2, :2]))
    mask, win = assemble_shape(s, z, (7, 6), (3.0, 5.0))          # 3 x 5 box at (6, 4)
    assert win == (6, 8, 4, 8) and mask.shape == (2, 4)


def test_degenerate_size():
    with pytest.raises(SizeError):
        assemble_shape(torch.zeros(16, 16), torch.zeros(8, 8), (4, 4), (0.0, 3.0))


def test_multiplicative_saliency_variant():
    head = PaPs(WIDTHS, PaPsConfig(n_classes=3, multiplicative_saliency=True))
    assert head.refiner is None
    s, z = torch.randn(16, 16), torch.randn(20, 20)
    mask, (r0, r1, c0, c1) = head.assemble(s, z, (10, 10), (16.0, 16.0))
    assert torch.allclose(mask, torch.sigmoid(s) * torch.sigmoid(z[r0:r1, c0:c1]), atol=1e-6)
    assert count_parameters(head) < count_parameters(PaPs(WIDTHS, PaPsConfig(n_classes=3)))


def test_shape_losses_reach_the_saliency_of_each_parcel():
    head = PaPs(WIDTHS, PaPsConfig(n_classes=3))
    z = torch.zeros(32, 32, requires_grad=True)
    losses = []
    for center in ((6, 6), (24, 24)):
        mask, (r0, r1, c0, c1) = head.assemble(torch.zeros(16, 16), z, center, (8.0, 8.0))
        losses.append(torch.nn.functional.binary_cross_entropy(mask, torch.ones_like(mask)))
    sum(losses).backward()
    assert z.grad[2:10, 2:10].abs().sum() > 0 and z.grad[20:28, 20:28].abs().sum() > 0
    assert z.grad[12:18, 12:18].abs().sum() == 0


# ---------------------------------------------------------------- losses

def test_size_loss_hand_value():
    _, l_size, _ = head_losses([12.0, 20.0], torch.zeros(3), torch.full((2, 2), 0.5),
                               (10.0, 20.0), 1, np.ones((2, 2)))
    assert l_size.item() == pytest.approx(0.2)


def test_perfect_heads_have_zero_losses():
    logits = torch.tensor([-50.0, 50.0, -50.0])
    target = np.array([[1, 0], [0, 1]], dtype=np.float64)
    l_cls, l_size, l_shape = head_losses([5.0, 7.0], logits, torch.tensor(target), (5.0, 7.0), 2,
                                         target)
    assert l_cls.item() < 1e-6 and l_size.item() == 0 and l_shape.item() < 1e-5


def test_total_loss_cases():
    assert total_loss(torch.tensor(0.8), []).item() == pytest.approx(0.8)
    assert total_loss(torch.tensor(0.8), [(0.0, 0.0, 0.0)]).item() == pytest.approx(0.8)
    terms = [(0.5, 0.2, 0.3), (1.0, 0.0, 0.5)]
    assert total_loss(torch.tensor(1.0), terms).item() == pytest.approx(1.0 + (1.0 + 1.5) / 2)


def test_class_loss_decreases_on_frozen_features():
    torch.manual_seed(0)
    head = PaPs(WIDTHS, PaPsConfig(n_classes=4))
    feats = torch.randn(1, sum(WIDTHS))
    opt = torch.optim.SGD(head.class_mlp.parameters(), lr=1e-2)
    losses = []
    for _ in range(10):
        loss = torch.nn.functional.cross_entropy(head.class_mlp(feats), torch.tensor([2]))
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def model_and_sample(seed=0):
    torch.manual_seed(seed)
    cfg = UTAEConfig(input_dim=2, encoder_widths=WIDTHS, decoder_widths=WIDTHS, out_conv=(),
                     n_head=2, d_k=4, d_model=8)
    model = UTAEPaPs(cfg, PaPsConfig(n_classes=3))
    sample = make_sample(T=3, C=2, H=16, W=16, parcels=[
        (rect_mask(16, 16, 1, 7, 1, 9), 2, False), (rect_mask(16, 16, 9, 15, 6, 14), 3, False),
        (rect_mask(16, 16, 0, 4, 12, 16), 4, True)])
    return model, sample


def tensors(sample):
    return (torch.tensor(sample.images)[None], torch.tensor(sample.dates)[None],
            torch.ones(1, sample.T, dtype=torch.bool))


def test_module_loss_terms_and_void_exclusion():
    model, sample = model_and_sample()
    out = model(*tensors(sample), targets=[sample], void_label=4)
    assert out.terms["n_parcels"] == 2
    assert 0 <= out.terms["n_detected"] <= 2
    m_hat = torch.tensor(build_heatmap_target(sample.valid_parcels(), 16, 16), dtype=out.heatmap.dtype)
    valid = torch.tensor(sample.semantic != 4)
    ref = center_loss(out.heatmap[0], m_hat, 2, valid)
    assert out.terms["center"].item() == pytest.approx(ref.item(), rel=1e-5)
    out.loss.backward()
    assert model.head.saliency_conv[0].weight.grad is not None


def test_proposals_invariants():
    model, sample = model_and_sample(1)
    model.eval()
    with torch.no_grad():
        out = model(*tensors(sample))
    props = out.proposals[0]
    assert props and len(props) <= model.head.config.max_proposals
    m = out.heatmap[0].numpy()
    for p in props:
        assert p.quality == m[p.center] and p.quality >= model.head.config.min_confidence
        assert abs(p.class_probs.sum() - 1) < 1e-6
        r0, r1, c0, c1 = p.window
        assert p.mask.shape == (r1 - r0, c1 - c0)
        assert np.all((p.mask >= 0) & (p.mask <= 1))


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_rle_round_trip(mask):
    runs = rle_encode(mask)
    assert sum(runs) == mask.size and all(r > 0 for r in runs[1:])
    assert np.array_equal(rle_decode(runs, mask.shape), mask)


def test_rle_examples():
    assert rle_encode(np.array([[0, 1, 1], [1, 0, 0]])) == [1, 3, 2]
    assert rle_encode(np.array([1, 1, 0])) == [0, 2, 1]


def test_dump_proposals(tmp_path):
    model, sample = model_and_sample(1)
    model.eval()
    with torch.no_grad():
        props = model(*tensors(sample)).proposals[0]
    dump_proposals(props, tmp_path / "p.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(rows) == len(props)
    for row, p in zip(rows, props):
        assert tuple(row["center"]) == p.center and row["class"] == p.predicted_class
        assert np.array_equal(rle_decode(row["mask_rle"], row["mask_shape"]), p.mask >= 0.4)
