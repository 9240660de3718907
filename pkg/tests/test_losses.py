import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgdn.gradcheck import finite_diff_check
from mgdn.losses import (HistogramConfig, cross_entropy, entropy, fusion_loss, hdr_loss,
                         init_mask_net, kl_divergence, marginal_entropy_via_kl, mask_uncommon,
                         masked_mi, masked_mi_loss, mu_law, nmi_from_joint,
                         predict_gradient_mask, sobel_gradients, soft_joint_histogram)
from mgdn.params import Initializer
from mgdn.tensor import ShapeError, Tensor

from oracles import conv2d_loop, entropy_ref, gelu_ref, nmi_ref

SHARP = HistogramConfig(bins=16, sigma=0.01)


def mask_params(seed, noisy=True, hidden=8):
    rng = np.random.default_rng(seed)
    init = Initializer(rng)
    init_mask_net(init, "m", hidden)
    p = init.store.sub("m")
    if noisy:
        for t in p.values():
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
    return p, rng


def zero_mask_params():
    p, _ = mask_params(0, noisy=False)
    for t in p.values():
        t.data[...] = 0.0
    return p


def col(a):
    return Tensor(np.asarray(a, dtype=float)[..., None])


# ------------------------------------------------------------------ sobel


def test_sobel_constant_image_is_flat():
    gx, gy = sobel_gradients(col(np.full((5, 6), 3.0)))
    # zero padding makes the border respond; the interior must be exactly flat
    assert (gx.data[1:-1, 1:-1] == 0).all() and (gy.data[1:-1, 1:-1] == 0).all()


def test_sobel_horizontal_ramp():
    gx, gy = sobel_gradients(col(np.tile(np.arange(6.0), (5, 1))))
    np.testing.assert_array_equal(gx.data[1:-1, 1:-1, 0], 8.0)
    np.testing.assert_array_equal(gy.data[1:-1, 1:-1, 0], 0.0)


def test_sobel_vertical_step_edge():
    img = np.zeros((5, 6))
    img[:, 3:] = 1.0
    gx, _ = sobel_gradients(col(img))
    # columns 2 and 3 straddle the edge; every interior row sees 1 + 2 + 1
    np.testing.assert_array_equal(gx.data[1:-1, 2, 0], 4.0)
    np.testing.assert_array_equal(gx.data[1:-1, 3, 0], 4.0)
    np.testing.assert_array_equal(gx.data[1:-1, 1, 0], 0.0)


def test_sobel_rejects_multichannel():
    with pytest.raises(ShapeError):
        sobel_gradients(Tensor(np.zeros((3, 3, 2))))


# ------------------------------------------------------------------- mask


def test_zero_mask_net_gives_half():
    gm = predict_gradient_mask(col(np.eye(4)), col(np.ones((4, 4))), zero_mask_params())
    np.testing.assert_array_equal(gm.data, 0.5)


def test_mask_matches_composition():
    p, rng = mask_params(1)
    s1, s2 = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    sx = np.array([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    grads = []
    for s in (s1, s2):
        grads.append(conv2d_loop(s[..., None], sx[:, :, None, None]))
        grads.append(conv2d_loop(s[..., None], sx.T[:, :, None, None]))
    x = np.concatenate(grads, axis=-1)
    h = gelu_ref(conv2d_loop(x, p["c1.w"].data, p["c1.b"].data))
    want = 1.0 / (1.0 + np.exp(-conv2d_loop(h, p["c2.w"].data, p["c2.b"].data)))
    np.testing.assert_allclose(predict_gradient_mask(col(s1), col(s2), p).data, want, atol=1e-10)


def test_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        predict_gradient_mask(col(np.zeros((3, 3))), col(np.zeros((3, 4))), zero_mask_params())


def test_uncommon_selection_examples():
    s = col(np.full((2, 2), 2.0))
    assert (mask_uncommon(s, col(np.ones((2, 2)))).data == 0).all()
    np.testing.assert_array_equal(mask_uncommon(s, col(np.zeros((2, 2)))).data, s.data)
    np.testing.assert_array_equal(mask_uncommon(s, col(np.full((2, 2), 0.5))).data, 1.0)


# -------------------------------------------------------------- histogram


def test_histogram_marginals_are_consistent():
    rng = np.random.default_rng(2)
    t1, t2 = Tensor(rng.normal(size=50)), Tensor(rng.random(50))
    p1, p2, p12 = soft_joint_histogram(t1, t2, HistogramConfig())
    np.testing.assert_allclose(p12.data.sum(axis=1), p1.data, atol=1e-12)
    np.testing.assert_allclose(p12.data.sum(axis=0), p2.data, atol=1e-12)
    assert abs(p12.data.sum() - 1.0) < 1e-12


def test_values_at_one_centre_concentrate():
    cfg = HistogramConfig(bins=4, sigma=0.01, value_range=(0.0, 4.0))
    p1, _, _ = soft_joint_histogram(Tensor(np.full(10, 2.5)), Tensor(np.full(10, 0.5)), cfg)
    assert p1.data[2] >= 0.999


def test_sharp_soft_histogram_approaches_hard_histogram():
    rng = np.random.default_rng(3)
    a, b = rng.random(4096), rng.random(4096)
    cfg = HistogramConfig(bins=32, sigma=0.01)
    _, _, p12 = soft_joint_histogram(Tensor(a), Tensor(b), cfg)
    hard, _, _ = np.histogram2d(a, b, bins=32, range=[[a.min(), a.max()], [b.min(), b.max()]])
    hard /= hard.sum()
    assert 0.5 * np.abs(p12.data - hard).sum() <= 0.05


# ---------------------------------------------------------------- entropy


def test_entropy_examples():
    assert abs(entropy(np.full(4, 0.25)).item() - math.log(4)) < 1e-12
    assert entropy(np.array([0.0, 1.0, 0.0])).item() == 0.0
    assert abs(entropy(np.array([0.25, 0.75])).item() - 0.5623351446188083) < 1e-12
    assert abs(entropy_ref([0.25, 0.75]) - 0.5623351446188083) < 1e-12


def test_hand_built_joint():
    joint = np.array([[0.4, 0.1], [0.1, 0.4]])
    h12 = entropy(joint).item()
    assert abs(h12 - 1.1935496040981333) < 1e-12
    assert abs(h12 - entropy_ref(joint)) < 1e-12
    loss = nmi_from_joint(Tensor(joint)).item()
    assert abs(loss - 0.27807190511263746) < 1e-12
    assert abs(loss - nmi_ref(joint)) < 1e-12


@pytest.mark.parametrize("seed", range(100))
def test_cross_entropy_minus_kl_is_entropy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    p, q = rng.random(n) + 1e-3, rng.random(n) + 1e-3
    p, q = p / p.sum(), q / q.sum()
    lhs = (cross_entropy(p, q) - kl_divergence(p, q)).item()
    assert abs(lhs - entropy(p).item()) <= 1e-10
    assert abs(marginal_entropy_via_kl(p, q).item() - entropy(p).item()) <= 1e-10


def test_independent_joint_gives_zero():
    rng = np.random.default_rng(4)
    p1, p2 = rng.random(8), rng.random(5)
    joint = np.outer(p1 / p1.sum(), p2 / p2.sum())
    assert abs(nmi_from_joint(Tensor(joint)).item()) <= 1e-9


def test_identical_masked_features_give_one():
    rng = np.random.default_rng(5)
    p, _ = mask_params(5)
    s = col(rng.normal(size=(8, 8)))
    loss = masked_mi_loss(s, Tensor(s.data.copy()), p, SHARP)
    assert abs(loss.item() - 1.0) <= 1e-9


def test_fully_masked_contributes_zero_with_warning():
    p = zero_mask_params()
    p["c2.b"].data[...] = 1e6  # GM == 1 everywhere
    rng = np.random.default_rng(6)
    with pytest.warns(RuntimeWarning):
        loss = masked_mi_loss(col(rng.normal(size=(4, 4))), col(rng.normal(size=(4, 4))), p,
                              HistogramConfig())
    assert loss.item() == 0.0


def test_masked_mi_gradcheck():
    p, rng = mask_params(7)
    s1 = Tensor(rng.normal(size=(6, 6, 1)), requires_grad=True)
    s2 = Tensor(rng.normal(size=(6, 6, 1)), requires_grad=True)
    cfg = HistogramConfig(bins=8)
    ranges = masked_mi(s1, s2, p, cfg).ranges
    err = finite_diff_check(lambda: masked_mi_loss(s1, s2, p, cfg, ranges),
                            {"s1": s1, "s2": s2, **p})
    assert err <= 1e-3


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_loss_stays_in_unit_interval(seed):
    p, rng = mask_params(seed % 20)
    s1, s2 = col(rng.normal(size=(5, 5))), col(rng.normal(size=(5, 5)) * rng.random())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = masked_mi_loss(s1, s2, p, HistogramConfig(bins=int(rng.integers(2, 40)))).item()
    assert 0.0 <= v <= 1.0


# ----------------------------------------------------------------- totals


def test_fusion_loss_examples():
    gt = np.random.default_rng(8).random((4, 4, 3))
    p, rng = mask_params(8)
    pairs = [(col(rng.normal(size=(4, 4))), col(rng.normal(size=(4, 4))))]
    assert fusion_loss(Tensor(gt), gt, pairs, 0.0, [p], HistogramConfig()).total.item() == 0.0
    t = fusion_loss(Tensor(gt + 1.0), gt, pairs, 0.0, [p], HistogramConfig()).total.item()
    assert abs(t - 1.0) < 1e-12


def test_fusion_loss_adds_weighted_mi():
    rng = np.random.default_rng(9)
    gt = rng.random((4, 4, 3))
    io = Tensor(rng.random((4, 4, 3)))
    masks = [mask_params(s)[0] for s in (1, 2)]
    pairs = [(col(rng.normal(size=(4, 4))), col(rng.normal(size=(4, 4)))) for _ in range(2)]
    cfg = HistogramConfig()
    terms = fusion_loss(io, gt, pairs, 0.1, masks, cfg)
    mis = [masked_mi_loss(a, b, m, cfg).item() for (a, b), m in zip(pairs, masks)]
    want = np.abs(io.data - gt).mean() + 0.1 * sum(mis)
    assert abs(terms.total.item() - want) <= 1e-12
    assert abs(terms.parts["mi"] - sum(mis)) <= 1e-12


def test_fusion_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        fusion_loss(Tensor(np.zeros((4, 4, 3))), np.zeros((4, 4, 1)), [], 0.0, [],
                    HistogramConfig())


def test_hdr_loss_identical_streams():
    rng = np.random.default_rng(10)
    s = rng.normal(size=(6, 6))
    gt = rng.random((6, 6, 3))
    N, lam = 2, 0.1
    triples = [tuple(col(s) for _ in range(3)) for _ in range(N)]
    masks = [(mask_params(n)[0], mask_params(n + 10)[0]) for n in range(N)]
    terms = hdr_loss(Tensor(gt), gt, triples, lam, masks, SHARP)
    assert abs(terms.mi.item() - 2 * N) <= 1e-9
    assert abs(terms.total.item() - 2 * N * lam) <= 1e-9
    assert set(terms.parts) == {"mi_under", "mi_over"}


def test_hdr_loss_without_mi_is_tonemapped_l1():
    rng = np.random.default_rng(11)
    gt, io = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    triples = [tuple(col(rng.normal(size=(4, 4))) for _ in range(3))]
    masks = [(mask_params(0)[0], mask_params(1)[0])]
    got = hdr_loss(Tensor(io), gt, triples, 0.0, masks, HistogramConfig()).total.item()

    def mu(x):
        return np.log1p(5000 * x) / np.log1p(5000)

    assert abs(got - np.abs(mu(io) - mu(gt)).mean()) <= 1e-10


def test_hdr_loss_needs_three_streams():
    with pytest.raises(ValueError):
        hdr_loss(Tensor(np.zeros((2, 2, 3))), np.zeros((2, 2, 3)),
                 [(col(np.zeros((2, 2))),) * 2], 0.1, [(None, None)], HistogramConfig())


def test_mu_law_endpoints():
    np.testing.assert_allclose(mu_law(Tensor(np.array([0.0, 1.0]))).data, [0.0, 1.0], atol=1e-15)
