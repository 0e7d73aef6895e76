import math

import numpy as np
import pytest

from beamdip.autodiff import Tensor
from beamdip.exceptions import BadParams, EmptyMask, ShapeError
from beamdip.losses import (
    LAPLACIAN,
    SOBEL_X,
    SOBEL_Y,
    LossWeights,
    composite_loss,
    laplacian_variance,
    psnr,
    shannon_entropy,
    tenengrad,
    weight_map,
)
from oracles import brute_correlate_mirror, central_diff, rel_err


def test_loss_weights_validation():
    LossWeights(0, 0, 1, 0)
    with pytest.raises(BadParams):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(BadParams):
        LossWeights(-1, 1, 1, 1)


def test_weight_map():
    v = np.array([[0.0, 0.5], [1.0, 0.25]])
    w = weight_map(v, 0.1)
    assert w[0, 0] == pytest.approx(0.1) and w[1, 0] == 1.0
    order = np.argsort(v.ravel())
    assert np.all(np.diff(w.ravel()[order]) > 0)
    assert not weight_map(np.zeros((2, 2)), 0.0).any()
    with pytest.raises(BadParams):
        weight_map(v, 1.0)


def test_hand_example():
    out = np.array([[0.0, 1.0], [0.0, 1.0]])
    lb = composite_loss(out, np.zeros((2, 2))).values()
    assert lb["mse"] == 0.5 and lb["mae"] == 0.5
    # 4 neighbour pairs; the two horizontal ones differ by 1
    assert lb["tv"] == 0.5 and lb["gdl"] == 0.5
    assert lb["total"] == pytest.approx(1.0 * 0.5 + 0.5 * 0.5 + 0.05 * 0.5 + 0.1 * 0.5, abs=1e-12)


def test_identical_constant_images_give_zero():
    c = np.full((4, 5), 0.3)
    lb = composite_loss(c, c).values()
    assert all(v == 0.0 for v in lb.values())


def test_tv_only_constant_output():
    lb = composite_loss(np.full((4, 4), 0.7), np.random.default_rng(0).random((4, 4)), lw=LossWeights(0, 0, 1, 0))
    assert lb.total.data == 0.0


def test_total_is_weighted_sum_and_nonnegative():
    rng = np.random.default_rng(1)
    lw = LossWeights(0.3, 1.7, 0.2, 0.9)
    for _ in range(10):
        out, t = rng.random((6, 7)), rng.random((6, 7))
        v = composite_loss(out, t, weight_map(t), rng.random((6, 7)) > 0.3, lw).values()
        assert min(v.values()) >= 0
        assert abs(v["total"] - (0.3 * v["mse"] + 1.7 * v["mae"] + 0.2 * v["tv"] + 0.9 * v["gdl"])) < 1e-12


def test_mask_equals_submultiset_loss():
    rng = np.random.default_rng(2)
    out, t, w = rng.random((5, 6)), rng.random((5, 6)), rng.random((5, 6))
    m = rng.random((5, 6)) > 0.4
    v = composite_loss(out, t, w, m).values()
    d = out[m] - t[m]
    assert v["mse"] == pytest.approx(np.mean(w[m] * d * d), rel=1e-13)
    assert v["mae"] == pytest.approx(np.mean(np.abs(d)), rel=1e-13)


def test_pairs_need_both_pixels_masked():
    out = np.array([[0.0, 1.0, 0.0]] * 3)
    m = np.zeros((3, 3), bool)
    m[:, 0] = True  # only vertical pairs inside column 0 count
    assert composite_loss(out, np.zeros((3, 3)), mask=m).values()["tv"] == 0.0


def test_validation_pixels_do_not_reach_training_loss():
    rng = np.random.default_rng(3)
    out, t = rng.random((6, 6)), rng.random((6, 6))
    m = rng.random((6, 6)) > 0.2
    t2 = np.where(m, t, 0.0)
    a = composite_loss(out, t, weight_map(t), m).values()
    b = composite_loss(out, t2, weight_map(t2), m).values()
    assert a == b


def test_errors():
    with pytest.raises(EmptyMask):
        composite_loss(np.zeros((2, 2)), np.zeros((2, 2)), mask=np.zeros((2, 2), bool))
    with pytest.raises(ShapeError):
        composite_loss(np.zeros((2, 2)), np.zeros((3, 2)))


@pytest.mark.parametrize("component", ["mse", "mae", "tv", "gdl", "total"])
def test_gradient_fd(component):
    rng = np.random.default_rng(4)
    out = rng.random((1, 6, 7))
    t = rng.random((6, 7))
    w = weight_map(t)
    m = rng.random((6, 7)) > 0.25
    x = Tensor(out, requires_grad=True)
    getattr(composite_loss(x, t, w, m), component).backward()
    num = central_diff(lambda: float(getattr(composite_loss(out, t, w, m), component).data), out)
    assert rel_err(x.grad, num) < 1e-4


def test_entropy():
    assert shannon_entropy(np.full((4, 4), 0.3)) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert shannon_entropy(half) == 1.0
    ramp = np.tile(np.arange(256) / 255.0, (3, 1))
    assert shannon_entropy(ramp) == pytest.approx(8.0, abs=1e-12)
    r = shannon_entropy(np.random.default_rng(0).random((20, 20)))
    assert 0 <= r <= 8


def test_laplacian_variance():
    assert laplacian_variance(np.full((5, 5), 2.0)) == 0.0
    ramp = np.add.outer(np.arange(8.0), 2 * np.arange(9.0))
    # affine: zero response inside; the reflected border rows follow the oracle
    resp = brute_correlate_mirror(ramp, LAPLACIAN)
    assert not resp[1:-1, 1:-1].any()
    assert laplacian_variance(ramp) == pytest.approx(np.var(resp), rel=1e-14)
    imp = np.zeros((7, 7))
    imp[3, 3] = 1.0
    assert laplacian_variance(imp) == np.var(brute_correlate_mirror(imp, LAPLACIAN))
    assert laplacian_variance(imp) > 0


def test_tenengrad():
    assert tenengrad(np.full((5, 5), 1.0)) == 0.0
    step = np.zeros((6, 6))
    step[:, 3:] = 1.0
    gx, gy = brute_correlate_mirror(step, SOBEL_X), brute_correlate_mirror(step, SOBEL_Y)
    assert tenengrad(step) == pytest.approx((gx**2 + gy**2).sum(), rel=1e-14)
    I = np.random.default_rng(5).random((7, 9))
    assert tenengrad(I.T) == pytest.approx(tenengrad(I), rel=1e-12)


def test_psnr():
    a = np.random.default_rng(6).random((8, 8))
    assert psnr(a, a) == math.inf
    assert psnr(np.full((4, 4), 0.6), np.full((4, 4), 0.5)) == pytest.approx(20.0)
    clean = np.full((64, 64), 0.5)
    vals = [psnr(clean + np.random.default_rng(7).normal(0, s, clean.shape), clean) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]
    with pytest.raises(ShapeError):
        psnr(a, a[:4])
