import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propsplat.gaussians import GaussianCloud
from propsplat.losses import (
    LossWeights, l1_dssim, normal_loss, planar_loss, psnr, scale_loss, ssim, ssim_with_grad,
)

import oracles


def _img(rng, h=8, w=8):
    return rng.uniform(0, 1, (h, w, 3))


def test_l1_dssim_identity_and_pure_l1(rng):
    a = _img(rng)
    loss, g = l1_dssim(a, a)
    assert loss == 0.0
    b = np.clip(a, 0, 0.8)
    assert np.isclose(l1_dssim(b + 0.1, b, lam=0.0)[0], 0.1)


def test_l1_dssim_gradient(rng):
    a, b = _img(rng), _img(rng)
    _, g = l1_dssim(a, b, 0.2)
    fd = oracles.finite_difference(lambda: l1_dssim(a, b, 0.2)[0], a, 1e-6)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_ssim_matches_direct_window(rng):
    a, b = _img(rng, 12, 10), _img(rng, 12, 10)
    assert abs(ssim(a, b) - oracles.gaussian_window_ssim(a, b)) < 1e-12


def test_ssim_identity_and_symmetry(rng):
    a, b = _img(rng, 16, 16), _img(rng, 16, 16)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    _, g = ssim_with_grad(a, b)
    fd = oracles.finite_difference(lambda: ssim(a, b), a, 1e-6)
    assert np.abs(g - fd).max() < 1e-7


def test_shape_mismatch_raises(rng):
    with pytest.raises(ValueError):
        l1_dssim(_img(rng, 8, 8), _img(rng, 8, 9))
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def _field(v, shape=(4, 5)):
    return np.broadcast_to(np.asarray(v, float), shape + (3,)).copy()


def test_normal_loss_values():
    q = np.ones((4, 5), bool)
    assert normal_loss(_field([0, 0, 1]), _field([0, 0, 1]), q)[0] == 0.0
    assert normal_loss(_field([0, 0, 1]), _field([0, 0, -1]), q)[0] == 4.0
    assert normal_loss(_field([1, 0, 0]), _field([0, 1, 0]), q)[0] == 3.0
    loss, g = normal_loss(_field([1, 0, 0]), _field([0, 1, 0]), np.zeros((4, 5), bool))
    assert loss == 0.0 and not g.any()
    assert normal_loss(_field([0, 0, 1]), _field([0, 0, -1]), q, reduction="sum")[0] == 80.0


def test_normal_loss_gradient_and_mask(rng):
    a = rng.normal(size=(6, 6, 3))
    b = rng.normal(size=(6, 6, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    q = rng.uniform(size=(6, 6)) < 0.6
    _, g = normal_loss(a, b, q)
    assert not g[~q].any()
    fd = oracles.finite_difference(lambda: normal_loss(a, b, q)[0], a, 1e-7)
    assert np.abs(g - fd).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_normal_loss_range_and_angular_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3, 3))
    b = rng.normal(size=(3, 3, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    q = np.ones((3, 3), bool)
    loss = normal_loss(a, b, q)[0]
    assert 0.0 <= loss <= 4.0
    R = oracles.random_rotation(rng)
    ang = np.abs(1 - np.sum(a * b, -1))
    ang_r = np.abs(1 - np.sum((a @ R.T) * (b @ R.T), -1))
    assert np.abs(ang - ang_r).max() < 1e-12


def _cloud_with_scales(scales):
    s = np.asarray(scales, float)
    n = len(s)
    return GaussianCloud(np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.log(np.maximum(s, 1e-300)), np.zeros(n), np.zeros((n, 3)))


def test_scale_loss_values():
    assert np.isclose(scale_loss(_cloud_with_scales([[0.01, 0.5, 0.2]] * 4))[0], 0.01)
    assert scale_loss(_cloud_with_scales([[5, 5, 0]]))[0] < 1e-200
    assert scale_loss(GaussianCloud.empty())[0] == 0.0


def test_scale_loss_gradient_to_argmin(rng):
    c = _cloud_with_scales(rng.uniform(0.01, 1, (6, 3)))
    c.log_scales[0] = np.log([0.3, 0.3, 0.7])
    _, g = scale_loss(c)
    assert g[0, 0] > 0 and g[0, 1] == 0 and g[0, 2] == 0
    c.log_scales[0, 1] -= 0.2
    _, g = scale_loss(c)
    fd = oracles.finite_difference(lambda: scale_loss(c)[0], c.log_scales, 1e-7)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4
    assert (np.count_nonzero(g, axis=1) == 1).all()


def test_planar_loss_arithmetic():
    assert planar_loss(0.0, 0.0) == 0.0
    assert planar_loss(4.0, 0.01, 0.001, 100.0) == pytest.approx(1.004, abs=1e-12)
    assert planar_loss(4.0, 0.01, 0.0, 0.0) == 0.0


def test_loss_weights_validation():
    w = LossWeights()
    assert (w.lam, w.beta, w.gamma) == (0.2, 0.001, 100.0)
    for bad in ({"lam": 1.5}, {"beta": -1.0}, {"gamma": -0.1}):
        with pytest.raises(ValueError):
            LossWeights(**bad)


def test_psnr_cases(rng):
    a = _img(rng)
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 1e-6)) == 100.0
