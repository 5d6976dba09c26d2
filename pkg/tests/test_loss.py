import numpy as np
import pytest

from conftest import relerr
from splatnewton.errors import InvalidInputError
from splatnewton.loss import (LossConfig, gaussian_window_1d, l2_loss_and_derivs, ssim_map,
                              ssim_metric, ssim_value_and_derivs, ssim_window_stats, total_loss,
                              total_loss_derivs)


def image_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.1, 0.9, size=(size, size, 3))
    rendered = np.clip(target + 0.1 * rng.normal(size=target.shape), 0.0, 1.0)
    return rendered, target


def test_l2_single_pixel_example():
    target = np.zeros((10, 10, 3))
    rendered = target.copy()
    rendered[4, 7, 0] = 0.3
    loss, grad, hess = l2_loss_and_derivs(rendered, target)
    assert loss == pytest.approx(0.09 / 600, rel=1e-15)
    np.testing.assert_allclose(grad[4, 7], [0.001, 0.0, 0.0], rtol=1e-14)
    assert np.count_nonzero(grad) == 1
    np.testing.assert_allclose(hess, 1.0 / 300.0, rtol=1e-15)


def test_l2_gradient_fd():
    rendered, target = image_pair(0, 12)
    _, grad, _ = l2_loss_and_derivs(rendered, target)
    h = 1e-6
    for idx in [(0, 0, 0), (3, 5, 1), (11, 11, 2)]:
        e = np.zeros_like(rendered)
        e[idx] = h
        fd = (l2_loss_and_derivs(rendered + e, target)[0]
              - l2_loss_and_derivs(rendered - e, target)[0]) / (2 * h)
        assert relerr(grad[idx], fd) <= 1e-6


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        l2_loss_and_derivs(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(InvalidInputError):
        ssim_window_stats(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_window_weights():
    k = gaussian_window_1d(11, 1.5)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])
    assert np.argmax(k) == 5


def test_constant_image_statistics():
    img = np.full((20, 20, 3), 0.37)
    stats = ssim_window_stats(img, img)
    np.testing.assert_allclose(stats.mu, 0.37, rtol=1e-13)
    np.testing.assert_allclose(stats.var, 0.0, atol=1e-14)
    np.testing.assert_allclose(stats.cov, 0.0, atol=1e-14)


def test_identical_images_statistics():
    img, _ = image_pair(1, 16)
    stats = ssim_window_stats(img, img)
    np.testing.assert_allclose(stats.mu, stats.mu_t, atol=1e-15)
    np.testing.assert_allclose(stats.cov, stats.var, atol=1e-13)


def test_window_stats_match_direct_sum():
    rendered, target = image_pair(2, 20)
    stats = ssim_window_stats(rendered, target)
    k = gaussian_window_1d(11, 1.5)
    w2 = np.outer(k, k)
    H, W, _ = rendered.shape
    for (i, j) in [(0, 0), (3, 17), (10, 10), (19, 19), (5, 0)]:
        ii = np.arange(i - 5, i + 6)
        jj = np.arange(j - 5, j + 6)
        inside = ((ii >= 0) & (ii < H))[:, None] & ((jj >= 0) & (jj < W))[None, :]
        w = np.where(inside, w2, 0.0)
        w = w / w.sum()
        x = rendered[np.clip(ii, 0, H - 1)][:, np.clip(jj, 0, W - 1)]
        y = target[np.clip(ii, 0, H - 1)][:, np.clip(jj, 0, W - 1)]
        mx = np.einsum("ab,abc->c", w, x)
        my = np.einsum("ab,abc->c", w, y)
        vx = np.einsum("ab,abc->c", w, (x - mx) ** 2)
        cxy = np.einsum("ab,abc->c", w, (x - mx) * (y - my))
        assert np.max(np.abs(stats.mu[i, j] - mx)) <= 1e-12
        assert np.max(np.abs(stats.mu_t[i, j] - my)) <= 1e-12
        assert np.max(np.abs(stats.var[i, j] - vx)) <= 1e-12
        assert np.max(np.abs(stats.cov[i, j] - cxy)) <= 1e-12


def test_ssim_of_identical_images_is_one():
    img, _ = image_pair(3, 24)
    assert ssim_metric(img, img) == pytest.approx(1.0, abs=1e-12)
    stats = ssim_window_stats(img, img)
    loss, grad, _ = ssim_value_and_derivs(stats, img, img)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(grad)) <= 1e-12


def ssim_loss(rendered, target):
    stats = ssim_window_stats(rendered, target)
    return 1.0 - ssim_map(stats).mean()


def test_ssim_gradient_and_hessian_fd():
    rendered, target = image_pair(4, 32)
    stats = ssim_window_stats(rendered, target)
    _, grad, hess = ssim_value_and_derivs(stats, rendered, target)
    rng = np.random.default_rng(0)
    h = 1e-4
    idxs = [(0, 0, 0), (31, 31, 2), (0, 16, 1), (16, 16, 0)]
    idxs += [tuple(int(v) for v in rng.integers(0, (32, 32, 3))) for _ in range(10)]
    for idx in idxs:
        e = np.zeros_like(rendered)
        e[idx] = h
        lp, l0, lm = ssim_loss(rendered + e, target), ssim_loss(rendered, target), \
            ssim_loss(rendered - e, target)
        assert relerr(grad[idx], (lp - lm) / (2 * h)) <= 1e-4
        gp = ssim_value_and_derivs(ssim_window_stats(rendered + e, target), rendered + e,
                                   target, second=False)[1][idx]
        gm = ssim_value_and_derivs(ssim_window_stats(rendered - e, target), rendered - e,
                                   target, second=False)[1][idx]
        assert relerr(hess[idx], (gp - gm) / (2 * h)) <= 1e-3
        assert relerr(hess[idx], (lp - 2 * l0 + lm) / h ** 2) <= 1e-3


def test_lambda_zero_is_l2():
    rendered, target = image_pair(5, 16)
    loss, d = total_loss_derivs(rendered, target, LossConfig(lam=0.0))
    l2, g, h = l2_loss_and_derivs(rendered, target)
    assert loss == l2
    np.testing.assert_array_equal(d.grad, g)
    np.testing.assert_array_equal(d.hess, h)


def test_total_loss_combines_terms():
    rendered, target = image_pair(6, 16)
    cfg = LossConfig(lam=0.2)
    l2 = l2_loss_and_derivs(rendered, target)[0]
    expect = l2 + 0.2 * ssim_loss(rendered, target)
    assert total_loss(rendered, target, cfg) == pytest.approx(expect, rel=1e-14)
    assert total_loss_derivs(rendered, target, cfg)[0] == pytest.approx(expect, rel=1e-14)


def test_channels_are_decoupled():
    rendered, target = image_pair(7, 16)
    _, d = total_loss_derivs(rendered, target)
    changed = rendered.copy()
    changed[..., 1] = np.clip(changed[..., 1] + 0.2, 0, 1)
    _, d2 = total_loss_derivs(changed, target)
    np.testing.assert_allclose(d2.grad[..., 0], d.grad[..., 0], atol=1e-16)
    np.testing.assert_allclose(d2.grad[..., 2], d.grad[..., 2], atol=1e-16)
    assert not np.allclose(d2.grad[..., 1], d.grad[..., 1])


def test_negative_lambda_rejected():
    with pytest.raises(InvalidInputError):
        LossConfig(lam=-0.1)
