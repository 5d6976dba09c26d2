"""Training loss ``L = L2 + lam * L_ssim`` with per-pixel first and (diagonal)
second derivatives w.r.t. the rendered colors.

SSIM statistics use an 11x11 Gaussian window (sigma 1.5) whose weights are
renormalized over the taps that fall inside the image. Per-pixel derivatives
accumulate the contribution of every window covering the pixel; all window
sums are separable filters of per-window coefficient maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidInputError


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    window: int = 11
    window_sigma: float = 1.5

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lambda must be non-negative")
        if self.window % 2 != 1:
            raise InvalidInputError("SSIM window must be odd")


@dataclass
class SsimWindowStats:
    """Window statistics per pixel and channel, (H, W, 3) each; ``norm`` is (H, W)."""

    mu: np.ndarray
    mu_t: np.ndarray
    var: np.ndarray
    var_t: np.ndarray
    cov: np.ndarray
    norm: np.ndarray


@dataclass
class PixelLossDerivatives:
    """Per-pixel gradient (H, W, 3) and diagonal Hessian (H, W, 3)."""

    grad: np.ndarray
    hess: np.ndarray


def gaussian_window_1d(size, sigma):
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter(img, k):
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def _check_pair(rendered, target):
    if rendered.shape != target.shape:
        raise InvalidInputError(f"image shapes differ: {rendered.shape} vs {target.shape}")


def l2_loss_and_derivs(rendered, target):
    """``sum |c - c_t|^2 / (6 |I|)``; gradient ``(c - c_t) / (3 |I|)``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(rendered, target)
    n_pix = rendered.shape[0] * rendered.shape[1]
    diff = rendered - target
    loss = np.sum(diff * diff) / (6.0 * n_pix)
    grad = diff / (3.0 * n_pix)
    hess = np.full(diff.shape, 1.0 / (3.0 * n_pix))
    return loss, grad, hess


def ssim_window_stats(rendered, target, config=LossConfig()):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(rendered, target)
    if min(rendered.shape[:2]) < config.window:
        raise InvalidInputError(f"image smaller than the {config.window}x{config.window} window")
    k = gaussian_window_1d(config.window, config.window_sigma)
    norm = _filter(np.ones(rendered.shape[:2]), k)
    z = norm[..., None]
    mu = _filter(rendered, k) / z
    mu_t = _filter(target, k) / z
    var = np.maximum(_filter(rendered * rendered, k) / z - mu * mu, 0.0)
    var_t = np.maximum(_filter(target * target, k) / z - mu_t * mu_t, 0.0)
    cov = _filter(rendered * target, k) / z - mu * mu_t
    return SsimWindowStats(mu, mu_t, var, var_t, cov, norm)


def _ssim_terms(stats, config):
    f0 = 2.0 * stats.mu * stats.mu_t + config.c1
    f1 = 2.0 * stats.cov + config.c2
    f2 = stats.mu ** 2 + stats.mu_t ** 2 + config.c1
    f3 = stats.var + stats.var_t + config.c2
    return f0, f1, f2, f3


def ssim_map(stats, config=LossConfig()):
    f0, f1, f2, f3 = _ssim_terms(stats, config)
    return f0 * f1 / (f2 * f3)


def ssim_value_and_derivs(stats, rendered, target, config=LossConfig(), second=True):
    """Return ``(L_ssim, grad, hess)`` with ``L_ssim = 1 - mean SSIM`` over pixels
    and channels; ``grad``/``hess`` are (H, W, 3) per-pixel derivatives."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    f0, f1, f2, f3 = _ssim_terms(stats, config)
    S = f0 * f1 / (f2 * f3)
    n_pix = x.shape[0] * x.shape[1]
    loss = 1.0 - S.mean()

    # partials of S w.r.t. (f0, f1, f2, f3)
    s0 = f1 / (f2 * f3)
    s1 = f0 / (f2 * f3)
    s2 = -S / f2
    s3 = -S / f3
    # per unit window weight, d f_i / d x_m = a0_i + 2 x_m [i == 3] + 2 y_m [i == 1]
    mu, mu_t = stats.mu, stats.mu_t
    a0 = (2.0 * mu_t, -2.0 * mu_t, 2.0 * mu, -2.0 * mu)
    k = gaussian_window_1d(config.window, config.window_sigma)
    z = stats.norm[..., None]

    first = s0 * a0[0] + s1 * a0[1] + s2 * a0[2] + s3 * a0[3]
    dS = (_filter(first / z, k) + x * _filter(2.0 * s3 / z, k)
          + y * _filter(2.0 * s1 / z, k))
    grad = -dS / (3.0 * n_pix)
    if not second:
        return loss, grad, None

    inv23 = 1.0 / (f2 * f3)
    s01 = inv23
    s02 = -f1 * inv23 / f2
    s03 = -f1 * inv23 / f3
    s12 = -f0 * inv23 / f2
    s13 = -f0 * inv23 / f3
    s22 = 2.0 * S / f2 ** 2
    s33 = 2.0 * S / f3 ** 2
    s23 = S * inv23
    # (S_hat a0)_i for i = 1, 3 and a0^T S_hat a0
    sa1 = s01 * a0[0] + s12 * a0[2] + s13 * a0[3]
    sa3 = s03 * a0[0] + s13 * a0[1] + s23 * a0[2] + s33 * a0[3]
    quad = (2.0 * (s01 * a0[0] * a0[1] + s02 * a0[0] * a0[2] + s03 * a0[0] * a0[3]
                   + s12 * a0[1] * a0[2] + s13 * a0[1] * a0[3] + s23 * a0[2] * a0[3])
            + s22 * a0[2] ** 2 + s33 * a0[3] ** 2)
    k2 = k * k
    z2 = z * z
    d2S = (_filter(2.0 * s3 / z, k)
           + _filter((quad + 2.0 * s2 - 2.0 * s3) / z2, k2)
           + x * _filter(4.0 * sa3 / z2, k2)
           + y * _filter(4.0 * sa1 / z2, k2)
           + x * x * _filter(4.0 * s33 / z2, k2)
           + x * y * _filter(8.0 * s13 / z2, k2))
    hess = -d2S / (3.0 * n_pix)
    return loss, grad, hess


def ssim_metric(rendered, target, config=LossConfig()):
    return float(ssim_map(ssim_window_stats(rendered, target, config), config).mean())


def total_loss_derivs(rendered, target, config=LossConfig(), second=True):
    """Return ``(L, PixelLossDerivatives)`` for ``L = L2 + lam * L_ssim``."""
    loss, grad, hess = l2_loss_and_derivs(rendered, target)
    if config.lam > 0.0:
        stats = ssim_window_stats(rendered, target, config)
        ls, gs, hs = ssim_value_and_derivs(stats, rendered, target, config, second)
        loss = loss + config.lam * ls
        grad = grad + config.lam * gs
        if second:
            hess = hess + config.lam * hs
    return loss, PixelLossDerivatives(grad, hess if second else None)


def total_loss(rendered, target, config=LossConfig()):
    loss, _, _ = l2_loss_and_derivs(rendered, target)
    if config.lam > 0.0:
        stats = ssim_window_stats(rendered, target, config)
        loss += config.lam * (1.0 - ssim_map(stats, config).mean())
    return float(loss)
