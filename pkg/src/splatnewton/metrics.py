"""Image quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .loss import LossConfig, ssim_metric, total_loss

PSNR_INF = float("inf")


def psnr(rendered, target):
    """``-10 log10(MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidInputError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * np.log10(mse)


@dataclass
class MetricsReport:
    psnr: list
    ssim: list
    loss: list

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    @property
    def mean_loss(self):
        return float(np.mean(self.loss))

    def to_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "loss": self.loss,
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                "mean_loss": self.mean_loss}


def evaluate_images(rendered, targets, config=LossConfig()):
    return MetricsReport([psnr(r, t) for r, t in zip(rendered, targets)],
                         [ssim_metric(r, t, config) for r, t in zip(rendered, targets)],
                         [total_loss(r, t, config) for r, t in zip(rendered, targets)])
