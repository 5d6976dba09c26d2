"""Comparative runs: Newton against the GD baseline, the secondary-view
ablation on a ring of cameras and the attribute-order ablation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import synth_scene
from .trainer import TrainConfig, run_training

STANDARD_FIXTURE = {"n_kernels": 100, "n_views": 8, "resolution": 64}
RING_FIXTURE = {"n_kernels": 100, "n_views": 12, "resolution": 48, "layout": "ring"}


@dataclass
class ConvergenceResult:
    seed: int
    gd_target: float
    newton_curve: list
    newton_ms: float
    gd_ms: float

    @property
    def iterations_to_target(self):
        """First Newton step whose probe loss is at or below ``gd_target``."""
        for step, loss in enumerate(self.newton_curve):
            if loss <= self.gd_target:
                return step
        return None

    @property
    def cost_ratio(self):
        return self.newton_ms / self.gd_ms


def _mean_dt(reports):
    return float(np.mean([r.dt_ms for r in reports[1:]]))


def convergence_run(seed, newton_steps=20, gd_steps=200, fixture=STANDARD_FIXTURE, **overrides):
    """Probe-loss curve of Newton against the GD probe loss after ``gd_steps``."""
    _, init, dataset = synth_scene(seed, **fixture)
    gd = TrainConfig(optimizer="gd", max_steps=gd_steps, seed=seed, log_every=gd_steps)
    _, gd_reports = run_training(gd, init, dataset)
    newton = TrainConfig(optimizer="newton", max_steps=newton_steps, seed=seed, **overrides)
    _, nt_reports = run_training(newton, init, dataset)
    return ConvergenceResult(seed, gd_reports[-1].probe_loss,
                             [r.probe_loss for r in nt_reports], _mean_dt(nt_reports),
                             _mean_dt(gd_reports))


def spikes(curve):
    """Positive probe-loss increases between consecutive steps."""
    c = np.asarray(curve, dtype=np.float64)
    return np.maximum(0.0, np.diff(c))


def spike_run(seed, knn, steps=24, fixture=RING_FIXTURE, **overrides):
    """Mean positive probe-loss spike of a Newton run with ``knn`` secondary views."""
    _, init, dataset = synth_scene(seed, **fixture)
    config = TrainConfig(optimizer="newton", max_steps=steps, seed=seed, knn=knn, **overrides)
    _, reports = run_training(config, init, dataset)
    curve = [r.probe_loss for r in reports]
    return float(np.mean(spikes(curve))), curve


ORDERS = {
    "position_first": ("position", "rotation", "scaling", "opacity", "color"),
    "color_first": ("color", "position", "rotation", "scaling", "opacity"),
    "scaling_before_rotation": ("position", "scaling", "rotation", "opacity", "color"),
}


def order_run(seed, order, steps=24, fixture=STANDARD_FIXTURE, **overrides):
    """Final probe loss of a Newton run with the given attribute order."""
    _, init, dataset = synth_scene(seed, **fixture)
    config = TrainConfig(optimizer="newton", order=order, max_steps=steps, seed=seed,
                         log_every=steps, **overrides)
    _, reports = run_training(config, init, dataset)
    return reports[-1].probe_loss


def convergence_rows(result):
    rows = []
    for step, loss in enumerate(result.newton_curve):
        rows.append({"seed": result.seed, "step": step, "newton_probe_loss": loss,
                     "gd_target": result.gd_target})
    return rows
