"""Training loop: per-image local Newton steps plus GD and Adam baselines."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalDegeneracyError
from .loss import LossConfig, ssim_metric, total_loss
from .metrics import psnr
from .newton import (ATTRIBUTES, GEOMETRIC, OpacityBarrier, SOLVERS, SolveConfig,
                     apply_update, attribute_gradients, dump_systems, evaluate_view)
from .raster import DEFAULT, render
from .scene import OPACITY_EPS, quaternion_exp, quaternion_multiply, renormalize_quaternion
from .secondary import DOWNSAMPLE, SecondaryTargetSet, fit_bounding_sphere

ORDER_ALIASES = {"pos": "position", "rot": "rotation", "scale": "scaling",
                 "opa": "opacity", "col": "color"}

# Baseline step sizes. Position, rotation and SH act directly on the
# attribute; scaling and opacity act on log-scale and logit-opacity.
GD_LEARNING_RATES = {"position": 1.0, "rotation": 20.0, "scaling": 20.0,
                     "opacity": 400.0, "color": 20.0}
ADAM_LEARNING_RATES = {"position": 1.6e-3, "rotation": 1e-2, "scaling": 5e-3,
                       "opacity": 5e-2, "color": 2.5e-3}


def parse_order(text):
    names = [ORDER_ALIASES.get(t.strip(), t.strip()) for t in text.split(",") if t.strip()]
    return tuple(names)


@dataclass
class TrainConfig:
    optimizer: str = "newton"
    order: tuple = ATTRIBUTES
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    lam: float = 0.2
    knn: int = 3
    downsample: int = DOWNSAMPLE
    learning_rates: dict | None = None
    log_every: int = 1
    barrier_weight: float = 1e-4
    barrier_decay: float = 0.5
    barrier_floor: float = 1e-6
    position_cap: float | None = 3.0
    rotation_cap: float | None = 0.5
    hessian: str = "clipped"
    coupling: bool = True
    render_options: object = DEFAULT
    dump_path: str | None = None

    def __post_init__(self):
        if self.optimizer not in ("newton", "gd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        self.order = tuple(self.order)
        if sorted(self.order) != sorted(ATTRIBUTES):
            raise InvalidInputError(f"order must be a permutation of {ATTRIBUTES}")
        if self.learning_rates is None:
            self.learning_rates = dict(GD_LEARNING_RATES if self.optimizer == "gd"
                                       else ADAM_LEARNING_RATES)

    @property
    def loss_config(self):
        return LossConfig(lam=self.lam)


@dataclass
class IterationReport:
    step: int
    image_id: int
    probe_loss: float
    psnr: float
    ssim: float
    dt_ms: float
    view_loss: float = float("nan")
    delta_norms: dict = field(default_factory=dict)


class Trainer:
    """Mutable training state: the scene, dataset, KNN sets and optimizer moments."""

    def __init__(self, config, scene, dataset, secondary=None):
        self.config = config
        self.scene = scene.copy()
        self.dataset = dataset
        self.step_index = 0
        self.epoch = 0
        self.barrier_weight = config.barrier_weight
        if secondary is None and config.optimizer == "newton" and config.knn > 0:
            sphere = fit_bounding_sphere(self.scene)
            secondary = SecondaryTargetSet.build(dataset, sphere, config.knn, config.downsample)
        self.secondary = secondary
        self.adam_state = {}
        self.last_systems = []

    # -- evaluation ----------------------------------------------------

    def probe(self):
        """Mean loss, PSNR and SSIM over the probe views."""
        losses, psnrs, ssims = [], [], []
        cfg = self.config.loss_config
        for i in self.dataset.probe_ids:
            img = render(self.scene, self.dataset.cameras[i], self.config.render_options).color
            tgt = self.dataset.images[i]
            losses.append(total_loss(img, tgt, cfg))
            psnrs.append(psnr(img, tgt))
            ssims.append(ssim_metric(img, tgt))
        return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(ssims))

    # -- steps ---------------------------------------------------------

    def _solve_config(self):
        c = self.config
        return SolveConfig(hessian=c.hessian, coupling=c.coupling, position_cap=c.position_cap,
                           rotation_cap=c.rotation_cap, barrier=OpacityBarrier(self.barrier_weight))

    def newton_step(self, t):
        c = self.config
        cam, tgt = self.dataset.cameras[t], self.dataset.images[t]
        opts, lcfg = c.render_options, c.loss_config
        primary = evaluate_view(self.scene, cam, tgt, lcfg, opts)
        view_loss = primary.loss
        secondaries = []
        if self.secondary is not None:
            sec_opts = replace(opts, lowpass=self.secondary.lowpass)
            for j in self.secondary.neighbors[t]:
                cam_j = self.secondary.cameras[j]
                # views smaller than the SSIM window fall back to the L2 term
                cfg_j = lcfg if min(cam_j.width, cam_j.height) >= lcfg.window \
                    else replace(lcfg, lam=0.0)
                secondaries.append(evaluate_view(self.scene, cam_j, self.secondary.images[j],
                                                 cfg_j, sec_opts))
        scfg = self._solve_config()
        norms = {}
        self.last_systems = []
        for i, attr in enumerate(c.order):
            system, update = SOLVERS[attr](self.scene, primary, secondaries, scfg)
            self.last_systems.append(system)
            norms[attr] = float(np.linalg.norm(system.delta))
            apply_update(self.scene, attr, update)
            later = c.order[i + 1:]
            if attr in GEOMETRIC and later:
                primary = evaluate_view(self.scene, cam, tgt, lcfg, opts)
        return view_loss, norms

    def gradient_step(self, t):
        c = self.config
        cam, tgt = self.dataset.cameras[t], self.dataset.images[t]
        view = evaluate_view(self.scene, cam, tgt, c.loss_config, c.render_options, second=False)
        grads = attribute_gradients(self.scene, view)
        s = self.scene
        # log-scale and logit-opacity parametrization for the baselines
        grads["scaling"] = grads["scaling"] * s.scales
        grads["opacity"] = grads["opacity"] * s.opacities * (1.0 - s.opacities)
        steps = {}
        for attr in ATTRIBUTES:
            lr = c.learning_rates[attr]
            g = grads[attr]
            if c.optimizer == "adam":
                steps[attr] = -lr * self._adam_direction(attr, g)
            else:
                steps[attr] = -lr * g
        s.positions = s.positions + steps["position"]
        s.rotations = renormalize_quaternion(
            quaternion_multiply(quaternion_exp(steps["rotation"]), s.rotations))
        s.scales = s.scales * np.exp(steps["scaling"])
        logit = np.log(s.opacities / (1.0 - s.opacities)) + steps["opacity"]
        s.opacities = np.clip(1.0 / (1.0 + np.exp(-logit)), 1.0001 * OPACITY_EPS,
                              1.0 - 1.0001 * OPACITY_EPS)
        s.sh = s.sh + steps["color"]
        s.sh[:, :, (s.sh_degree + 1) ** 2:] = 0.0
        return view.loss, {a: float(np.linalg.norm(v)) for a, v in steps.items()}

    def _adam_direction(self, attr, g, beta1=0.9, beta2=0.999, eps=1e-15):
        m, v, k = self.adam_state.get(attr, (np.zeros_like(g), np.zeros_like(g), 0))
        k += 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        self.adam_state[attr] = (m, v, k)
        m_hat = m / (1.0 - beta1 ** k)
        v_hat = v / (1.0 - beta2 ** k)
        return m_hat / (np.sqrt(v_hat) + eps)

    def train_step(self, t, probe=True):
        start = time.perf_counter()
        if self.config.optimizer == "newton":
            view_loss, norms = self.newton_step(t)
        else:
            view_loss, norms = self.gradient_step(t)
        dt = 1000.0 * (time.perf_counter() - start)
        self.step_index += 1
        if not np.isfinite(view_loss):
            self.dump()
            raise NumericalDegeneracyError(f"non-finite loss at step {self.step_index}")
        pl, ps, ss = self.probe() if probe else (float("nan"),) * 3
        return IterationReport(self.step_index, int(t), pl, ps, ss, dt, view_loss, norms)

    def dump(self):
        """Write the last step's local systems to ``config.dump_path``, if set."""
        if self.config.dump_path is not None and self.last_systems:
            dump_systems(self.config.dump_path, self.last_systems, self.step_index)

    def end_epoch(self):
        self.epoch += 1
        c = self.config
        self.barrier_weight = max(self.barrier_weight * c.barrier_decay, c.barrier_floor)


def image_schedule(n_views, seed, epoch):
    """Random view permutation for one epoch, reproducible from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n_views)


def run_training(config, scene, dataset, log_path=None, checkpoint_dir=None, secondary=None):
    """Train and return ``(scene, reports)``; ``reports[0]`` is the initial probe."""
    trainer = Trainer(config, scene, dataset, secondary)
    pl, ps, ss = trainer.probe()
    reports = [IterationReport(0, -1, pl, ps, ss, 0.0)]
    total = config.max_steps
    epoch = 0
    while (epoch < config.epochs) if total is None else (trainer.step_index < total):
        for t in image_schedule(len(dataset), config.seed, epoch):
            if total is not None and trainer.step_index >= total:
                break
            want_probe = (trainer.step_index + 1) % config.log_every == 0
            reports.append(trainer.train_step(int(t), probe=want_probe))
        else:
            trainer.end_epoch()
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir)
                path.mkdir(parents=True, exist_ok=True)
                trainer.scene.save(path / f"epoch_{epoch + 1:04d}.json")
        epoch += 1
    trainer.dump()
    if log_path is not None:
        write_log(log_path, reports)
    return trainer.scene, reports


CSV_COLUMNS = ("step", "image_id", "probe_loss", "psnr", "ssim", "dt_ms")


def write_log(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.step, r.image_id, repr(r.probe_loss), repr(r.psnr), repr(r.ssim),
                        f"{r.dt_ms:.3f}"])
