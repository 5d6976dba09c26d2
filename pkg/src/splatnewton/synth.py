"""Seeded synthetic fixtures: random kernels in the unit ball seen by cameras
placed on a sphere (or a ring) around the origin."""

from __future__ import annotations

import numpy as np

from .camera import Camera, look_at, perspective
from .dataset import Dataset
from .errors import InvalidInputError
from .raster import render_reference
from .scene import OPACITY_EPS, Scene
from .sh import C0

CAMERA_DISTANCE = 4.0
FOCAL_FACTOR = 1.6   # focal length in units of image width


def camera_positions(n_views, layout="sphere", distance=CAMERA_DISTANCE, tilt=0.35):
    """Camera centers around the origin.

    ``sphere`` spreads views with a Fibonacci lattice; ``ring`` places them
    evenly on a great circle tilted by ``tilt`` radians out of the xy-plane.
    """
    if n_views < 1:
        raise InvalidInputError("need at least one view")
    i = np.arange(n_views)
    if layout == "ring":
        phi = 2.0 * np.pi * i / n_views
        dirs = np.stack([np.cos(phi), np.sin(phi) * np.cos(tilt), np.sin(phi) * np.sin(tilt)], 1)
    elif layout == "sphere":
        z = 1.0 - 2.0 * (i + 0.5) / n_views
        z = 0.8 * z   # keep away from the poles, where the up vector degenerates
        rho = np.sqrt(1.0 - z * z)
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], 1)
    else:
        raise InvalidInputError(f"unknown camera layout {layout!r}")
    return distance * dirs


def make_cameras(n_views, resolution, layout="sphere", distance=CAMERA_DISTANCE):
    width = height = int(resolution)
    f = FOCAL_FACTOR * width
    P = perspective(f, f, width / 2.0, height / 2.0, width, height)
    return [Camera(look_at(c, np.zeros(3)), P, width, height)
            for c in camera_positions(n_views, layout, distance)]


def random_scene(rng, n_kernels, sh_degree=3, radius=0.8, scale_range=(0.05, 0.16),
                 background=(0.0, 0.0, 0.0)):
    """Random kernels inside a ball of ``radius``."""
    if n_kernels < 1:
        raise InvalidInputError("need at least one kernel")
    d = rng.normal(size=(n_kernels, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    positions = d * radius * rng.uniform(size=(n_kernels, 1)) ** (1.0 / 3.0)
    scales = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]),
                                size=(n_kernels, 3)))
    q = rng.normal(size=(n_kernels, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    opacities = rng.uniform(0.4, 0.95, size=n_kernels)
    sh = np.zeros((n_kernels, 3, 16))
    sh[:, :, 0] = (rng.uniform(0.1, 0.9, size=(n_kernels, 3)) - 0.5) / C0
    m = (sh_degree + 1) ** 2
    sh[:, :, 1:m] = rng.normal(scale=0.06, size=(n_kernels, 3, m - 1))
    return Scene(positions, scales, q, opacities, sh, np.asarray(background, float), sh_degree)


def perturb_scene(scene, rng, amount=1.0):
    """Jitter positions, scales (x U[0.5, 2] at ``amount`` 1), colors and opacities."""
    out = scene.copy()
    n = len(scene)
    if amount == 0.0 or n == 0:
        return out
    out.positions = out.positions + rng.normal(scale=0.04 * amount, size=(n, 3))
    out.scales = out.scales * np.exp(amount * rng.uniform(np.log(0.5), np.log(2.0), size=(n, 3)))
    out.sh[:, :, 0] += rng.normal(scale=0.1 * amount / C0, size=(n, 3))
    logit = np.log(out.opacities / (1.0 - out.opacities)) + rng.normal(scale=0.5 * amount, size=n)
    out.opacities = np.clip(1.0 / (1.0 + np.exp(-logit)), 0.05, 1.0 - 10 * OPACITY_EPS)
    return out


def synth_scene(seed, n_kernels, n_views, resolution, perturbation=1.0, layout="sphere",
                sh_degree=3, n_probe=4):
    """Return ``(ground_truth, initialization, dataset)``.

    Targets are rendered with the brute-force reference renderer.
    """
    rng = np.random.default_rng(seed)
    truth = random_scene(rng, n_kernels, sh_degree)
    cameras = make_cameras(n_views, resolution, layout)
    images = [render_reference(truth, cam).color for cam in cameras]
    probe = list(np.linspace(0, n_views - 1, min(n_probe, n_views)).round().astype(int))
    dataset = Dataset(cameras, images, sorted(set(int(p) for p in probe)))
    init = perturb_scene(truth, np.random.default_rng([seed, 1]), perturbation)
    return truth, init, dataset
