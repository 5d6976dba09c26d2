"""Secondary targets: neighbouring views on a bounding sphere whose
(downsampled) losses are added to every per-kernel system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import LOWPASS
from .errors import DegenerateGeometryError, InvalidInputError

DOWNSAMPLE = 4


@dataclass
class CameraSphere:
    center: np.ndarray
    radius: float

    def direction(self, camera):
        """Unit direction from the sphere center to the camera's projection on it."""
        d = camera.camera_center - self.center
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise DegenerateGeometryError("camera sits at the sphere center")
        return d / n


def fit_bounding_sphere(scene, margin=0.05):
    if len(scene) == 0:
        raise InvalidInputError("cannot fit a sphere to an empty scene")
    center = scene.positions.mean(axis=0)
    radius = float(np.max(np.linalg.norm(scene.positions - center, axis=1))) * (1.0 + margin)
    if radius <= 0.0:
        radius = 1.0   # a single kernel (or coincident kernels)
    return CameraSphere(center, radius)


def spherical_distance(sphere, cam_a, cam_b):
    c = np.clip(np.dot(sphere.direction(cam_a), sphere.direction(cam_b)), -1.0, 1.0)
    return sphere.radius * float(np.arccos(c))


def knn_views(cameras, sphere, k):
    """Neighbour ids per view, nearest first; ties go to the lower view id."""
    n = len(cameras)
    k = max(0, min(k, n - 1))
    dirs = np.stack([sphere.direction(c) for c in cameras]) if n else np.zeros((0, 3))
    dist = sphere.radius * np.arccos(np.clip(dirs @ dirs.T, -1.0, 1.0))
    out = []
    for t in range(n):
        others = np.array([j for j in range(n) if j != t], dtype=int)
        order = np.lexsort((others, dist[t, others]))
        out.append(others[order[:k]])
    return out


def matched_lowpass(factor, lowpass=LOWPASS):
    """Screen-space filter variance (low-res pixels^2) under which a render at
    ``1/factor`` resolution approximates the box-downsampled full-res render:
    the full-res filter rescaled plus the variance of an f-tap box."""
    return (lowpass + (factor * factor - 1) / 12.0) / (factor * factor)


def box_downsample(image, factor):
    """Mean over ``factor x factor`` blocks; trailing rows/columns are cropped."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape[0] // factor, image.shape[1] // factor
    crop = np.asarray(image[:h * factor, :w * factor], dtype=np.float64)
    return crop.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


@dataclass
class SecondaryTargetSet:
    """Neighbour ids and downsampled targets/cameras for every view.

    ``lowpass`` is the screen-space filter to render the downsampled views with.
    """

    neighbors: list
    cameras: list
    images: list
    factor: int
    lowpass: float = LOWPASS

    @classmethod
    def build(cls, dataset, sphere, k, factor=DOWNSAMPLE, images=None):
        """``images`` overrides the box-downsampled dataset targets."""
        neighbors = knn_views(dataset.cameras, sphere, k)
        cameras = [c.scaled(factor) for c in dataset.cameras]
        if images is None:
            images = [box_downsample(img, factor) for img in dataset.images]
        return cls(neighbors, cameras, images, factor, matched_lowpass(factor))


@dataclass
class AccumulationStats:
    missing: int = 0


def accumulate_secondary_terms(terms_fn, scene, primary, secondaries, *args, stats=None,
                               **kwargs):
    """Sum the per-kernel terms of ``terms_fn`` over the primary view and every
    available secondary view; ``None`` entries count as missing captures.

    A secondary view rendered from an older snapshot is expanded about that
    snapshot (its ``scene`` attribute) rather than the current ``scene``.
    """
    total = terms_fn(scene, primary, *args, **kwargs)
    for view in secondaries:
        if view is None:
            if stats is not None:
                stats.missing += 1
            continue
        snapshot = getattr(view, "scene", None)
        total = total + terms_fn(scene if snapshot is None else snapshot, view, *args, **kwargs)
    return total
