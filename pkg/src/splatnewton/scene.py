"""Trainable scene representation: Gaussian kernels and their 3D covariances.

Kernels are stored column-wise (one array per attribute) so that projection,
rasterization and the per-kernel solves can be vectorized with numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

SH_COEFFS = 16  # degree 3, per channel
OPACITY_EPS = 1e-4


def renormalize_quaternion(q):
    """Return ``q / |q|``; works on a single quaternion or an (..., 4) stack."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidInputError("cannot normalize a zero quaternion")
    return q / norm


def quaternion_to_rotation(q):
    """Rotation matrix of a (w, x, y, z) quaternion, batched over leading axes."""
    w, x, y, z = np.moveaxis(renormalize_quaternion(q), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_multiply(a, b):
    """Hamilton product ``a * b`` for (w, x, y, z) quaternions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quaternion_exp(omega):
    """Unit quaternion rotating by ``|omega|`` radians about ``omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def build_covariance_3d(q, s):
    """A = R S S^T R^T with S = diag(s)."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise InvalidInputError("scales must be strictly positive")
    R = quaternion_to_rotation(q)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianKernel:
    """One splat. ``sh`` is (3, 16), channel-major."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.opacity = float(self.opacity)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.size == 3:
            sh = np.concatenate([sh.reshape(3, 1), np.zeros((3, SH_COEFFS - 1))], axis=1)
        self.sh = sh.reshape(3, SH_COEFFS)


@dataclass
class Scene:
    """A set of Gaussian kernels plus background color.

    Attributes are (N, ...) arrays; ``sh`` is (N, 3, 16) and entries above
    ``sh_degree`` are kept at zero.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 3

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, 3, SH_COEFFS)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not 0 <= self.sh_degree <= 3:
            raise InvalidInputError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        self.sh[:, :, (self.sh_degree + 1) ** 2:] = 0.0

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0), sh_degree=3):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3, SH_COEFFS)), np.asarray(background, float), sh_degree)

    @classmethod
    def from_kernels(cls, kernels, background=(0.0, 0.0, 0.0), sh_degree=3):
        if not kernels:
            return cls.empty(background, sh_degree)
        return cls(
            positions=np.stack([k.position for k in kernels]),
            scales=np.stack([k.scale for k in kernels]),
            rotations=np.stack([k.rotation for k in kernels]),
            opacities=np.array([k.opacity for k in kernels]),
            sh=np.stack([k.sh for k in kernels]),
            background=np.asarray(background, dtype=np.float64),
            sh_degree=sh_degree,
        )

    def kernel(self, i) -> GaussianKernel:
        return GaussianKernel(self.positions[i].copy(), self.scales[i].copy(),
                              self.rotations[i].copy(), self.opacities[i], self.sh[i].copy())

    def kernels(self):
        return [self.kernel(i) for i in range(len(self))]

    def copy(self) -> Scene:
        return Scene(self.positions.copy(), self.scales.copy(), self.rotations.copy(),
                     self.opacities.copy(), self.sh.copy(), self.background.copy(),
                     self.sh_degree)

    def covariances(self):
        return build_covariance_3d(self.rotations, self.scales)

    def check_invariants(self, quat_tol=1e-9):
        """Raise ``InvalidInputError`` if any kernel violates its invariants."""
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1.0) > quat_tol):
            raise InvalidInputError(f"non-unit quaternion (max dev {np.max(np.abs(qn - 1)):.3e})")
        if np.any(self.scales <= 0.0):
            raise InvalidInputError("non-positive scale")
        if np.any(self.opacities <= OPACITY_EPS) or np.any(self.opacities >= 1 - OPACITY_EPS):
            raise InvalidInputError("opacity outside the interior band")
        if not np.all(np.isfinite(self.sh)):
            raise InvalidInputError("non-finite SH coefficients")

    # -- serialization -------------------------------------------------

    def to_dict(self):
        return {
            "background": self.background.tolist(),
            "sh_degree": int(self.sh_degree),
            "kernels": [
                {
                    "p": self.positions[i].tolist(),
                    "s": self.scales[i].tolist(),
                    "q": self.rotations[i].tolist(),
                    "sigma": float(self.opacities[i]),
                    "sh": self.sh[i].reshape(-1).tolist(),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d):
        kernels = d.get("kernels", [])
        background = d.get("background", [0.0, 0.0, 0.0])
        degree = int(d.get("sh_degree", 3))
        if not kernels:
            return cls.empty(background, degree)
        sh = []
        for k in kernels:
            coeffs = np.asarray(k["sh"], dtype=np.float64)
            if coeffs.size != 3 * SH_COEFFS:
                raise InvalidInputError(f"expected {3 * SH_COEFFS} SH scalars, got {coeffs.size}")
            sh.append(coeffs.reshape(3, SH_COEFFS))
        return cls(
            positions=[k["p"] for k in kernels],
            scales=[k["s"] for k in kernels],
            rotations=[k["q"] for k in kernels],
            opacities=[k["sigma"] for k in kernels],
            sh=np.stack(sh),
            background=background,
            sh_degree=degree,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))
