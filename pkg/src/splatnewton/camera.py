"""Pinhole camera math: center projection, EWA covariance projection and
their analytic first/second derivatives with respect to the kernel center.

Conventions: ``h = P W [p, 1]``, pixel coordinate
``pi = (W_I/2 (h_x/h_w + 1), H_I/2 (h_y/h_w + 1))``; pixel ``(m, n)`` has its
center at ``(m + 0.5, n + 0.5)``. All functions broadcast over leading axes
of ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError

W_EPS = 1e-6
LOWPASS = 0.3


class BehindCameraError(DegenerateGeometryError):
    """The point has ``h_w <= W_EPS`` and is culled from the view."""


@dataclass(frozen=True, eq=False)
class Camera:
    view: np.ndarray
    proj: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "view", np.asarray(self.view, dtype=np.float64).reshape(4, 4))
        object.__setattr__(self, "proj", np.asarray(self.proj, dtype=np.float64).reshape(4, 4))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "full", self.proj @ self.view)

    @property
    def camera_center(self):
        return -np.linalg.solve(self.view[:3, :3], self.view[:3, 3])

    @property
    def rotation(self):
        """The 3x3 block of the view matrix."""
        return self.view[:3, :3]

    def scaled(self, factor: int) -> Camera:
        """Same pose and frustum at ``1/factor`` resolution."""
        return Camera(self.view, self.proj, self.width // factor, self.height // factor)

    def pixel_centers(self):
        """(H, W, 2) array of pixel-center coordinates."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    Camera frame: +z forward, +x right, +y down (image rows grow with y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    V = np.eye(4)
    V[:3, :3] = R
    V[:3, 3] = -R @ eye
    return V


def perspective(fx, fy, cx, cy, width, height, near=0.01, far=100.0):
    """Projection whose pixel mapping reduces to ``fx x/z + cx``, ``fy y/z + cy``."""
    P = np.zeros((4, 4))
    P[0, 0] = 2.0 * fx / width
    P[0, 2] = 2.0 * cx / width - 1.0
    P[1, 1] = 2.0 * fy / height
    P[1, 2] = 2.0 * cy / height - 1.0
    P[2, 2] = far / (far - near)
    P[2, 3] = -far * near / (far - near)
    P[3, 2] = 1.0
    return P


def orthographic(scale_x, scale_y):
    """Affine projection (h_w == 1); useful as a derivative test case."""
    P = np.eye(4)
    P[0, 0] = scale_x
    P[1, 1] = scale_y
    return P


def homogeneous(camera, p):
    p = np.asarray(p, dtype=np.float64)
    M = camera.full
    return p @ M[:, :3].T + M[:, 3]


def view_direction(camera, p):
    """Unit vector from the camera center to ``p``."""
    d = np.asarray(p, dtype=np.float64) - camera.camera_center
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateGeometryError("point coincides with the camera center")
    return d / n


def view_direction_derivatives(camera, p):
    """First and second derivatives of r(p) = (p - o)/|p - o|.

    Returns (r, dr/dp (..., 3, 3), d2r/dp2 (..., 3, 3, 3)).
    """
    d = np.asarray(p, dtype=np.float64) - camera.camera_center
    rho = np.linalg.norm(d, axis=-1)
    if np.any(rho < 1e-12):
        raise DegenerateGeometryError("point coincides with the camera center")
    r = d / rho[..., None]
    eye = np.eye(3)
    dr = (eye - r[..., :, None] * r[..., None, :]) / rho[..., None, None]
    rrr = r[..., :, None, None] * r[..., None, :, None] * r[..., None, None, :]
    sym = (eye[:, :, None] * r[..., None, None, :]
           + eye[:, None, :] * r[..., None, :, None]
           + eye[None, :, :] * r[..., :, None, None])
    d2r = (3.0 * rrr - sym) / rho[..., None, None, None] ** 2
    return r, dr, d2r


def _check_front(h):
    if np.any(h[..., 3] <= W_EPS):
        raise BehindCameraError("point is behind the camera (h_w <= eps)")


def project_center(camera, p):
    """Return (pi, h, depth). ``depth`` is camera-space z."""
    p = np.asarray(p, dtype=np.float64)
    h = homogeneous(camera, p)
    _check_front(h)
    pi = np.stack([
        0.5 * camera.width * (h[..., 0] / h[..., 3] + 1.0),
        0.5 * camera.height * (h[..., 1] / h[..., 3] + 1.0),
    ], axis=-1)
    depth = p @ camera.view[2, :3] + camera.view[2, 3]
    return pi, h, depth


def _quotient_terms(camera, h):
    M = camera.full[:, :3]
    half = np.array([0.5 * camera.width, 0.5 * camera.height])
    a = M[:2]          # rows feeding pi_x, pi_y
    b = M[3]           # row feeding h_w
    u = h[..., :2]
    w = h[..., 3]
    return half, a, b, u, w


def projection_derivatives(camera, p):
    """dpi/dp (..., 2, 3) and d2pi/dp2 (..., 2, 3, 3) by the quotient rule."""
    h = homogeneous(camera, p)
    _check_front(h)
    half, a, b, u, w = _quotient_terms(camera, h)
    w1 = w[..., None, None]
    jac = half[:, None] * (a / w1 - u[..., :, None] * b / w1 ** 2)
    ab = a[:, :, None] * b[None, None, :]
    sym = ab + np.swapaxes(ab, 1, 2)
    bb = np.outer(b, b)
    w2 = w[..., None, None, None]
    hess = half[:, None, None] * (-sym / w2 ** 2
                                  + 2.0 * u[..., :, None, None] * bb / w2 ** 3)
    return jac, hess


def projection_third_derivative(camera, p):
    """d3pi/dp3 (..., 2, 3, 3, 3), needed for the curvature of Sigma(p)."""
    h = homogeneous(camera, p)
    _check_front(h)
    half, a, b, u, w = _quotient_terms(camera, h)
    bb = np.outer(b, b)
    bbb = bb[:, :, None] * b
    abb = a[:, :, None, None] * bb[None, None]
    sym = abb + np.moveaxis(abb, 1, 2) + np.moveaxis(abb, 1, 3)
    w3 = w[..., None, None, None, None]
    return half[:, None, None, None] * (2.0 * sym / w3 ** 3
                                        - 6.0 * u[..., :, None, None, None] * bbb / w3 ** 4)


def project_covariance_2d(camera, p, cov3d, lowpass=LOWPASS):
    """EWA covariance ``J W3 A W3^T J^T + lowpass I``.

    ``J`` is the Jacobian of the pixel map w.r.t. camera-space coordinates,
    so ``J W3`` equals dpi/dp. Returns (Sigma, J).
    """
    jac, _ = projection_derivatives(camera, p)
    cov = jac @ np.asarray(cov3d) @ np.swapaxes(jac, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2)) + lowpass * np.eye(2)
    J = jac @ np.linalg.inv(camera.rotation)
    return cov, J


def cov2d_derivatives_wrt_position(camera, p, cov3d):
    """dSigma/dp (..., 2, 2, 3) and d2Sigma/dp2 (..., 2, 2, 3, 3)."""
    jac, hess = projection_derivatives(camera, p)
    third = projection_third_derivative(camera, p)
    A = np.asarray(cov3d)
    # X[a, j, l] = sum_i H[a, i, l] A[i, j]
    HA = np.einsum("...ail,...ij->...ajl", hess, A)
    d1 = np.einsum("...ajl,...bj->...abl", HA, jac)
    d1 = d1 + np.swapaxes(d1, -3, -2)
    TA = np.einsum("...ailm,...ij->...ajlm", third, A)
    d2 = np.einsum("...ajlm,...bj->...ablm", TA, jac)
    d2 = d2 + np.swapaxes(d2, -4, -3)
    cross = np.einsum("...ajl,...bjm->...ablm", HA, hess)
    d2 = d2 + cross + np.swapaxes(cross, -1, -2)
    # equal in exact arithmetic; averaging makes the (0,1)/(1,0) slices bitwise equal
    d2 = 0.5 * (d2 + np.swapaxes(d2, -4, -3))
    return d1, d2
