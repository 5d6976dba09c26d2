"""Real spherical-harmonics basis (degree <= 3) and view-dependent color.

Each basis function is a homogeneous polynomial in the view direction
``r = (x, y, z)`` times the usual real-SH normalization constant. Values,
gradients and Hessians are produced from one monomial table so they can not
drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import view_direction_derivatives
from .errors import InvalidInputError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

COLOR_OFFSET = 0.5

# (constant, {(ex, ey, ez): coefficient}) per basis function
_POLYS = [
    (C0, {(0, 0, 0): 1.0}),
    (-C1, {(0, 1, 0): 1.0}),
    (C1, {(0, 0, 1): 1.0}),
    (-C1, {(1, 0, 0): 1.0}),
    (C2[0], {(1, 1, 0): 1.0}),
    (C2[1], {(0, 1, 1): 1.0}),
    (C2[2], {(0, 0, 2): 2.0, (2, 0, 0): -1.0, (0, 2, 0): -1.0}),
    (C2[3], {(1, 0, 1): 1.0}),
    (C2[4], {(2, 0, 0): 1.0, (0, 2, 0): -1.0}),
    (C3[0], {(2, 1, 0): 3.0, (0, 3, 0): -1.0}),
    (C3[1], {(1, 1, 1): 1.0}),
    (C3[2], {(0, 1, 2): 4.0, (2, 1, 0): -1.0, (0, 3, 0): -1.0}),
    (C3[3], {(0, 0, 3): 2.0, (2, 0, 1): -3.0, (0, 2, 1): -3.0}),
    (C3[4], {(1, 0, 2): 4.0, (3, 0, 0): -1.0, (1, 2, 0): -1.0}),
    (C3[5], {(2, 0, 1): 1.0, (0, 2, 1): -1.0}),
    (C3[6], {(3, 0, 0): 1.0, (1, 2, 0): -3.0}),
]

# flattened monomial table: basis index, coefficient, exponents
_IDX = np.array([i for i, (_, m) in enumerate(_POLYS) for _ in m])
_COEF = np.array([c * v for c, m in _POLYS for v in m.values()])
_EXP = np.array([e for _, m in _POLYS for e in m], dtype=int)


@dataclass
class ShBasis:
    """Basis values (..., 16), jacobian (..., 16, 3), hessian (..., 16, 3, 3)."""

    values: np.ndarray
    jacobian: np.ndarray
    hessian: np.ndarray


def _powers(r, max_power=3):
    # P[..., axis, k] = r_axis ** k
    r = np.asarray(r, dtype=np.float64)
    return r[..., :, None] ** np.arange(max_power + 1)


def _monomials(P, exps):
    """Product over axes of r_axis ** exps[:, axis]; zero where an exponent is negative."""
    out = np.ones(P.shape[:-2] + (len(exps),))
    for axis in range(3):
        e = exps[:, axis]
        term = P[..., axis, :][..., np.clip(e, 0, None)]
        out = out * np.where(e >= 0, term, 0.0)
    return out


def sh_polynomials(r, degree=3, order=2):
    """Basis and derivatives for an arbitrary (not necessarily unit) ``r``.

    ``order`` limits the derivatives computed (0: values only).
    """
    P = _powers(r)
    lead = P.shape[:-2]
    n_used = (degree + 1) ** 2
    mask = (_IDX < n_used).astype(float)

    def scatter(vals):
        out = np.zeros(lead + (16,))
        np.add.at(np.moveaxis(out, -1, 0), _IDX, np.moveaxis(vals * mask, -1, 0))
        return out

    values = scatter(_COEF * _monomials(P, _EXP))
    if order == 0:
        return ShBasis(values, None, None)
    jac = np.zeros(lead + (16, 3))
    hess = np.zeros(lead + (16, 3, 3))
    for i in range(3):
        di = np.zeros(3, dtype=int)
        di[i] = 1
        jac[..., i] = scatter(_COEF * _EXP[:, i] * _monomials(P, _EXP - di))
        if order == 1:
            continue
        for j in range(3):
            dj = np.zeros(3, dtype=int)
            dj[j] = 1
            e = _EXP - di
            factor = _EXP[:, i] * np.where(e[:, j] > 0, e[:, j], 0)
            hess[..., i, j] = scatter(_COEF * factor * _monomials(P, e - dj))
    return ShBasis(values, jac, hess if order > 1 else None)


def eval_sh_basis(r, degree=3, order=2):
    r = np.asarray(r, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(r, axis=-1) - 1.0) > 1e-6):
        raise InvalidInputError("view direction must be a unit vector")
    if not 0 <= degree <= 3:
        raise InvalidInputError(f"SH degree must be in 0..3, got {degree}")
    return sh_polynomials(r, degree, order)


def eval_view_color(basis, sh_coeffs):
    """``max(0, Phi . c + 0.5)`` per channel; ``sh_coeffs`` is (..., 3, 16)."""
    values = basis.values if isinstance(basis, ShBasis) else basis
    raw = np.einsum("...k,...ck->...c", values, sh_coeffs) + COLOR_OFFSET
    return np.maximum(raw, 0.0)


def sh_color_and_derivs_wrt_position(camera, p, sh_coeffs, degree=3):
    """View color and its derivatives w.r.t. the kernel center.

    Returns (color (..., 3), dc/dp (..., 3, 3), d2c/dp2 (..., 3, 3, 3)). A
    channel clamped at zero has zero derivatives.
    """
    r, dr, d2r = view_direction_derivatives(camera, p)
    basis = sh_polynomials(r, degree)
    raw = np.einsum("...k,...ck->...c", basis.values, sh_coeffs) + COLOR_OFFSET
    active = (raw > 0.0).astype(float)
    # gradient / hessian of each channel w.r.t. r
    g_r = np.einsum("...ck,...ki->...ci", sh_coeffs, basis.jacobian)
    h_r = np.einsum("...ck,...kij->...cij", sh_coeffs, basis.hessian)
    dc = np.einsum("...ci,...ij->...cj", g_r, dr)
    d2c = (np.einsum("...ia,...cij,...jb->...cab", dr, h_r, dr)
           + np.einsum("...ci,...iab->...cab", g_r, d2r))
    color = np.maximum(raw, 0.0)
    return color, dc * active[..., None], d2c * active[..., None, None]


def sh_color_derivs_wrt_position(camera, p, sh_coeffs, degree=3):
    _, dc, d2c = sh_color_and_derivs_wrt_position(camera, p, sh_coeffs, degree)
    return dc, d2c
