"""Per-kernel, per-attribute local Newton solves.

Every solve follows the same pattern: gather the forward-pass records of each
view, chain per-pixel loss derivatives through the pixel-color Jacobian of one
attribute group, sum per kernel, and solve the resulting tiny dense system
with a unit step:

    grad = sum_pix (dL/dc) dc/dy
    hess = sum_pix (dc/dy)^T (d2L/dc2) (dc/dy) + (dL/dc) . d2c/dy2

All kernels are solved from the same snapshot (a Jacobi sweep); batching over
kernels replaces an explicit worker pool.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .camera import (cov2d_derivatives_wrt_position, projection_derivatives,
                     view_direction)
from .loss import LossConfig, total_loss_derivs
from .raster import DEFAULT, gaussian_weight_derivatives, render
from .secondary import accumulate_secondary_terms
from .scene import OPACITY_EPS, quaternion_multiply, quaternion_to_rotation, renormalize_quaternion
from .sh import sh_color_and_derivs_wrt_position, sh_polynomials

MU_MIN = 1e-8
KAPPA_MAX = 1e12
ATTRIBUTES = ("position", "rotation", "scaling", "opacity", "color")
GEOMETRIC = frozenset({"position", "rotation", "scaling"})


@dataclass
class ViewState:
    """One rendered view with its capture and per-pixel loss derivatives.

    ``scene`` is the snapshot the view was rendered from; terms of a view are
    always assembled against its own snapshot.
    """

    camera: object
    target: np.ndarray
    image: object
    loss: float
    derivs: object
    scene: object = None

    @property
    def capture(self):
        return self.image.capture


def evaluate_view(scene, camera, target, loss_config=LossConfig(), options=DEFAULT, second=True):
    image = render(scene, camera, options, capture=True)
    loss, derivs = total_loss_derivs(image.color, target, loss_config, second)
    return ViewState(camera, target, image, loss, derivs, scene.copy())


@dataclass
class LocalNewtonSystem:
    """Batched local systems, one row per kernel.

    ``H`` is (N, n, n) after the PSD safeguard, ``g`` (N, n), ``delta`` (N, n)
    the step in the attribute's reduced coordinates.
    """

    attribute: str
    H: np.ndarray
    g: np.ndarray
    delta: np.ndarray
    accepted: np.ndarray

    def kernel(self, i):
        return LocalNewtonSystem(self.attribute, self.H[i], self.g[i], self.delta[i],
                                 self.accepted[i])


@dataclass
class Terms:
    """Per-kernel gradient with two Hessians from one or more views.

    ``gn`` is the Gauss-Newton part with the per-pixel loss curvature clamped
    at zero (PSD by construction); ``full`` adds the unclamped pixel curvature
    and the second derivatives of the pixel colors.
    """

    g: np.ndarray
    gn: np.ndarray
    full: np.ndarray

    def __add__(self, other):
        return Terms(self.g + other.g, self.gn + other.gn, self.full + other.full)


# -- helpers -----------------------------------------------------------------


def psd_safeguard(H, mu_min=MU_MIN):
    """Make symmetric ``H`` (..., n, n) satisfy ``H >= mu_min I``.

    n <= 2: eigenvalues below ``mu_min`` are replaced by ``mu_min``.
    Larger n: ridge shift by ``max(0, mu_min - lambda_min)``.
    """
    H = np.asarray(H, dtype=np.float64)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    n = H.shape[-1]
    lam, V = np.linalg.eigh(H)
    if n <= 2:
        lam = np.maximum(lam, mu_min)
        return (V * lam[..., None, :]) @ np.swapaxes(V, -1, -2)
    shift = np.maximum(mu_min - lam[..., 0], 0.0)
    return H + shift[..., None, None] * np.eye(n)


def _solve(H, g):
    return -np.linalg.solve(H, g[..., None])[..., 0]


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def position_basis(r):
    """Orthonormal (..., 3, 2) basis [u_x, u_y] of the plane perpendicular to ``r``.

    ``u_y`` is the world y-axis made orthogonal to ``r`` (z-axis when nearly
    parallel); ``u_x = r x u_y``.
    """
    r = np.asarray(r, dtype=np.float64)
    up = np.zeros(r.shape)
    near = np.abs(r[..., 1]) > 0.99
    up[..., 1] = np.where(near, 0.0, 1.0)
    up[..., 2] = np.where(near, 1.0, 0.0)
    uy = up - r * np.sum(r * up, axis=-1, keepdims=True)
    uy /= np.linalg.norm(uy, axis=-1, keepdims=True)
    ux = np.cross(r, uy)
    return np.stack([ux, uy], axis=-1)


def coupling_weights(cap, norms):
    """Per-record factor ``kappa = sum_j |J_j| / |J_k|`` over the kernels sharing
    the record's pixel.

    Scaling each record's Gauss-Newton contribution by ``kappa`` turns the
    per-pixel quadratic ``(sum_k J_k d_k)^2`` into the separable upper bound
    ``sum_k (J_k d_k)^2 / pi_k`` with ``pi_k = |J_k| / sum_j |J_j|``, so that
    simultaneous per-kernel steps cannot overshoot a shared pixel.
    """
    norms = np.asarray(norms, dtype=np.float64)
    total = np.bincount(cap.pix, weights=norms, minlength=cap.width * cap.height)[cap.pix]
    # kappa is capped at KAPPA_MAX: a record that small carries a negligible share of
    # its pixel, and the cap keeps kappa * |J_k|^2 finite for subnormal |J_k|
    denom = np.maximum(norms, total / KAPPA_MAX)
    return np.where(total > 0.0, total / np.where(total > 0.0, denom, 1.0), 1.0)


class _Records:
    """Per-record quantities of one view, shared by all attribute passes.

    Expensive pieces (second derivatives of G and their per-kernel sums) are
    computed on first use.
    """

    def __init__(self, opacities, view):
        cap = view.capture
        self.cap = cap
        self.kid = cap.kid
        self.sigma = opacities[cap.kid]
        self.aT = cap.alpha * cap.T
        self.gl = view.derivs.grad.reshape(-1, 3)[cap.pix]
        self.hl = None
        if view.derivs.hess is not None:
            hl = view.derivs.hess.reshape(-1, 3)[cap.pix]
            self.hl = np.maximum(hl, 0.0)
            # the few records whose pixel curvature is negative
            self.neg = np.flatnonzero(np.any(hl < 0.0, axis=1))
            self.hl_neg = np.minimum(hl[self.neg], 0.0)
        self.dcdG = self.sigma[:, None] * cap.dcda
        # first-order weight of d2G/dy2 in the pixel loss
        self.w = np.einsum("rc,rc->r", self.gl, self.dcdG)
        self._gw = None

    def ksum(self, values):
        return self.cap.kernel_sum(values)

    def weight_derivs(self, second=True):
        if self._gw is None or (second and self._gw.d2_cov is None):
            self._gw = gaussian_weight_derivatives(self.cap.projection.conic[self.kid],
                                                   self.cap.d, self.cap.G, second=second)
        return self._gw

    @cached_property
    def curvature_sums(self):
        """Per-kernel sums of ``w`` times each derivative of G."""
        gw = self.weight_derivs()
        w = self.w
        return {
            "pi": self.ksum(w[:, None] * gw.d_pi),
            "pipi": self.ksum(w[:, None, None] * gw.d2_pi),
            "cov": self.ksum(w[:, None, None] * gw.d_cov),
            "covcov": self.ksum(w[:, None, None, None, None] * gw.d2_cov),
            "picov": self.ksum(w[:, None, None, None] * gw.d_pi_cov),
        }

    def gauss_newton(self, J, coupling=True):
        """(clamped GN, unclamped GN) per kernel for pixel-color Jacobians J (R, 3, m)."""
        hl = self.hl
        hl_neg = self.hl_neg
        if coupling:
            kappa = coupling_weights(self.cap, np.sqrt(np.einsum("rcm,rcm->r", J, J)))
            hl = hl * kappa[:, None]
            hl_neg = hl_neg * kappa[self.neg, None]
        gn = self.ksum(np.einsum("rc,rci,rcj->rij", hl, J, J))
        Jn = J[self.neg]
        neg = np.einsum("rc,rci,rcj->rij", hl_neg, Jn, Jn)
        out = np.zeros_like(gn)
        np.add.at(out, self.kid[self.neg], neg)
        return gn, gn + out


def _records(scene, view):
    """Records of ``view``, cached on the view when it carries its snapshot."""
    if view.scene is None:
        return _Records(scene.opacities, view)
    rec = getattr(view, "_records", None)
    if rec is None:
        rec = _Records(view.scene.opacities, view)
        view._records = rec
    return rec


def _visible(view):
    return np.flatnonzero(view.capture.projection.visible)


# -- per-view terms ----------------------------------------------------------


def _zero_terms(n, m):
    z = np.zeros((n, m, m))
    return Terms(np.zeros((n, m)), z, z.copy())


def position_terms(scene, view, coupling=True):
    """Full 3D position gradient (N, 3) and Hessians (N, 3, 3) from one view."""
    n = len(scene)
    if len(view.capture) == 0:
        return _zero_terms(n, 3)
    vis = _visible(view)
    cam = view.camera
    p = scene.positions[vis]
    A = scene.covariances()[vis]
    jac = np.zeros((n, 2, 3))
    hpi = np.zeros((n, 2, 3, 3))
    dcov = np.zeros((n, 2, 2, 3))
    d2cov = np.zeros((n, 2, 2, 3, 3))
    dcol = np.zeros((n, 3, 3))
    d2col = np.zeros((n, 3, 3, 3))
    jac[vis], hpi[vis] = projection_derivatives(cam, p)
    dcov[vis], d2cov[vis] = cov2d_derivatives_wrt_position(cam, p, A)
    _, dcol[vis], d2col[vis] = sh_color_and_derivs_wrt_position(cam, p, scene.sh[vis],
                                                                 scene.sh_degree)

    rec = _records(scene, view)
    k = rec.kid
    gw = rec.weight_derivs()
    dGdp = (np.einsum("ri,rij->rj", gw.d_pi, jac[k])
            + np.einsum("rab,rabj->rj", gw.d_cov, dcov[k]))
    dcdp = rec.dcdG[:, :, None] * dGdp[:, None, :] + rec.aT[:, None, None] * dcol[k]
    g = rec.ksum(np.einsum("rc,rci->ri", rec.gl, dcdp))
    gn, H = rec.gauss_newton(dcdp, coupling)

    A = rec.curvature_sums
    curv = (np.einsum("nai,nab,nbj->nij", jac, A["pipi"], jac)
            + np.einsum("na,naij->nij", A["pi"], hpi)
            + np.einsum("nabi,nabcd,ncdj->nij", dcov, A["covcov"], dcov)
            + np.einsum("nab,nabij->nij", A["cov"], d2cov))
    cross = np.einsum("nai,nabc,nbcj->nij", jac, A["picov"], dcov)
    curv += cross + np.swapaxes(cross, 1, 2)
    # view-dependent color path: a T d2c/dp2 and the G x color cross terms
    curv += np.einsum("nc,ncij->nij", rec.ksum(rec.gl * rec.aT[:, None]), d2col)
    B = rec.ksum((rec.gl * (rec.sigma * rec.cap.T)[:, None])[:, :, None] * dGdp[:, None, :])
    colx = np.einsum("nci,ncj->nij", dcol, B)
    curv += colx + np.swapaxes(colx, 1, 2)
    return Terms(g, gn, H + curv)


def rotation_generators(scene, axes, view):
    """dSigma/dtheta and d2Sigma/dtheta2 (N, 2, 2) for q <- (cos t, sin t axis) q."""
    n = len(scene)
    d1 = np.zeros((n, 2, 2))
    d2 = np.zeros((n, 2, 2))
    vis = _visible(view)
    if len(vis) == 0:
        return d1, d2
    A = scene.covariances()[vis]
    K = skew(axes[vis])
    KA = K @ A
    AK = A @ K
    dA = 2.0 * (KA - AK)
    d2A = 4.0 * (K @ KA - 2.0 * KA @ K + AK @ K)
    jac, _ = projection_derivatives(view.camera, scene.positions[vis])
    jt = np.swapaxes(jac, 1, 2)
    d1[vis] = jac @ dA @ jt
    d2[vis] = jac @ d2A @ jt
    return d1, d2


def _cov_param_terms(rec, dcov, d2cov=None, coupling=True):
    """Gradient/Hessian for a parameter vector t entering only through Sigma.

    ``dcov`` is (N, m, 2, 2) with dSigma/dt_i; ``d2cov`` (N, m, m, 2, 2) or None.
    Returns ``Terms`` with g (N, m) and Hessians (N, m, m).
    """
    gw = rec.weight_derivs()
    dGdt = np.einsum("rab,rmab->rm", gw.d_cov, dcov[rec.kid])
    J = rec.dcdG[:, :, None] * dGdt[:, None, :]
    g = rec.ksum(np.einsum("rc,rcm->rm", rec.gl, J))
    gn, H = rec.gauss_newton(J, coupling)
    A = rec.curvature_sums
    H += np.einsum("niab,nabcd,njcd->nij", dcov, A["covcov"], dcov)
    if d2cov is not None:
        H += np.einsum("nab,nijab->nij", A["cov"], d2cov)
    return Terms(g, gn, H)


def rotation_terms(scene, view, axes, coupling=True):
    """Terms for the scalar angle theta of ``(cos t, sin t axis) q``, as 1-vectors."""
    if len(view.capture) == 0:
        return _zero_terms(len(scene), 1)
    d1, d2 = rotation_generators(scene, axes, view)
    return _cov_param_terms(_records(scene, view), d1[:, None], d2[:, None, None], coupling)


@dataclass
class EigenFrame:
    """Eigen-structure of the projected covariance of every kernel in one view.

    ``lam`` (N, 2) ascending, ``vecs`` (N, 2, 2) with eigenvectors as columns,
    ``T`` (N, 2, 3) = d lambda / d s, ``d2`` (N, 2, 3, 3) = d2 lambda / d s2.
    """

    lam: np.ndarray
    vecs: np.ndarray
    T: np.ndarray
    d2: np.ndarray


def eigen_frame(scene, view, gap_tol=1e-9):
    n = len(scene)
    proj = view.capture.projection
    lam, vecs = np.linalg.eigh(proj.cov2d)
    T = np.zeros((n, 2, 3))
    d2 = np.zeros((n, 2, 3, 3))
    vis = _visible(view)
    if len(vis):
        jac, _ = projection_derivatives(view.camera, scene.positions[vis])
        M = jac @ quaternion_to_rotation(scene.rotations[vis])      # columns m_j
        s = scene.scales[vis]
        proj_vm = np.einsum("nai,naj->nij", vecs[vis], M)          # [i, j] = v_i . m_j
        T[vis] = 2.0 * s[:, None, :] * proj_vm ** 2
        d2v = np.zeros((len(vis), 2, 3, 3))
        idx = np.arange(3)
        d2v[:, :, idx, idx] = 2.0 * proj_vm ** 2
        gap = lam[vis, 1] - lam[vis, 0]
        ok = gap > gap_tol * np.maximum(lam[vis, 1], 1.0)
        # v_k^T (dSigma/ds_j) v_i for the other eigenvector k
        off = 2.0 * s * proj_vm[:, 0, :] * proj_vm[:, 1, :]
        outer = off[:, :, None] * off[:, None, :]
        safe_gap = np.where(ok, gap, 1.0)[:, None, None]
        d2v[:, 0] += np.where(ok[:, None, None], 2.0 * outer / -safe_gap, 0.0)
        d2v[:, 1] += np.where(ok[:, None, None], 2.0 * outer / safe_gap, 0.0)
        d2[vis] = d2v
    return EigenFrame(lam, vecs, T, d2)


def scaling_lambda_terms(scene, view, frame=None, coupling=True):
    """Gradient (N, 2) and Hessian (N, 2, 2) w.r.t. the eigenvalues of Sigma,
    eigenvectors held fixed."""
    if len(view.capture) == 0:
        return _zero_terms(len(scene), 2)
    if frame is None:
        frame = eigen_frame(scene, view)
    v = frame.vecs
    dcov = np.einsum("nai,nbi->niab", v, v)   # v_i v_i^T
    return _cov_param_terms(_records(scene, view), dcov, None, coupling)


def scale_generators(scene, view):
    """dSigma/ds_j (N, 3, 2, 2) and d2Sigma/ds_j ds_l (N, 3, 3, 2, 2)."""
    n = len(scene)
    d1 = np.zeros((n, 3, 2, 2))
    d2 = np.zeros((n, 3, 3, 2, 2))
    vis = _visible(view)
    if len(vis):
        jac, _ = projection_derivatives(view.camera, scene.positions[vis])
        M = jac @ quaternion_to_rotation(scene.rotations[vis])
        mm = np.einsum("naj,nbj->njab", M, M)       # m_j m_j^T
        d1[vis] = 2.0 * scene.scales[vis][:, :, None, None] * mm
        idx = np.arange(3)
        d2[vis[:, None], idx, idx] = 2.0 * mm
    return d1, d2


def scaling_terms(scene, view, coupling=True):
    """Scale-space gradient (N, 3) and Hessian (N, 3, 3) from one view."""
    if len(view.capture) == 0:
        return _zero_terms(len(scene), 3)
    d1, d2 = scale_generators(scene, view)
    return _cov_param_terms(_records(scene, view), d1, d2, coupling)


def opacity_terms(scene, view, coupling=True):
    """Data-term terms for the opacity, as 1-vectors (the barrier is added by the solve)."""
    n = len(scene)
    if len(view.capture) == 0:
        return _zero_terms(n, 1)
    cap = view.capture
    grad = view.derivs.grad.reshape(-1, 3)[cap.pix]
    hess = view.derivs.hess.reshape(-1, 3)[cap.pix]
    dc = cap.G[:, None] * cap.dcda
    g = cap.kernel_sum(np.einsum("rc,rc->r", grad, dc))
    if coupling:
        hess = hess * coupling_weights(cap, np.linalg.norm(dc, axis=1))[:, None]
    full = cap.kernel_sum(np.einsum("rc,rc->r", hess, dc * dc))
    gn = cap.kernel_sum(np.einsum("rc,rc->r", np.maximum(hess, 0.0), dc * dc))
    return Terms(g[:, None], gn[:, None, None], full[:, None, None])


def color_terms(scene, view, second=True, coupling=True):
    """Per-channel SH gradient (N, 3, 16) and Hessians (N, 3, 16, 16).

    Pixel colors are linear in the coefficients, so the Hessian is pure
    Gauss-Newton; ``second=False`` leaves both Hessians as None.
    """
    n = len(scene)
    if len(view.capture) == 0:
        z = np.zeros((n, 3, 16, 16))
        return Terms(np.zeros((n, 3, 16)), z, z.copy())
    cap = view.capture
    vis = _visible(view)
    basis = np.zeros((n, 16))
    basis[vis] = sh_polynomials(cap.projection.view_dirs[vis], scene.sh_degree, order=0).values
    raw = np.einsum("nk,nck->nc", basis, scene.sh) + 0.5
    active = (raw > 0.0).astype(float)
    aT = cap.alpha * cap.T
    grad = view.derivs.grad.reshape(-1, 3)[cap.pix]
    gs = cap.kernel_sum(grad * aT[:, None]) * active
    g = gs[:, :, None] * basis[:, None, :]
    if not second:
        return Terms(g, None, None)
    hess = view.derivs.hess.reshape(-1, 3)[cap.pix]
    if coupling:
        norms = aT * np.linalg.norm(basis, axis=1)[cap.kid]
        hess = hess * coupling_weights(cap, norms)[:, None]
    w2 = (aT * aT)[:, None]
    bb = (basis[:, :, None] * basis[:, None, :])[:, None]
    full = (cap.kernel_sum(hess * w2) * active)[:, :, None, None] * bb
    gn = (cap.kernel_sum(np.maximum(hess, 0.0) * w2) * active)[:, :, None, None] * bb
    return Terms(g, gn, full)


def attribute_gradients(scene, view):
    """First derivatives of one view's loss for every attribute group.

    Rotation is the tangent ``omega`` of ``q <- exp(omega) q`` (rotation by
    ``|omega|`` about ``omega``). Only ``view.derivs.grad`` is needed.
    Returns a dict of arrays keyed by attribute.
    """
    n = len(scene)
    out = {"position": np.zeros((n, 3)), "rotation": np.zeros((n, 3)),
           "scaling": np.zeros((n, 3)), "opacity": np.zeros(n),
           "color": np.zeros((n, 3, 16))}
    cap = view.capture
    if len(cap) == 0:
        return out
    rec = _records(scene, view)
    gw = rec.weight_derivs(second=False)
    vis = _visible(view)
    w = rec.w
    g_pi = rec.ksum(w[:, None] * gw.d_pi)[vis]
    g_cov = rec.ksum(w[:, None, None] * gw.d_cov)[vis]
    cam = view.camera
    p = scene.positions[vis]
    A = scene.covariances()[vis]
    jac, _ = projection_derivatives(cam, p)
    dcov, _ = cov2d_derivatives_wrt_position(cam, p, A)
    _, dcol, _ = sh_color_and_derivs_wrt_position(cam, p, scene.sh[vis], scene.sh_degree)
    gl_aT = rec.ksum(rec.gl * rec.aT[:, None])[vis]
    out["position"][vis] = (np.einsum("na,nai->ni", g_pi, jac)
                            + np.einsum("nab,nabi->ni", g_cov, dcov)
                            + np.einsum("nc,nci->ni", gl_aT, dcol))
    # Sigma-space gradient pulled back to 3D: dL/dA = J^T g_cov J
    g_A = np.swapaxes(jac, 1, 2) @ g_cov @ jac
    K = skew(np.eye(3))                                   # generators e_i x
    KA = np.einsum("iab,nbc->niac", K, A)
    dA = KA + np.swapaxes(KA, 2, 3)                       # K A - A K, as (K A)^T = -A K
    out["rotation"][vis] = np.einsum("nab,niab->ni", g_A, dA)
    M = quaternion_to_rotation(scene.rotations[vis])
    out["scaling"][vis] = 2.0 * scene.scales[vis] * np.einsum("naj,nab,nbj->nj", M, g_A, M)
    out["opacity"] = cap.kernel_sum(np.einsum("rc,rc->r", rec.gl, cap.G[:, None] * cap.dcda))
    out["color"] = color_terms(scene, view, second=False).g
    return out


# -- opacity barrier -----------------------------------------------------------


@dataclass
class OpacityBarrier:
    """``-alpha (ln sigma + ln(1 - sigma))`` keeping opacities inside (0, 1).

    With ``centered=True`` the barrier's gradient at the current opacity is
    subtracted (a Bregman-style proximal barrier): the curvature and the
    blow-up at the bounds are kept, but an exact fit is not pulled toward 0.5.
    """

    weight: float = 1e-4
    centered: bool = True

    def value(self, sigma):
        return -self.weight * (np.log(sigma) + np.log1p(-sigma))

    def grad(self, sigma):
        return -self.weight * (1.0 / sigma - 1.0 / (1.0 - sigma))

    def hess(self, sigma):
        return self.weight * (1.0 / sigma ** 2 + 1.0 / (1.0 - sigma) ** 2)


# -- solves --------------------------------------------------------------------


@dataclass
class SolveConfig:
    """``hessian``: "clipped" adds the positive part of the residual curvature
    (full minus Gauss-Newton) to the Gauss-Newton part; "auto" uses the full
    Hessian where it is positive definite and the Gauss-Newton part elsewhere;
    "full" and "gauss_newton" force one.
    ``coupling`` enables the shared-pixel majorizer (see ``coupling_weights``)."""

    mu_min: float = MU_MIN
    hessian: str = "clipped"
    coupling: bool = True
    position_cap: float | None = 3.0   # multiples of max(s)
    rotation_cap: float | None = 0.5   # radians of theta
    max_halvings: int = 8
    barrier: OpacityBarrier = None

    def __post_init__(self):
        if self.barrier is None:
            self.barrier = OpacityBarrier()
        if self.hessian not in ("auto", "full", "gauss_newton", "clipped"):
            raise ValueError(f"unknown hessian policy {self.hessian!r}")


def select_hessian(gn, full, policy="clipped", mu_min=MU_MIN):
    """Pick the per-kernel Hessian (..., m, m) according to ``policy``, then
    apply the PSD safeguard."""
    if policy == "full":
        H = full
    elif policy == "gauss_newton":
        H = gn
    elif policy == "clipped":
        R = 0.5 * (full - gn + np.swapaxes(full - gn, -1, -2))
        lam, V = np.linalg.eigh(R)
        H = gn + (V * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
    else:
        pd = np.linalg.eigvalsh(0.5 * (full + np.swapaxes(full, -1, -2)))[..., 0] > mu_min
        H = np.where(pd[..., None, None], full, gn)
    return psd_safeguard(H, mu_min)


def _newton_delta(H, g):
    d = _solve(H, g)
    d[np.all(g == 0.0, axis=-1)] = 0.0
    return d


def solve_position(scene, primary, secondaries=(), config=SolveConfig()):
    """Planar position update in the plane perpendicular to the primary view ray.

    Returns (system, delta_p (N, 3)).
    """
    t = accumulate_secondary_terms(position_terms, scene, primary, secondaries,
                                   coupling=config.coupling)
    U = position_basis(view_direction(primary.camera, scene.positions))
    g = np.einsum("nia,ni->na", U, t.g)
    gn = np.einsum("nia,nij,njb->nab", U, t.gn, U)
    full = np.einsum("nia,nij,njb->nab", U, t.full, U)
    H = select_hessian(gn, full, config.hessian, config.mu_min)
    dv = _newton_delta(H, g)
    if config.position_cap is not None:
        cap = config.position_cap * scene.scales.max(axis=1)
        norm = np.linalg.norm(dv, axis=1)
        dv *= np.minimum(1.0, cap / np.maximum(norm, 1e-300))[:, None]
    dp = np.einsum("nia,na->ni", U, dv)
    return LocalNewtonSystem("position", H, g, dv, np.ones(len(scene), bool)), dp


def solve_rotation(scene, primary, secondaries=(), config=SolveConfig()):
    """Rotation about the primary view direction. Returns (system, new quaternions)."""
    axes = view_direction(primary.camera, scene.positions)
    t = accumulate_secondary_terms(rotation_terms, scene, primary, secondaries, axes,
                                   coupling=config.coupling)
    H = select_hessian(t.gn, t.full, config.hessian, config.mu_min)
    theta = _newton_delta(H, t.g)[:, 0]
    if config.rotation_cap is not None:
        theta = np.clip(theta, -config.rotation_cap, config.rotation_cap)
    dq = np.concatenate([np.cos(theta)[:, None], np.sin(theta)[:, None] * axes], axis=1)
    q = renormalize_quaternion(quaternion_multiply(dq, scene.rotations))
    system = LocalNewtonSystem("rotation", H, t.g, theta[:, None], np.ones(len(scene), bool))
    return system, q


def scaling_projector(frame):
    """P (N, 2, 3) = (T T^T)^+ T: ``P g_s`` maps an s-space gradient into the
    eigenvalue plane and ``P^T dlambda`` is the minimum-norm scale change."""
    T = frame.T
    return np.linalg.pinv(T @ np.swapaxes(T, 1, 2), rcond=1e-12) @ T


def solve_scaling(scene, primary, secondaries=(), config=SolveConfig()):
    """Eigenvalue-space scaling update. Returns (system, new scales)."""
    t = accumulate_secondary_terms(scaling_terms, scene, primary, secondaries,
                                   coupling=config.coupling)
    P = scaling_projector(eigen_frame(scene, primary))
    g = np.einsum("nij,nj->ni", P, t.g)
    gn = np.einsum("nia,nab,njb->nij", P, t.gn, P)
    full = np.einsum("nia,nab,njb->nij", P, t.full, P)
    H = select_hessian(gn, full, config.hessian, config.mu_min)
    dlam = _newton_delta(H, g)
    ds = np.einsum("nij,ni->nj", P, dlam)
    s = scene.scales
    step = np.ones(len(scene))
    for _ in range(config.max_halvings):
        bad = np.any(s + step[:, None] * ds <= 0.0, axis=1)
        if not bad.any():
            break
        step[bad] *= 0.5
    accepted = ~np.any(s + step[:, None] * ds <= 0.0, axis=1)
    step[~accepted] = 0.0
    new_s = s + step[:, None] * ds
    system = LocalNewtonSystem("scaling", H, g, dlam * step[:, None], accepted)
    return system, new_s


def solve_opacity(scene, primary, secondaries=(), config=SolveConfig()):
    t = accumulate_secondary_terms(opacity_terms, scene, primary, secondaries,
                                   coupling=config.coupling)
    sigma = scene.opacities
    barrier = config.barrier
    bg = np.zeros_like(sigma) if barrier.centered else barrier.grad(sigma)
    bh = barrier.hess(sigma)[:, None, None]
    g = t.g + bg[:, None]
    H = select_hessian(t.gn + bh, t.full + bh, config.hessian, config.mu_min)
    d = _newton_delta(H, g)[:, 0]
    new = np.clip(sigma + d, OPACITY_EPS * 1.0001, 1.0 - OPACITY_EPS * 1.0001)
    system = LocalNewtonSystem("opacity", H, g, (new - sigma)[:, None],
                               np.ones(len(scene), bool))
    return system, new


def solve_color(scene, primary, secondaries=(), config=SolveConfig()):
    t = accumulate_secondary_terms(color_terms, scene, primary, secondaries,
                                   coupling=config.coupling)
    m = (scene.sh_degree + 1) ** 2
    g = t.g[:, :, :m]
    H = select_hessian(t.gn[:, :, :m, :m], t.full[:, :, :m, :m], config.hessian, config.mu_min)
    d = _newton_delta(H, g)
    new = scene.sh.copy()
    new[:, :, :m] += d
    system = LocalNewtonSystem("color", H, g.reshape(len(scene), -1),
                               d.reshape(len(scene), -1), np.ones(len(scene), bool))
    return system, new


SOLVERS = {
    "position": solve_position,
    "rotation": solve_rotation,
    "scaling": solve_scaling,
    "opacity": solve_opacity,
    "color": solve_color,
}


def apply_update(scene, attribute, update):
    """Commit a solver's result to ``scene`` in place."""
    if attribute == "position":
        scene.positions = scene.positions + update
    elif attribute == "rotation":
        scene.rotations = renormalize_quaternion(update)
    elif attribute == "scaling":
        scene.scales = update
    elif attribute == "opacity":
        scene.opacities = update
    elif attribute == "color":
        scene.sh = update
    else:
        raise ValueError(f"unknown attribute {attribute!r}")


DUMP_COLUMNS = ("step", "attribute", "kernel", "block", "row", "col", "hessian", "gradient",
                "delta")


def dump_systems(path, systems, step=0, append=False):
    """Write per-kernel local systems as CSV, one row per Hessian entry.

    ``block`` is the color channel for color systems (their Hessian is
    block diagonal over channels) and 0 otherwise.
    """
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(DUMP_COLUMNS)
        for system in systems:
            H = np.asarray(system.H)
            n = len(H)
            blocks = H.reshape(n, -1, H.shape[-2], H.shape[-1])
            m = blocks.shape[-1]
            g = np.asarray(system.g).reshape(n, blocks.shape[1], m)
            d = np.asarray(system.delta).reshape(n, blocks.shape[1], m)
            for k in range(n):
                for b in range(blocks.shape[1]):
                    for i in range(m):
                        for j in range(m):
                            w.writerow([step, system.attribute, k, b, i, j,
                                        repr(float(blocks[k, b, i, j])),
                                        repr(float(g[k, b, i])), repr(float(d[k, b, i]))])
