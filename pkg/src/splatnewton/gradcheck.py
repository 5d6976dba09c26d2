"""Finite-difference verification of every analytic derivative in the package.

Each quantity is compared against central differences with a step of
``1e-4`` times a characteristic scale of the perturbed variable. When the
plain central difference misses the tolerance, a Richardson-extrapolated
estimate (steps h and h/2) is tried before reporting a failure.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam_mod
from . import loss as loss_mod
from . import newton as nw
from . import raster
from . import sh as sh_mod
from .loss import LossConfig
from .scene import quaternion_exp, quaternion_multiply

REL_STEP = 1e-4
ABS_FLOOR = 1e-12


@dataclass
class QuantityCheck:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tolerance)


@dataclass
class DerivativeReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c.name for c in self.checks if not c.passed]

    def max_error(self, prefix=""):
        errs = [c.max_rel_error for c in self.checks if c.name.startswith(prefix)]
        return max(errs) if errs else 0.0

    def merge(self, other):
        """Combine per-quantity maxima of two reports (e.g. over several scenes)."""
        by_name = {c.name: c for c in self.checks}
        for c in other.checks:
            old = by_name.get(c.name)
            if old is None or c.max_rel_error > old.max_rel_error:
                by_name[c.name] = c
        return DerivativeReport(list(by_name.values()))

    def to_dict(self):
        return {"passed": self.passed, "failures": self.failures,
                "quantities": {c.name: {"max_rel_error": c.max_rel_error,
                                        "tolerance": c.tolerance, "passed": c.passed}
                               for c in self.checks}}


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))


def central_difference(f, h):
    """Derivative of ``f(t)`` at ``t = 0``."""
    return (np.asarray(f(h)) - np.asarray(f(-h))) / (2.0 * h)


def richardson_difference(f, h):
    return (4.0 * central_difference(f, 0.5 * h) - central_difference(f, h)) / 3.0


def second_difference(f, h):
    """Second derivative of a scalar ``f(t)`` at ``t = 0``."""
    return (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h)


class _Checker:
    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.errors = {}

    def add(self, name, error, tolerance=None):
        tol = self.tolerance if tolerance is None else tolerance
        old = self.errors.get(name, (0.0, tol))[0]
        self.errors[name] = (max(old, error), tol)

    def directional(self, name, analytic, f, h, tolerance=None, second=False):
        """Compare ``analytic`` with the derivative of ``f`` along one direction.

        ``second`` switches to the second difference of a scalar ``f``.
        """
        tol = self.tolerance if tolerance is None else tolerance
        if second:
            err = relative_error(analytic, second_difference(f, h))
            if err > tol:
                rich = (4.0 * second_difference(f, 0.5 * h) - second_difference(f, h)) / 3.0
                err = min(err, relative_error(analytic, rich))
        else:
            err = relative_error(analytic, central_difference(f, h))
            if err > tol:
                err = min(err, relative_error(analytic, richardson_difference(f, h)))
        self.add(name, err, tol)

    def columns(self, name, analytic, f, x0, h, tolerance=None):
        """Compare the Jacobian ``analytic[..., j]`` column by column with
        differences of ``f(x)`` along each coordinate of ``x0``."""
        x0 = np.asarray(x0, dtype=np.float64)
        for j in range(x0.size):
            e = np.zeros(x0.size)
            e[j] = 1.0
            e = e.reshape(x0.shape)
            self.directional(name, analytic[..., j], lambda t: f(x0 + t * e), h, tolerance)

    def report(self):
        return DerivativeReport([QuantityCheck(n, e, t) for n, (e, t) in self.errors.items()])


def _sample(rng, candidates, n):
    candidates = np.asarray(candidates)
    if len(candidates) <= n:
        return candidates
    return np.sort(rng.choice(candidates, size=n, replace=False))


def _sym_unit(i, j):
    E = np.zeros((2, 2))
    E[i, j] += 0.5
    E[j, i] += 0.5
    return E


# -- per-module checks ---------------------------------------------------------


def _check_camera(chk, camera, points):
    for p in points:
        scale = REL_STEP * max(1.0, float(np.linalg.norm(p - camera.camera_center)))
        jac, hess = cam_mod.projection_derivatives(camera, p)
        third = cam_mod.projection_third_derivative(camera, p)
        chk.columns("camera.projection_jacobian", jac,
                    lambda x: cam_mod.project_center(camera, x)[0], p, scale)
        chk.columns("camera.projection_hessian", hess,
                    lambda x: cam_mod.projection_derivatives(camera, x)[0], p, scale)
        chk.columns("camera.projection_third", third,
                    lambda x: cam_mod.projection_derivatives(camera, x)[1], p, scale)
        _, dr, d2r = cam_mod.view_direction_derivatives(camera, p)
        chk.columns("camera.view_direction_jacobian", dr,
                    lambda x: cam_mod.view_direction(camera, x), p, scale)
        chk.columns("camera.view_direction_hessian", d2r,
                    lambda x: cam_mod.view_direction_derivatives(camera, x)[1], p, scale)


def _check_cov2d(chk, camera, points, covs):
    for p, A in zip(points, covs):
        scale = REL_STEP * max(1.0, float(np.linalg.norm(p - camera.camera_center)))
        d1, d2 = cam_mod.cov2d_derivatives_wrt_position(camera, p, A)
        chk.columns("camera.cov2d_position_jacobian", d1,
                    lambda x: cam_mod.project_covariance_2d(camera, x, A)[0], p, scale)
        chk.columns("camera.cov2d_position_hessian", d2,
                    lambda x: cam_mod.cov2d_derivatives_wrt_position(camera, x, A)[0], p, scale)


def _check_sh(chk, camera, points, coeffs, degree):
    for p, c in zip(points, coeffs):
        r = cam_mod.view_direction(camera, p)
        basis = sh_mod.sh_polynomials(r, degree)
        # the basis polynomials are defined on all of R^3, so raw coordinates can be perturbed
        chk.columns("sh.basis_jacobian", basis.jacobian,
                    lambda x: sh_mod.sh_polynomials(x, degree, order=1).values, r, REL_STEP)
        chk.columns("sh.basis_hessian", basis.hessian,
                    lambda x: sh_mod.sh_polynomials(x, degree, order=1).jacobian, r, REL_STEP)
        scale = REL_STEP * max(1.0, float(np.linalg.norm(p - camera.camera_center)))
        _, dc, d2c = sh_mod.sh_color_and_derivs_wrt_position(camera, p, c, degree)
        chk.columns("sh.color_position_jacobian", dc,
                    lambda x: sh_mod.sh_color_and_derivs_wrt_position(camera, x, c, degree)[0],
                    p, scale)
        chk.columns("sh.color_position_hessian", d2c,
                    lambda x: sh_mod.sh_color_and_derivs_wrt_position(camera, x, c, degree)[1],
                    p, scale)


def _check_gaussian_weight(chk, rng, means, covs):
    for pi, S in zip(means, covs):
        # a pixel about one standard deviation away, so no derivative vanishes
        x = pi + np.linalg.cholesky(S) @ rng.normal(size=2)
        gw = raster.gaussian_weight(S, pi, x)
        h_pi = REL_STEP * float(np.sqrt(np.trace(S)))
        h_cov = REL_STEP * float(np.linalg.norm(S))
        chk.columns("raster.weight_d_pi", gw.d_pi,
                    lambda y: raster.gaussian_weight(S, y, x).value, pi, h_pi)
        chk.columns("raster.weight_d2_pi", gw.d2_pi,
                    lambda y: raster.gaussian_weight(S, y, x).d_pi, pi, h_pi)
        for i, j in ((0, 0), (0, 1), (1, 1)):
            E = _sym_unit(i, j)
            chk.directional("raster.weight_d_cov", gw.d_cov[i, j],
                            lambda t: raster.gaussian_weight(S + t * E, pi, x).value, h_cov)
            chk.directional("raster.weight_d2_cov", gw.d2_cov[:, :, i, j],
                            lambda t: raster.gaussian_weight(S + t * E, pi, x).d_cov, h_cov)
            chk.directional("raster.weight_d_pi_cov", gw.d_pi_cov[:, i, j],
                            lambda t: raster.gaussian_weight(S + t * E, pi, x).d_pi, h_cov)


def _check_loss(chk, rng, image, target, config, hessian_tolerance, n_pixels):
    h, w, _ = image.shape
    idx = list(zip(rng.integers(0, h, n_pixels), rng.integers(0, w, n_pixels),
                   rng.integers(0, 3, n_pixels)))

    def l2(img):
        return loss_mod.l2_loss_and_derivs(img, target)

    def ssim(img):
        stats = loss_mod.ssim_window_stats(img, target, config)
        return loss_mod.ssim_value_and_derivs(stats, img, target, config)

    for name, fn, htol in (("l2", l2, None), ("ssim", ssim, hessian_tolerance)):
        _, grad, hess = fn(image)
        an_g, fd_g, an_h, fd_h = [], [], [], []
        bumps = []
        for y, x, c in idx:
            def bump(t, y=y, x=x, c=c):
                img = image.copy()
                img[y, x, c] += t
                return img
            bumps.append(bump)
            an_g.append(grad[y, x, c])
            fd_g.append(central_difference(lambda t: fn(bump(t))[0], REL_STEP))
            an_h.append(hess[y, x, c])
            fd_h.append(central_difference(lambda t: fn(bump(t))[1][y, x, c], REL_STEP))
        err = relative_error(an_g, fd_g)
        if err > chk.tolerance:
            # near a minimum the gradient is small against the h^2 truncation term
            rich = [richardson_difference(lambda t, b=b: fn(b(t))[0], REL_STEP) for b in bumps]
            err = min(err, relative_error(an_g, rich))
        chk.add(f"loss.{name}_gradient", err)
        chk.add(f"loss.{name}_hessian_diagonal", relative_error(an_h, fd_h), htol)


def _perturbers(scene, axes):
    def position(s, k, d):
        s.positions[k] += d

    def rotation(s, k, d):
        s.rotations[k] = quaternion_multiply(quaternion_exp(d), s.rotations[k])

    def rotation_axis(s, k, t):
        dq = np.r_[np.cos(t), np.sin(t) * axes[k]]
        s.rotations[k] = quaternion_multiply(dq, s.rotations[k])

    def scaling(s, k, d):
        s.scales[k] += d

    def opacity(s, k, d):
        s.opacities[k] += d

    def color(s, k, d):
        s.sh[k] += d

    return {"position": position, "rotation": rotation, "rotation_axis": rotation_axis,
            "scaling": scaling, "opacity": opacity, "color": color}


def _steps(scene, k):
    return {"position": REL_STEP * float(np.max(scene.scales[k])), "rotation": REL_STEP,
            "rotation_axis": REL_STEP, "scaling": REL_STEP * float(np.min(scene.scales[k])),
            "opacity": REL_STEP * float(min(scene.opacities[k], 1.0 - scene.opacities[k])),
            "color": REL_STEP}


def _color_directions(rng, degree, n):
    m = (degree + 1) ** 2
    out = []
    for _ in range(n):
        E = np.zeros((3, 16))
        E[rng.integers(0, 3), rng.integers(0, m)] = 1.0
        out.append(E)
    return out


def _check_newton_gradients(chk, rng, scene, camera, target, config, n_kernels):
    view = nw.evaluate_view(scene, camera, target, config, raster.EXACT, second=False)
    grads = nw.attribute_gradients(scene, view)
    move = _perturbers(scene, None)

    def loss_of(s):
        return loss_mod.total_loss(raster.render(s, camera, raster.EXACT).color, target, config)

    for attr in nw.ATTRIBUTES:
        g = grads[attr].reshape(len(scene), -1)
        ranked = np.argsort(-np.linalg.norm(g, axis=1), kind="stable")[:n_kernels]
        for k in ranked:
            if not np.any(g[k]):
                continue
            h = _steps(scene, k)[attr]

            def f(d, k=k, attr=attr):
                s = scene.copy()
                move[attr](s, k, d)
                return loss_of(s)

            if attr == "color":
                for E in _color_directions(rng, scene.sh_degree, 8):
                    chk.directional("newton.gradient_color", np.sum(grads["color"][k] * E),
                                    lambda t, E=E, f=f: f(t * E), h)
                continue
            analytic = np.atleast_1d(grads[attr][k])
            m = analytic.size
            chk.columns(f"newton.gradient_{attr}", analytic,
                        lambda x, f=f, m=m: f(x if m > 1 else x[0]), np.zeros(m), h)


def _check_newton_hessians(chk, rng, scene, camera, target, n_kernels):
    """Exact Hessians of the pure L2 loss (where the pixel curvature is exact)."""
    config = LossConfig(lam=0.0)

    def view_of(s):
        return nw.evaluate_view(s, camera, target, config, raster.EXACT)

    def loss_of(s):
        return loss_mod.total_loss(raster.render(s, camera, raster.EXACT).color, target, config)

    def gradient_of(s):
        # first-order path only; it is checked against the loss separately
        v = nw.evaluate_view(s, camera, target, config, raster.EXACT, second=False)
        return nw.attribute_gradients(s, v)

    view = view_of(scene)
    axes = cam_mod.view_direction(camera, scene.positions)
    move = _perturbers(scene, axes)
    terms = {
        "position": lambda s, v: nw.position_terms(s, v, coupling=False),
        "scaling": lambda s, v: nw.scaling_terms(s, v, coupling=False),
        "color": lambda s, v: nw.color_terms(s, v, coupling=False),
    }
    base = {a: fn(scene, view) for a, fn in terms.items()}
    for attr in ("position", "scaling"):
        g = base[attr].g
        for k in np.argsort(-np.linalg.norm(g, axis=1), kind="stable")[:n_kernels]:
            h = _steps(scene, k)[attr]

            def grad_at(x, k=k, attr=attr):
                s = scene.copy()
                move[attr](s, k, x)
                return gradient_of(s)[attr][k]

            chk.columns(f"newton.hessian_{attr}", base[attr].full[k], grad_at, np.zeros(3), h)
    g = base["color"].g
    for k in np.argsort(-np.abs(g).sum(axis=(1, 2)), kind="stable")[:n_kernels]:
        for E in _color_directions(rng, scene.sh_degree, 4):
            analytic = np.einsum("cij,cj->ci", base["color"].full[k], E)

            def grad_along(t, k=k, E=E):
                s = scene.copy()
                s.sh[k] += t * E
                return gradient_of(s)["color"][k]

            chk.directional("newton.hessian_color", analytic, grad_along, REL_STEP)
    for attr, fn in (("rotation_axis", lambda: nw.rotation_terms(scene, view, axes, False)),
                     ("opacity", lambda: nw.opacity_terms(scene, view, False))):
        t = fn()
        for k in np.argsort(-np.abs(t.g[:, 0]), kind="stable")[:n_kernels]:
            h = 10.0 * _steps(scene, k)[attr]

            def f(d, k=k, attr=attr):
                s = scene.copy()
                move[attr](s, k, d)
                return loss_of(s)

            name = "rotation" if attr == "rotation_axis" else attr
            chk.directional(f"newton.hessian_{name}", t.full[k, 0, 0], f, h, second=True)
    _check_lambda_hessian(chk, scene, camera, target, config, view, n_kernels)


def _check_lambda_hessian(chk, scene, camera, target, config, view, n_kernels):
    """Eigenvalue-space scaling terms, with eigenvectors of Sigma held fixed."""
    frame = nw.eigen_frame(scene, view)
    t = nw.scaling_lambda_terms(scene, view, frame, coupling=False)
    proj0 = raster.project_scene(scene, camera)

    def loss_at(k, dl):
        p = copy.deepcopy(proj0)
        V = frame.vecs[k]
        p.cov2d[k] = V @ np.diag(frame.lam[k] + dl) @ V.T
        p.conic[k] = np.linalg.inv(p.cov2d[k])
        img = raster.render(scene, camera, raster.EXACT, projection=p).color
        return loss_mod.total_loss(img, target, config)

    for k in np.argsort(-np.linalg.norm(t.g, axis=1), kind="stable")[:n_kernels]:
        h = 10.0 * REL_STEP * float(np.min(frame.lam[k]))
        chk.columns("newton.gradient_scaling_lambda", t.g[k], lambda x, k=k: loss_at(k, x),
                    np.zeros(2), h)
        for a, b in ((0, 0), (0, 1), (1, 1)):
            ea, eb = np.eye(2)[a], np.eye(2)[b]
            mixed = (loss_at(k, h * (ea + eb)) - loss_at(k, h * (ea - eb))
                     - loss_at(k, h * (eb - ea)) + loss_at(k, -h * (ea + eb))) / (4.0 * h * h)
            chk.add("newton.hessian_scaling_lambda", relative_error(
                t.full[k, a, b], mixed, floor=1e-6 * np.abs(t.full[k]).max()))


def check_derivatives(scene, camera, target=None, tolerance=1e-4, hessian_tolerance=1e-3,
                      loss_config=LossConfig(), seed=0, n_kernels=3, n_pixels=24):
    """Verify every analytic derivative against finite differences.

    The loss terms use ``target`` (a render of a perturbed copy of ``scene``
    when omitted). Returns a ``DerivativeReport``; a scene with no kernels
    passes vacuously.
    """
    report_chk = _Checker(tolerance)
    if len(scene) == 0:
        return report_chk.report()
    rng = np.random.default_rng(seed)
    if target is None:
        from .synth import perturb_scene
        target = raster.render(perturb_scene(scene, rng, 1.0), camera, raster.EXACT).color
    proj = raster.project_scene(scene, camera)
    vis = np.flatnonzero(proj.visible)
    if len(vis) == 0:
        return report_chk.report()
    ids = _sample(rng, vis, n_kernels)
    pts = scene.positions[ids]
    covs = scene.covariances()[ids]
    _check_camera(report_chk, camera, pts)
    _check_cov2d(report_chk, camera, pts, covs)
    _check_sh(report_chk, camera, pts, scene.sh[ids], scene.sh_degree)
    _check_gaussian_weight(report_chk, rng, proj.means2d[ids], proj.cov2d[ids])
    image = raster.render(scene, camera, raster.EXACT).color
    _check_loss(report_chk, rng, image, target, loss_config, hessian_tolerance, n_pixels)
    _check_newton_gradients(report_chk, rng, scene, camera, target, loss_config, n_kernels)
    _check_newton_hessians(report_chk, rng, scene, camera, target, n_kernels)
    return report_chk.report()
