import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import relerr
from splatnewton.camera import (LOWPASS, BehindCameraError, Camera, cov2d_derivatives_wrt_position,
                                look_at, orthographic, perspective, project_center,
                                project_covariance_2d, projection_derivatives,
                                projection_third_derivative, view_direction,
                                view_direction_derivatives)
from splatnewton.errors import DegenerateGeometryError
from splatnewton.scene import build_covariance_3d, renormalize_quaternion

W = H = 64
F = 80.0


def pinhole(view=None, width=W, height=H):
    return Camera(np.eye(4) if view is None else view,
                  perspective(F, F, width / 2, height / 2, width, height), width, height)


def orbit_camera(rng):
    eye = rng.normal(size=3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    return Camera(look_at(eye, np.zeros(3)), perspective(F, F, 30.0, 34.0, W, H), W, H)


def fd_jacobian(f, x, h):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def test_view_direction_examples():
    cam = pinhole()
    np.testing.assert_allclose(view_direction(cam, [0, 0, 5.0]), [0, 0, 1])
    np.testing.assert_allclose(view_direction(cam, [3.0, 0, 4]), [0.6, 0, 0.8], atol=1e-16)
    with pytest.raises(DegenerateGeometryError):
        view_direction(cam, [0.0, 0, 0])


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3).filter(
    lambda p: np.linalg.norm(p) > 1e-3))
def test_view_direction_unit(p):
    assert abs(np.linalg.norm(view_direction(pinhole(), p)) - 1.0) <= 1e-12


def test_optical_axis_projects_to_image_center():
    cam = pinhole()
    for z in (0.5, 2.0, 7.0, 40.0):
        pi, _, depth = project_center(cam, [0.0, 0.0, z])
        np.testing.assert_allclose(pi, [W / 2, H / 2], atol=1e-12)
        assert depth == pytest.approx(z)


def test_projection_matches_direct_matrix_evaluation(rng):
    for _ in range(20):
        cam = orbit_camera(rng)
        p = 0.5 * rng.normal(size=3)
        h = cam.proj @ cam.view @ np.r_[p, 1.0]
        expect = [W / 2 * (h[0] / h[3] + 1), H / 2 * (h[1] / h[3] + 1)]
        pi, hh, _ = project_center(cam, p)
        np.testing.assert_allclose(pi, expect, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(hh, h, rtol=1e-12, atol=1e-12)


def test_projection_invariant_to_homogeneous_scale(rng):
    cam = orbit_camera(rng)
    scaled = Camera(cam.view, 3.7 * cam.proj, W, H)
    p = 0.5 * rng.normal(size=3)
    np.testing.assert_allclose(project_center(scaled, p)[0], project_center(cam, p)[0],
                               rtol=1e-13)


def test_behind_camera_is_culled():
    with pytest.raises(BehindCameraError):
        project_center(pinhole(), [0.0, 0.0, -1.0])


def test_projection_derivatives_match_fd(rng):
    for _ in range(10):
        cam = orbit_camera(rng)
        p = 0.5 * rng.normal(size=3)
        h = 1e-4 * 4.0
        jac, hess = projection_derivatives(cam, p)
        assert relerr(jac, fd_jacobian(lambda x: project_center(cam, x)[0], p, h)) <= 1e-5
        assert relerr(hess, fd_jacobian(lambda x: projection_derivatives(cam, x)[0], p, h)) <= 1e-5
        third = projection_third_derivative(cam, p)
        assert relerr(third, fd_jacobian(lambda x: projection_derivatives(cam, x)[1], p, h)) <= 1e-5
        np.testing.assert_allclose(hess, np.swapaxes(hess, 1, 2), atol=1e-15)


def test_affine_camera_has_zero_curvature():
    view = np.eye(4)
    view[:3, 3] = [0.3, -0.2, 5.0]
    cam = Camera(view, orthographic(0.4, 0.5), W, H)
    p = np.array([0.1, 0.2, 0.3])
    _, hess = projection_derivatives(cam, p)
    assert np.all(hess == 0.0)
    d1, d2 = cov2d_derivatives_wrt_position(cam, p, np.diag([0.1, 0.2, 0.3]))
    assert np.all(d1 == 0.0) and np.all(d2 == 0.0)


def test_doubling_width_doubles_x_row(rng):
    cam = orbit_camera(rng)
    wide = Camera(cam.view, cam.proj, 2 * W, H)
    p = 0.3 * rng.normal(size=3)
    j1, _ = projection_derivatives(cam, p)
    j2, _ = projection_derivatives(wide, p)
    np.testing.assert_array_equal(j2[0], 2.0 * j1[0])
    np.testing.assert_array_equal(j2[1], j1[1])


def test_isotropic_kernel_on_axis():
    a, z = 0.2, 5.0
    cov, _ = project_covariance_2d(pinhole(), [0.0, 0.0, z], a * a * np.eye(3))
    np.testing.assert_allclose(cov, ((a * F / z) ** 2 + LOWPASS) * np.eye(2), rtol=1e-13)


def test_flat_kernel_seen_edge_on_is_rank_one():
    a = 0.2
    A = np.diag([a * a, 0.0, a * a])   # disk in the x-z plane, viewed along z
    cov, _ = project_covariance_2d(pinhole(), [0.0, 0.0, 5.0], A, lowpass=0.0)
    assert np.linalg.matrix_rank(cov, tol=1e-12) == 1


def test_covariance_composition(rng):
    for _ in range(10):
        cam = orbit_camera(rng)
        p = 0.4 * rng.normal(size=3)
        A = build_covariance_3d(renormalize_quaternion(rng.normal(size=4)),
                                rng.uniform(0.05, 0.3, 3))
        cov, J = project_covariance_2d(cam, p, A)
        R = cam.rotation
        expect = J @ R @ A @ R.T @ J.T + LOWPASS * np.eye(2)
        assert relerr(cov, expect) <= 1e-12
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= LOWPASS - 1e-12


def test_cov2d_derivatives_match_fd(rng):
    for _ in range(10):
        cam = orbit_camera(rng)
        p = 0.4 * rng.normal(size=3)
        A = build_covariance_3d(renormalize_quaternion(rng.normal(size=4)),
                                rng.uniform(0.05, 0.3, 3))
        d1, d2 = cov2d_derivatives_wrt_position(cam, p, A)
        h = 1e-4 * 4.0
        assert relerr(d1, fd_jacobian(lambda x: project_covariance_2d(cam, x, A)[0], p, h)) <= 1e-4
        fd2 = fd_jacobian(lambda x: cov2d_derivatives_wrt_position(cam, x, A)[0], p, h)
        assert relerr(d2, fd2) <= 1e-4
        np.testing.assert_array_equal(d1[0, 1], d1[1, 0])
        np.testing.assert_array_equal(d2[0, 1], d2[1, 0])


def test_view_direction_derivatives_match_fd(rng):
    cam = orbit_camera(rng)
    p = 0.5 * rng.normal(size=3)
    _, dr, d2r = view_direction_derivatives(cam, p)
    assert relerr(dr, fd_jacobian(lambda x: view_direction(cam, x), p, 1e-5)) <= 1e-6
    assert relerr(d2r, fd_jacobian(lambda x: view_direction_derivatives(cam, x)[1], p, 1e-5)) <= 1e-6
