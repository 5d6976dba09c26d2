import numpy as np
import pytest

from conftest import relerr
from splatnewton.camera import Camera, look_at, perspective
from splatnewton.errors import InvalidInputError
from splatnewton.scene import quaternion_to_rotation, renormalize_quaternion
from splatnewton.sh import (C0, C1, eval_sh_basis, eval_view_color,
                            sh_color_and_derivs_wrt_position, sh_color_derivs_wrt_position,
                            sh_polynomials)


def unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def camera():
    return Camera(look_at([3.0, -2.0, 1.5], np.zeros(3)), perspective(60, 60, 32, 32, 64, 64),
                  64, 64)


def fd(f, x, h):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def test_degree_zero_is_constant(rng):
    b = eval_sh_basis(unit(rng), degree=0)
    assert b.values[0] == C0
    assert np.all(b.jacobian[0] == 0) and np.all(b.hessian[0] == 0)
    assert np.all(b.values[1:] == 0)


def test_degree_one_sign_pattern():
    b = eval_sh_basis(np.array([0.0, 0.0, 1.0]), degree=1)
    np.testing.assert_allclose(b.values[1:4], C1 * np.array([0.0, 1.0, 0.0]), atol=1e-16)
    b = eval_sh_basis(np.array([0.6, 0.8, 0.0]), degree=1)
    np.testing.assert_allclose(b.values[1:4], C1 * np.array([-0.8, 0.0, -0.6]), atol=1e-16)


def test_non_unit_direction_rejected():
    with pytest.raises(InvalidInputError):
        eval_sh_basis(np.array([0.0, 0.0, 1.1]))
    with pytest.raises(InvalidInputError):
        eval_sh_basis(np.array([0.0, 0.0, 1.0]), degree=4)


def test_basis_derivatives_match_fd(rng):
    for r in unit(rng, 10):
        b = sh_polynomials(r, 3)
        assert relerr(b.jacobian, fd(lambda x: sh_polynomials(x, 3).values, r, 1e-5)) <= 1e-5
        assert relerr(b.hessian, fd(lambda x: sh_polynomials(x, 3).jacobian, r, 1e-5)) <= 1e-5


def test_zero_coefficients_give_offset(rng):
    b = eval_sh_basis(unit(rng))
    np.testing.assert_array_equal(eval_view_color(b, np.zeros((3, 16))), [0.5, 0.5, 0.5])


def test_degree_zero_color_is_view_independent(rng):
    c = np.zeros((3, 16))
    c[:, 0] = rng.normal(size=3)
    colors = [eval_view_color(eval_sh_basis(r), c) for r in unit(rng, 5)]
    for col in colors[1:]:
        np.testing.assert_array_equal(col, colors[0])


def test_color_is_affine_in_coefficients(rng):
    b = eval_sh_basis(unit(rng))
    c1, c2 = 0.1 * rng.normal(size=(2, 3, 16))
    a, s = 0.7, -0.4
    lin = lambda c: eval_view_color(b, c) - 0.5   # offset bookkeeping; no clamp at this scale
    np.testing.assert_allclose(lin(a * c1 + s * c2), a * lin(c1) + s * lin(c2), atol=1e-15)


def test_degree_one_rotation_sanity(rng):
    """Rotating r by R and the degree-1 coefficients by the matching 3x3 map."""
    P = np.array([[0.0, -1, 0], [0, 0, 1], [-1, 0, 0]])   # r -> (-y, z, -x)
    for _ in range(5):
        R = quaternion_to_rotation(renormalize_quaternion(rng.normal(size=4)))
        r = unit(rng)
        c = np.zeros((3, 16))
        c[:, 1:4] = 0.2 * rng.normal(size=(3, 3))
        c2 = c.copy()
        c2[:, 1:4] = c[:, 1:4] @ (P @ R @ P.T).T
        before = eval_view_color(eval_sh_basis(r, 1), c)
        after = eval_view_color(eval_sh_basis(R @ r, 1), c2)
        np.testing.assert_allclose(after, before, atol=1e-10)


def test_position_derivatives_match_fd(rng):
    cam = camera()
    for _ in range(5):
        p = 0.4 * rng.normal(size=3)
        c = 0.3 * rng.normal(size=(3, 16))
        c[:, 0] = 1.0   # keep the clamp inactive
        _, dc, d2c = sh_color_and_derivs_wrt_position(cam, p, c)
        f1 = lambda x: sh_color_and_derivs_wrt_position(cam, x, c)[0]
        f2 = lambda x: sh_color_and_derivs_wrt_position(cam, x, c)[1]
        assert relerr(dc, fd(f1, p, 1e-5)) <= 1e-4
        assert relerr(d2c, fd(f2, p, 1e-5)) <= 1e-4


def test_degree_zero_has_no_position_derivatives(rng):
    c = rng.normal(size=(3, 16))
    dc, d2c = sh_color_derivs_wrt_position(camera(), 0.3 * rng.normal(size=3), c, degree=0)
    assert np.all(dc == 0) and np.all(d2c == 0)


def test_clamped_channel_has_zero_derivatives(rng):
    c = 0.3 * rng.normal(size=(3, 16))
    c[0, 0] = -10.0   # red pinned at zero
    color, dc, d2c = sh_color_and_derivs_wrt_position(camera(), 0.3 * rng.normal(size=3), c)
    assert color[0] == 0.0
    assert np.all(dc[0] == 0) and np.all(d2c[0] == 0)
