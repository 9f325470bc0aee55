import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microid.core import (GridInterpolator, JacobianMatrix, SimplexPoint, ZGrid, batch_line_integrals,
                          finite_diff_jacobian, integrate_path, line_integrate_gradient, simpson_weights)
from microid.errors import DomainMargin


def f_test(z):
    z = np.asarray(z, dtype=float)
    return np.stack([np.sin(z[..., 0]) + z[..., 1] ** 2, z[..., 0] * z[..., 1] + np.exp(0.3 * z[..., 1])], axis=-1)


def jac_test(z):
    z = np.atleast_2d(z)
    a, b = z[:, 0], z[:, 1]
    return np.stack([np.stack([np.cos(a), 2 * b], -1), np.stack([b, a + 0.3 * np.exp(0.3 * b)], -1)], 1)


def test_fd_jacobian_identity():
    j = finite_diff_jacobian(lambda z: z, [0.3, -0.7], step=1e-5)
    assert np.allclose(j.matrix, np.eye(2), atol=1e-9)


def test_fd_jacobian_square_map():
    j = finite_diff_jacobian(lambda z: np.array([z[0] ** 2, z[1]]), [1.0, 1.0])
    assert np.allclose(j.matrix, [[2, 0], [0, 1]], atol=1e-6)


def test_fd_jacobian_boundary_raises():
    grid = ZGrid.around([0, 0], 1.0, 11)
    with pytest.raises(DomainMargin):
        finite_diff_jacobian(lambda z: z, [1.0, 0.0], domain=grid)


def test_line_integral_identity_field():
    out = line_integrate_gradient(lambda z: np.broadcast_to(np.eye(2), (len(z), 2, 2)), [0, 0], [1, 2])
    assert np.allclose(out, [1, 2])


def test_line_integral_diag_field():
    def field(z):
        z = np.atleast_2d(z)
        out = np.zeros((len(z), 2, 2))
        out[:, 0, 0] = 2 * z[:, 0]
        out[:, 1, 1] = 1.0
        return out
    assert np.allclose(line_integrate_gradient(field, [0, 0], [1, 1]), [1, 1], atol=1e-12)


def test_line_integral_degenerate_segment():
    out = line_integrate_gradient(jac_test, [0.4, 0.1], [0.4, 0.1])
    assert np.array_equal(out, np.zeros(2))


def test_line_integral_leaving_box_raises():
    grid = ZGrid.around([0, 0], 1.0, 11)
    with pytest.raises(DomainMargin):
        line_integrate_gradient(jac_test, [0, 0], [1.5, 0], domain=grid)


@pytest.mark.parametrize("n", [2, 3, 4, 7, 50, 101])
def test_simpson_weights_integrate_polynomials(n):
    u = np.linspace(0, 1, n)
    w = simpson_weights(n)
    assert w.sum() == pytest.approx(1.0)
    assert w @ u == pytest.approx(0.5)
    if n >= 3:
        assert w @ u ** 2 == pytest.approx(1 / 3)


def test_simplex_point_rejects_boundary():
    with pytest.raises(ValueError):
        SimplexPoint([0.5, 0.5])
    s = SimplexPoint([0.2, 0.3])
    assert s.s0 == pytest.approx(0.5)
    assert np.allclose(s.full(), [0.5, 0.2, 0.3])


def test_zgrid_anchor_and_roundtrip():
    g = ZGrid.around([0.5, -0.5], 2.0, 41)
    assert np.allclose(g.z0, [0.5, -0.5])
    assert g.size == 41 * 41
    assert ZGrid.from_dict(g.to_dict()).to_dict() == g.to_dict()
    with pytest.raises(ValueError):
        ZGrid.around([0, 0], 1.0, 10)


def test_jacobian_matrix_flags_singular():
    assert JacobianMatrix(np.ones((2, 2))).singular
    assert not JacobianMatrix(np.eye(2)).singular


def test_cubic_interpolator_accuracy():
    g = ZGrid.around([0, 0], 1.0, 41)
    vals = f_test(g.points()).reshape(g.shape + (2,))
    it = GridInterpolator(g, vals[None], "cubic")
    q = np.random.default_rng(0).uniform(-0.9, 0.9, (200, 2))
    v, jac = it(0, q, jacobian=True)
    assert np.max(np.abs(v - f_test(q))) < 1e-6
    assert np.max(np.abs(jac - jac_test(q))) < 1e-4


pts = st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))


@settings(max_examples=40, deadline=None)
@given(z0=pts, z=pts)
def test_round_trip_fd_then_integrate(z0, z):
    def field(p):
        return np.stack([finite_diff_jacobian(f_test, q).matrix for q in np.atleast_2d(p)])
    out = line_integrate_gradient(field, z0, z, n_steps=50)
    assert np.allclose(out, f_test(np.array(z)) - f_test(np.array(z0)), atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(z0=pts, z=pts)
def test_path_independence_straight_vs_l_shape(z0, z):
    straight = line_integrate_gradient(jac_test, z0, z)
    corner = (z[0], z0[1])
    bent = integrate_path(jac_test, [z0, corner, z])
    assert np.allclose(straight, bent, atol=1e-4)


@settings(max_examples=20, deadline=None)
@given(z=pts)
def test_batch_matches_single_integral(z):
    one = line_integrate_gradient(jac_test, [0.1, 0.2], z)
    many = batch_line_integrals(jac_test, np.array([0.1, 0.2]), np.array([z]))
    assert np.allclose(one, many[0], atol=1e-12)
