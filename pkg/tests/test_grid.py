import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_phaseless.grid import (boundary_mask, build_grid, dz_bottom, dz_bottom_T, grad_interior,
                                     grad_interior_T, gradient_fd, lap_interior, lap_interior_T,
                                     laplacian_fd, slab_index)


@pytest.mark.parametrize("R,n,h", [(1.0, 21, 0.1), (2.0, 5, 1.0)])
def test_spacing(R, n, h):
    assert build_grid(R, n).h == pytest.approx(h, rel=1e-14)


def test_three_nodes_symmetric():
    np.testing.assert_array_equal(build_grid(1.0, 3).coords, [-1.0, 0.0, 1.0])


def test_rejects_bad_sizes():
    with pytest.raises(ValueError):
        build_grid(1.0, 2)
    with pytest.raises(ValueError):
        build_grid(-1.0, 5)


def test_slab_partition():
    g = build_grid(1.0, 21)
    s = slab_index(g, 0.28)
    assert s.layers == 3
    assert s.gamma.sum() == 21 * 21
    bnd = boundary_mask(g.shape)
    assert not np.any(s.gamma & s.rest)
    np.testing.assert_array_equal(s.gamma | s.rest, bnd)


def test_laplacian_constant_and_quadratic():
    g = build_grid(1.0, 9)
    X, Y, Z = g.mesh()
    np.testing.assert_allclose(lap_interior(np.full(g.shape, 3.7), g.h), 0.0, atol=1e-12)
    np.testing.assert_allclose(lap_interior(X ** 2 + Y ** 2 + Z ** 2, g.h), 6.0, rtol=1e-12)


def _naive_laplacian(phi, h):
    n = phi.shape[0]
    out = np.zeros((n - 2,) * 3, dtype=phi.dtype)
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            for t in range(1, n - 1):
                s = (phi[i + 1, j, t] + phi[i - 1, j, t] + phi[i, j + 1, t] + phi[i, j - 1, t]
                     + phi[i, j, t + 1] + phi[i, j, t - 1] - 6.0 * phi[i, j, t])
                out[i - 1, j - 1, t - 1] = s / h ** 2
    return out


def test_laplacian_matches_triple_loop():
    rng = np.random.default_rng(0)
    g = build_grid(1.0, 8)
    phi = rng.standard_normal(g.shape)
    ref = _naive_laplacian(phi, g.h)
    np.testing.assert_allclose(lap_interior(phi, g.h), ref, rtol=0, atol=1e-14 * np.abs(ref).max())
    np.testing.assert_allclose(laplacian_fd(phi, g.h)[1:-1, 1:-1, 1:-1], ref, atol=1e-14 * np.abs(ref).max())


def test_gradient_linear_and_constant():
    g = build_grid(1.0, 7)
    X, Y, Z = g.mesh()
    G = grad_interior(X, g.h)
    np.testing.assert_allclose(G[0], 1.0, rtol=1e-13)
    np.testing.assert_allclose(G[1:], 0.0, atol=1e-13)
    np.testing.assert_allclose(grad_interior(np.full(g.shape, 2.0), g.h), 0.0, atol=1e-13)
    np.testing.assert_allclose(gradient_fd(2 * Y - Z, g.h)[:, 1:-1, 1:-1, 1:-1][1], 2.0, rtol=1e-13)


def test_gradient_refinement_ratio():
    errs = []
    for n in (11, 21):
        g = build_grid(1.0, n)
        X = g.mesh()[0]
        errs.append(np.abs(grad_interior(np.sin(X), g.h)[0] - np.cos(X[1:-1, 1:-1, 1:-1])).max())
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_dz_bottom_exact_on_quadratics():
    g = build_grid(1.0, 6)
    Z = g.mesh()[2]
    np.testing.assert_allclose(dz_bottom(2.0 + 3.0 * Z, g.h), 3.0, rtol=1e-13)
    np.testing.assert_allclose(dz_bottom(Z ** 2, g.h), -2.0, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=4, max_value=7), st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_adjoints(n, seed):
    rng = np.random.default_rng(seed)
    h = 2.0 / (n - 1)
    x = rng.standard_normal((n, n, n))
    q = rng.standard_normal((n - 2,) * 3)
    q3 = rng.standard_normal((3,) + (n - 2,) * 3)
    qb = rng.standard_normal((n, n))
    assert np.vdot(lap_interior(x, h), q) == pytest.approx(np.vdot(x, lap_interior_T(q, h)), rel=1e-10)
    assert np.vdot(grad_interior(x, h), q3) == pytest.approx(np.vdot(x, grad_interior_T(q3, h)), rel=1e-10)
    assert np.vdot(dz_bottom(x, h), qb) == pytest.approx(np.vdot(x, dz_bottom_T(qb, h, x.shape)), rel=1e-10)
