import numpy as np
import pytest

from carleman_phaseless.forward import add_noise, PhaselessData, incident_wave
from carleman_phaseless.grid import build_grid, grad_interior, slab_index
from carleman_phaseless.phase import (PhaseRetrievalConfig, eval_Jk, extract_cauchy, initial_guess, retrieve_all,
                                      retrieve_phase, slab_points)

X0 = (0.0, 0.0, -4.0)


def test_travel_time_eikonal_refinement():
    errs = []
    for n, stride in ((11, 1), (21, 2)):
        g = build_grid(1.0, n)
        tau = np.linalg.norm(np.stack(g.mesh(), axis=-1) - np.array(X0), axis=-1)
        G = grad_interior(tau, g.h)
        # compare on the nodes shared with the coarse grid
        sel = G[:, stride - 1::stride, stride - 1::stride, stride - 1::stride]
        errs.append(np.abs(np.linalg.norm(sel, axis=0) - 1.0).max())
    assert errs[0] < 1e-3
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_initial_guess_matches_incident_phase():
    g = build_grid(1.0, 9)
    pts = slab_points(g, 3)
    ks = np.array([np.pi, 5.0])
    u = incident_wave(pts, X0, ks)
    np.testing.assert_allclose(initial_guess(np.abs(u), ks, pts, X0), u, rtol=1e-13)


def test_Jk_vanishes_on_discrete_plane_wave():
    g = build_grid(1.0, 9)
    k = 4.0
    kappa = np.arccos(1.0 - (k * g.h) ** 2 / 2) / g.h
    Z = slab_points(g, 4)[..., 2]
    v = np.exp(1j * kappa * Z)
    assert eval_Jk(v, np.ones(v.shape), k, g.h) <= 1e-20


def test_Jk_true_field_refinement():
    k = 2 * np.pi
    vals = []
    for n, layers in ((11, 3), (21, 5)):
        g = build_grid(1.0, n)
        u = incident_wave(slab_points(g, layers), X0, [k])[0]
        # root mean square of the residual over the evaluated nodes
        count = (n - 2) ** 2 * (layers - 2)
        vals.append(np.sqrt(eval_Jk(u, np.abs(u), k, g.h) / (g.h ** 3 * count)))
    assert 3.5 < vals[0] / vals[1] < 4.5


def test_Jk_gradient_finite_differences():
    rng = np.random.default_rng(4)
    g = build_grid(1.0, 7)
    shape = (7, 7, 3)
    f = rng.uniform(0.5, 1.5, shape)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    k = 4.5
    _, G = eval_Jk(v, f, k, g.h, grad=True)
    for _ in range(20):
        d = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        s = 1e-6
        fd = (eval_Jk(v + s * d, f, k, g.h) - eval_Jk(v - s * d, f, k, g.h)) / (2 * s)
        an = np.real(np.vdot(G, d))
        assert abs(fd - an) <= 1e-6 * abs(an)


def test_retrieval_improves_on_test1(test1_small):
    g, ks = test1_small["grid"], test1_small["ks"]
    f = add_noise(PhaselessData(test1_small["f"], ks), 0.1, 7).values
    u_star = test1_small["u_slab"][-1]
    pts = slab_points(g, f.shape[-1])
    u0 = initial_guess(f[-1], ks[-1], pts, X0)
    u, entry = retrieve_phase(f[-1], ks[-1], g.h, u0)
    err0 = np.linalg.norm(u0 - u_star) / np.linalg.norm(u_star)
    err = np.linalg.norm(u - u_star) / np.linalg.norm(u_star)
    assert err < err0
    assert entry.J_final < entry.J_initial


def test_retrieve_all_parallel_matches_serial(test1_small):
    g, ks = test1_small["grid"], test1_small["ks"][:3]
    f = test1_small["f"][:3]
    cfg = PhaseRetrievalConfig(maxiter=30)
    a, la = retrieve_all(f, ks, g, X0, cfg, jobs=1)
    b, lb = retrieve_all(f, ks, g, X0, cfg, jobs=2)
    assert np.array_equal(a, b)
    assert [e.to_dict() for e in la] == [e.to_dict() for e in lb]


def test_config_validation():
    with pytest.raises(ValueError):
        PhaseRetrievalConfig(maxiter=0)


def test_extract_cauchy_incident_wave_refinement():
    k = 2 * np.pi
    errs = []
    for n in (11, 21):
        g = build_grid(1.0, n)
        pts = slab_points(g, 3)
        u = incident_wave(pts, X0, [k])[0]
        d = pts[:, :, 0] - np.array(X0)
        r = np.linalg.norm(d, axis=-1)
        exact = u[:, :, 0] * (1j * k - 1.0 / r) * d[..., 2] / r
        errs.append(np.abs(extract_cauchy(u, g.h).h - exact).max() / np.abs(exact).max())
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_extract_cauchy_exact_cases():
    g = build_grid(1.0, 9)
    Z = slab_points(g, 3)[..., 2]
    cd = extract_cauchy(np.full(Z.shape, 2.0 + 1j), g.h)
    np.testing.assert_allclose(cd.h, 0.0, atol=1e-12)
    cd = extract_cauchy(1.5 - 0.7 * Z, g.h)
    np.testing.assert_allclose(cd.h, -0.7, rtol=1e-12)
    np.testing.assert_allclose(cd.g, 1.5 - 0.7 * Z[..., 0])
    with pytest.raises(ValueError):
        extract_cauchy(np.ones((9, 9, 2)), g.h)
