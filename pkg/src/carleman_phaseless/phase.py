"""Phase retrieval on the measurement slab.

For each wavenumber the complex field on the slab minimises

    J_k(v) = h^3 sum_inner |Lap v + k^2 v|^2 + h^3 sum_slab (|v|^2 - f^2)^2

starting from the travel-time guess ``f exp(ik|x - x0|)``. The Helmholtz term
uses only slab nodes whose whole 7-point stencil lies in the slab.
Slab fields have shape ``(n, n, layers)``; stacks over wavenumbers put ``k`` first.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .grid import Grid3D, dz_bottom, lap_interior, lap_interior_T

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhaseRetrievalConfig:
    maxiter: int = 500
    gtol: float = 1e-8
    ftol: float = 1e-15
    maxcor: int = 20
    maxls: int = 40

    def __post_init__(self):
        if self.maxiter <= 0 or self.maxcor <= 0 or self.maxls <= 0:
            raise ValueError("iteration caps must be positive")


@dataclass
class CauchyData:
    """Field ``g`` and normal derivative ``h = du/dz`` on the bottom face, ``(K, n, n)``.

    ``layers`` optionally keeps the first three slab layers the derivative was
    taken from, so later stages can difference smoother derived quantities.
    """

    g: np.ndarray
    h: np.ndarray
    layers: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RetrievalLog:
    k: float
    iterations: int
    J_initial: float
    J_final: float
    grad_norm: float
    converged: bool
    message: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def slab_points(grid: Grid3D, layers: int) -> np.ndarray:
    return np.stack(grid.mesh(), axis=-1)[:, :, :layers]


def initial_guess(f: np.ndarray, ks, pts: np.ndarray, x0) -> np.ndarray:
    """Modulus data times the free-space travel-time phase, ``f exp(ik|x - x0|)``."""
    tau = np.linalg.norm(pts - np.asarray(x0, dtype=float), axis=-1)
    ks = np.asarray(ks, dtype=float)
    if f.ndim == tau.ndim:
        return f * np.exp(1j * float(ks) * tau)
    return f * np.exp(1j * ks.reshape((-1,) + (1,) * tau.ndim) * tau)


def eval_Jk(v: np.ndarray, f: np.ndarray, k: float, h: float, grad: bool = False):
    """Value of ``J_k`` and optionally its gradient as ``dJ/dRe + i dJ/dIm``."""
    vol = h ** 3
    r = lap_interior(v, h) + k * k * v[1:-1, 1:-1, 1:-1]
    s = np.abs(v) ** 2 - f ** 2
    J = vol * (np.sum(np.abs(r) ** 2) + np.sum(s * s))
    if not grad:
        return J
    G = lap_interior_T(r, h)
    G[1:-1, 1:-1, 1:-1] += k * k * r
    G = 2.0 * vol * G + 4.0 * vol * s * v
    return J, G


def retrieve_phase(f: np.ndarray, k: float, h: float, u0: np.ndarray,
                   cfg: PhaseRetrievalConfig = PhaseRetrievalConfig()):
    """Limited-memory BFGS descent on ``J_k`` from ``u0``; returns ``(u_phase, RetrievalLog)``.

    The unknowns are the real and imaginary parts of every slab node. The
    lowest-``J_k`` iterate seen is returned even if the cap is hit.
    """
    shape = u0.shape
    n = u0.size
    J0 = eval_Jk(u0, f, k, h)
    # the optimiser works on x = v / a with objective J / J0, so its absolute
    # tolerances do not depend on the amplitude of the data
    a = float(np.max(f)) if np.max(f) > 0 else 1.0
    scale = 1.0 / J0 if J0 > 0 else 1.0
    best = {"J": np.inf, "x": None}

    def fun(x):
        v = a * (x[:n] + 1j * x[n:]).reshape(shape)
        J, G = eval_Jk(v, f, k, h, grad=True)
        if J < best["J"]:
            best["J"], best["x"] = J, x.copy()
        G = G * (a * scale)
        return J * scale, np.concatenate([G.real.ravel(), G.imag.ravel()])

    x0 = np.concatenate([u0.real.ravel(), u0.imag.ravel()]) / a
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.maxiter, "gtol": cfg.gtol, "ftol": cfg.ftol,
                            "maxcor": cfg.maxcor, "maxls": cfg.maxls})
    x = best["x"] if best["x"] is not None and best["J"] < res.fun / scale else res.x
    x = a * x
    u = (x[:n] + 1j * x[n:]).reshape(shape)
    J, G = eval_Jk(u, f, k, h, grad=True)
    entry = RetrievalLog(float(k), int(res.nit), float(J0), float(J), float(np.abs(G).max()),
                         bool(res.success), str(res.message))
    if not res.success:
        log.info("phase retrieval at k=%.4f stopped: %s", k, res.message)
    return u, entry


def _retrieve_one(args):
    f, k, h, u0, cfg = args
    return retrieve_phase(f, k, h, u0, cfg)


def retrieve_all(f: np.ndarray, ks, grid: Grid3D, x0, cfg: PhaseRetrievalConfig = PhaseRetrievalConfig(),
                 jobs: int = 1):
    """Independent retrieval for every wavenumber; ``f`` has shape ``(K, n, n, layers)``."""
    ks = np.asarray(ks, dtype=float)
    pts = slab_points(grid, f.shape[-1])
    u0 = initial_guess(f, ks, pts, x0)
    tasks = [(f[q], float(ks[q]), grid.h, u0[q], cfg) for q in range(len(ks))]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_retrieve_one, tasks))
    else:
        out = [_retrieve_one(t) for t in tasks]
    return np.stack([u for u, _ in out]), [entry for _, entry in out]


def extract_cauchy(u: np.ndarray, h: float) -> CauchyData:
    """Bottom-face value and one-sided second-order ``d/dz`` from the first three layers."""
    if u.shape[-1] < 3:
        raise ValueError(f"need at least 3 slab layers for the normal derivative, got {u.shape[-1]}")
    return CauchyData(u[..., 0].copy(), dz_bottom(u, h), u[..., :3].copy())
