"""Frequency reduction: log transform, truncated Fourier coefficients in k, boundary data.

Stacks over wavenumbers have ``k`` on axis 0; coefficient stacks have the
basis index on axis 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSystem, uniform_weights
from .grid import Grid3D, dz_bottom, slab_index
from .forward import incident_wave
from .phase import CauchyData

RATIO_FLOOR = 1e-12


@dataclass
class CoefficientStack:
    """Boundary data of the reduced system.

    ``g[m]``, ``h[m]``: value and ``d/dz`` targets on the bottom face, ``(N, n, n)``.
    ``rest[m]``: value targets on the remaining boundary nodes, stored as full
    ``(N, n, n, n)`` arrays (only boundary entries are read).
    ``v``: optional volumetric coefficients, e.g. from a forward-solve oracle.
    """

    g: np.ndarray
    h: np.ndarray
    rest: np.ndarray
    v: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.g.shape[0]


def unwrapped_phase(ratio: np.ndarray) -> np.ndarray:
    """Phase continued along axis 0 from the principal value at the first sample."""
    return np.unwrap(np.angle(ratio), axis=0)


def log_ratio(u: np.ndarray, u_inc: np.ndarray, ks) -> np.ndarray:
    """``v = log(u / u_inc) / k^2`` with the phase unwrapped along ``k`` (axis 0)."""
    ks = np.asarray(ks, dtype=float)
    ratio = u / u_inc
    mag = np.abs(ratio)
    bad = ~(mag > RATIO_FLOOR)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"u/u_inc vanishes at k={ks[idx[0]]:.6g}, node {idx[1:]}")
    theta = unwrapped_phase(ratio)
    k2 = (ks ** 2).reshape((-1,) + (1,) * (u.ndim - 1))
    return (np.log(mag) + 1j * theta) / k2


def fourier_coefficients(v: np.ndarray, b: BasisSystem, ks, rule: str = "gregory") -> np.ndarray:
    """``v_n = int v(., k) Psi_n(k) dk`` from samples at uniformly spaced ``ks``."""
    ks = np.asarray(ks, dtype=float)
    if v.shape[0] != ks.size:
        raise ValueError("v must be sampled at every wavenumber")
    wP = b.values(ks) * uniform_weights(ks, rule)  # (N, K)
    return np.tensordot(wP, v, axes=(1, 0))


def synthesize(coeffs: np.ndarray, b: BasisSystem, ks) -> np.ndarray:
    """``sum_n coeffs[n] Psi_n(k)`` for every ``k``; result has ``k`` on axis 0."""
    P = b.values(np.asarray(ks, dtype=float))  # (N, K)
    return np.tensordot(P.T, coeffs, axes=(1, 0))


def cauchy_coefficients(cd: CauchyData, b: BasisSystem, ks, grid: Grid3D, x0,
                        rule: str = "gregory") -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``g_m`` and ``h_m`` on the bottom face from field/derivative data.

    With ``cd.layers`` present, ``h_m`` is the one-sided ``d/dz`` of the
    log-ratio coefficients on those layers; the incident phase, which the grid
    resolves poorly at high ``k``, then cancels before differencing. Otherwise
    ``h_m`` comes from ``du/dz / u`` minus the incident log-derivative taken
    through the same stencil.
    """
    ks = np.asarray(ks, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if np.any(~(np.abs(cd.g) > RATIO_FLOOR)):
        raise ValueError("field data vanish on the bottom face")
    near = np.stack(grid.mesh(), axis=-1)[:, :, :3]
    uinc3 = incident_wave(near, x0, ks)
    if cd.layers is not None:
        v3 = fourier_coefficients(log_ratio(cd.layers, uinc3, ks), b, ks, rule)
        return v3[..., 0], dz_bottom(v3, grid.h)
    g_m = fourier_coefficients(log_ratio(cd.g, uinc3[..., 0], ks), b, ks, rule)
    kk = ks.reshape(-1, 1, 1)
    bracket = cd.h / cd.g - dz_bottom(uinc3, grid.h) / uinc3[..., 0]
    h_m = fourier_coefficients(bracket / kk ** 2, b, ks, rule)
    return g_m, h_m


def complement_data(stack: CoefficientStack) -> CoefficientStack:
    """Zero value targets on the unmeasured part of the boundary; face data untouched."""
    return replace(stack, rest=np.zeros_like(stack.rest))


def make_stack(g_m: np.ndarray, h_m: np.ndarray, v: np.ndarray | None = None) -> CoefficientStack:
    N, n, _ = g_m.shape
    return complement_data(CoefficientStack(g_m, h_m, np.zeros((N, n, n, n), dtype=complex), v))


def stack_from_volume(v_n: np.ndarray, h: float) -> CoefficientStack:
    """Stack whose boundary data are the exact traces of volumetric coefficients."""
    return CoefficientStack(v_n[..., 0].copy(), dz_bottom(v_n, h), v_n.copy(), v_n.copy())


def trace_ratio(v_n: np.ndarray, grid: Grid3D) -> float:
    """RMS of ``v_n`` on the unmeasured boundary over its RMS on the bottom face."""
    s = slab_index(grid, grid.h)
    rest = np.sqrt(np.mean(np.abs(v_n[:, s.rest]) ** 2))
    face = np.sqrt(np.mean(np.abs(v_n[:, s.gamma]) ** 2))
    return float(rest / face)
