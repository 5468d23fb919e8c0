"""Coefficient recovery from the reduced unknowns and reconstruction metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .basis import BasisSystem, uniform_weights
from .grid import Grid3D, grad_interior, lap_interior
from .reduction import synthesize

COMPONENT_THRESHOLD = 0.3


def assemble_v(phi: np.ndarray, b: BasisSystem, ks) -> np.ndarray:
    """``v(x, k) = sum_n phi_n(x) Psi_n(k)``; ``k`` on axis 0."""
    return synthesize(phi, b, ks)


def _bracket(v: np.ndarray, k: float, grid: Grid3D, e: np.ndarray, inv_r: np.ndarray) -> np.ndarray:
    h = grid.h
    G = grad_interior(v, h)
    return (lap_interior(v, h) + k * k * np.sum(G * G, axis=0)
            + 2.0 * (1j * k - inv_r) * np.sum(G * e, axis=0))


def recover_c(v: np.ndarray, grid: Grid3D, x0, ks, rule: str = "gregory", clamp: bool = True) -> np.ndarray:
    """Average over ``k`` of the pointwise coefficient identity.

    ``c = 1 - Re[lap v + k^2 (grad v)^2 + 2 (ik - 1/|x-x0|) grad v . e]`` with
    ``e`` the unit vector from the source and ``(grad v)^2`` the unconjugated
    square. Boundary nodes are set to 1; with ``clamp`` values below 1 are raised to 1.
    """
    ks = np.asarray(ks, dtype=float)
    w = uniform_weights(ks, rule) / (ks[-1] - ks[0])
    pts = np.stack(grid.mesh(), axis=-1)[1:-1, 1:-1, 1:-1]
    d = pts - np.asarray(x0, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    e = np.moveaxis(d / r[..., None], -1, 0)
    inv_r = 1.0 / r
    acc = np.zeros(pts.shape[:-1])
    for q, k in enumerate(ks):
        acc += w[q] * _bracket(v[q], k, grid, e, inv_r).real
    c = np.ones(grid.shape)
    c[1:-1, 1:-1, 1:-1] = 1.0 - acc
    if clamp:
        c = np.maximum(c, 1.0)
    return c


@dataclass
class ReconstructionResult:
    c: np.ndarray = field(repr=False)
    max_value: float
    max_location: tuple
    components: list
    peak_error: float | None = None
    outside_max: float | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "c"}
        d["max_location"] = list(self.max_location)
        return d


def components(c: np.ndarray, grid: Grid3D, threshold: float = COMPONENT_THRESHOLD) -> list[dict]:
    """Face-connected node sets with ``c > 1 + threshold (max - 1)``, largest maximum first."""
    cmax = float(c.max())
    if cmax <= 1.0:
        return []
    lab, n = ndimage.label(c > 1.0 + threshold * (cmax - 1.0))
    X, Y, Z = grid.mesh()
    out = []
    for i in range(1, n + 1):
        sel = lab == i
        vals = c[sel]
        j = np.argmax(vals)
        out.append({
            "max": float(vals[j]),
            "max_location": [float(X[sel][j]), float(Y[sel][j]), float(Z[sel][j])],
            "centroid": [float(np.mean(X[sel])), float(np.mean(Y[sel])), float(np.mean(Z[sel]))],
            "nodes": int(sel.sum()),
        })
    out.sort(key=lambda d: -d["max"])
    return out


def metrics(c: np.ndarray, grid: Grid3D, c_true_peak: float | None = None, dist: np.ndarray | None = None,
            margin: float = 0.2, threshold: float = COMPONENT_THRESHOLD) -> ReconstructionResult:
    """Peak value and location, components, and optional ground-truth comparisons.

    ``c_true_peak`` gives the relative peak error ``|max c - peak| / peak``.
    ``dist`` (distance of every node to the true support) gives the largest
    value of ``c`` farther than ``margin`` from the support.
    """
    i = np.unravel_index(np.argmax(c), c.shape)
    loc = tuple(float(a[i]) for a in grid.mesh())
    res = ReconstructionResult(c, float(c[i]), loc, components(c, grid, threshold))
    if c_true_peak is not None:
        res.peak_error = float(abs(res.max_value - c_true_peak) / c_true_peak)
    if dist is not None:
        far = dist > margin
        res.outside_max = float(c[far].max()) if far.any() else 1.0
    return res
