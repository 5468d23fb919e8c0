"""Synthetic data: Lippmann-Schwinger forward solver, modulus data, noise.

The total field solves ``u = u_inc + k^2 V[(c - 1) u]`` with ``V`` the volume
potential of the outgoing kernel ``exp(ik|x-y|) / (4 pi |x-y|)``. On a grid
with spacing ``h`` the potential is the midpoint sum over nodes; the singular
self-cell is replaced by the integral over the ball of equal volume.
Since ``c - 1`` vanishes off the inclusions, unknowns live only on the support;
the field anywhere else follows by one more direct summation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import Grid3D, SlabIndex, boundary_mask

log = logging.getLogger(__name__)


class ForwardSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# media


@dataclass(frozen=True)
class Cylinder:
    """Vertical circular cylinder ``(x-cx)^2 + (y-cy)^2 < radius^2, |z-cz| < half_height``."""

    value: float
    center: tuple[float, float, float]
    radius: float
    half_height: float

    def contains(self, X, Y, Z):
        cx, cy, cz = self.center
        return ((X - cx) ** 2 + (Y - cy) ** 2 < self.radius ** 2) & (np.abs(Z - cz) < self.half_height)

    def distance(self, X, Y, Z):
        cx, cy, cz = self.center
        dr = np.maximum(np.hypot(X - cx, Y - cy) - self.radius, 0.0)
        dz = np.maximum(np.abs(Z - cz) - self.half_height, 0.0)
        return np.hypot(dr, dz)

    def to_dict(self) -> dict:
        return {"kind": "cylinder", "value": self.value, "center": list(self.center),
                "radius": self.radius, "half_height": self.half_height}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``|x_j - c_j| < half_extents_j``."""

    value: float
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def contains(self, X, Y, Z):
        inside = np.ones(np.shape(X), dtype=bool)
        for q, c, e in zip((X, Y, Z), self.center, self.half_extents):
            inside &= np.abs(q - c) < e
        return inside

    def distance(self, X, Y, Z):
        d2 = 0.0
        for q, c, e in zip((X, Y, Z), self.center, self.half_extents):
            d2 = d2 + np.maximum(np.abs(q - c) - e, 0.0) ** 2
        return np.sqrt(d2)

    def to_dict(self) -> dict:
        return {"kind": "box", "value": self.value, "center": list(self.center),
                "half_extents": list(self.half_extents)}


def inclusion_from_dict(d: dict):
    if d["kind"] == "cylinder":
        return Cylinder(float(d["value"]), tuple(d["center"]), float(d["radius"]), float(d["half_height"]))
    if d["kind"] == "box":
        return Box(float(d["value"]), tuple(d["center"]), tuple(d["half_extents"]))
    raise ValueError(f"unknown inclusion kind {d['kind']!r}")


SCENARIOS: dict[str, tuple] = {
    "vacuum": (),
    "test1": (Cylinder(5.0, (0.0, 0.0, -0.65), 0.25, 0.05),),
    "test2": (
        Cylinder(5.0, (0.5, 0.0, -0.65), 0.25, 0.05),
        Cylinder(4.5, (-0.5, 0.0, -0.65), 0.25, 0.05),
    ),
    # max{0.25|x|, |y -+ 0.5|} < 0.2  <=>  |x| < 0.8, |y -+ 0.5| < 0.2
    "test3": (
        Box(3.2, (0.0, -0.5, -0.65), (0.8, 0.2, 0.05)),
        Box(3.2, (0.0, 0.5, -0.65), (0.8, 0.2, 0.05)),
    ),
}


@dataclass(frozen=True)
class MediumModel:
    grid: Grid3D
    c: np.ndarray = field(repr=False)
    inclusions: tuple = ()

    @property
    def peak(self) -> float:
        """Largest nominal coefficient value of the inclusions (1 for vacuum)."""
        return max([1.0] + [inc.value for inc in self.inclusions])


def rasterize(inclusions: Sequence, grid: Grid3D, subsamples: int = 4) -> np.ndarray:
    """Cell-averaged coefficient: each node gets the mean of ``c`` over its cell.

    Cells are cubes of side ``h`` centred on the nodes, sampled at
    ``subsamples**3`` midpoints.
    """
    c = np.ones(grid.shape)
    if not inclusions:
        return c
    h = grid.h
    off = ((np.arange(subsamples) + 0.5) / subsamples - 0.5) * h
    X, Y, Z = grid.mesh()
    for inc in inclusions:
        frac = np.zeros(grid.shape)
        # skip nodes whose cell cannot touch the inclusion
        near = inc.distance(X, Y, Z) < h
        if not near.any():
            continue
        xs, ys, zs = X[near], Y[near], Z[near]
        acc = np.zeros(xs.shape)
        for ox in off:
            for oy in off:
                for oz in off:
                    acc += inc.contains(xs + ox, ys + oy, zs + oz)
        frac[near] = acc / subsamples ** 3
        c += frac * (inc.value - 1.0)
    return c


def make_medium(grid: Grid3D, inclusions: Sequence = (), subsamples: int = 4) -> MediumModel:
    c = rasterize(inclusions, grid, subsamples)
    if np.any(c < 1.0):
        raise ValueError("coefficient must satisfy c >= 1")
    if np.any(c[boundary_mask(grid.shape)] != 1.0):
        raise ValueError("coefficient must equal 1 on the boundary of the domain")
    return MediumModel(grid, c, tuple(inclusions))


def scenario_medium(name: str, grid: Grid3D, subsamples: int = 4) -> MediumModel:
    try:
        inclusions = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return make_medium(grid, inclusions, subsamples)


def distance_to_support(inclusions: Sequence, X, Y, Z) -> np.ndarray:
    if not inclusions:
        return np.full(np.shape(X), np.inf)
    return np.min([inc.distance(X, Y, Z) for inc in inclusions], axis=0)


# ---------------------------------------------------------------------------
# fields


def _points(x) -> np.ndarray:
    if isinstance(x, Grid3D):
        return np.stack(x.mesh(), axis=-1)
    return np.asarray(x, dtype=float)


def incident_wave(x, x0, ks) -> np.ndarray:
    """Point-source field ``exp(ik|x-x0|) / (4 pi |x-x0|)``.

    ``x`` is a :class:`Grid3D` or an array of points ``(..., 3)``; the result
    has shape ``(len(ks),) + x.shape[:-1]``.
    """
    x0 = np.asarray(x0, dtype=float)
    if isinstance(x, Grid3D) and np.all(np.abs(x0) <= x.R):
        raise ValueError(f"source {x0.tolist()} lies inside the domain")
    pts = _points(x)
    r = np.linalg.norm(pts - x0, axis=-1)
    if np.any(r == 0):
        raise ValueError("incident wave evaluated at the source")
    ks = np.atleast_1d(np.asarray(ks, dtype=float))
    kr = ks.reshape((-1,) + (1,) * r.ndim) * r
    return np.exp(1j * kr) / (4.0 * np.pi * r)


def self_cell_weight(k: float, h: float) -> complex:
    """Integral of the kernel over the ball with volume ``h**3`` centred at the pole."""
    rho = (3.0 * h ** 3 / (4.0 * np.pi)) ** (1.0 / 3.0)
    return (np.exp(1j * k * rho) * (1.0 - 1j * k * rho) - 1.0) / k ** 2


def potential_matrix(tgt: np.ndarray, src: np.ndarray, k: float, h: float) -> np.ndarray:
    """Discrete volume potential weights ``(len(tgt), len(src))``.

    Off-diagonal entries are ``G(|x-y|) h^3``; coincident pairs get the
    self-cell weight.
    """
    d = np.sqrt(((tgt[:, None, :] - src[None, :, :]) ** 2).sum(-1))
    same = d < 1e-9 * h
    d[same] = 1.0
    M = np.exp(1j * k * d) / (4.0 * np.pi * d) * h ** 3
    M[same] = self_cell_weight(k, h)
    return M


def volume_potential(src: np.ndarray, values: np.ndarray, tgt: np.ndarray, k: float, h: float,
                     chunk: int = 2048) -> np.ndarray:
    """Direct summation ``V[values](tgt)`` for a density given at nodes ``src``."""
    out = np.empty(len(tgt), dtype=complex)
    for s in range(0, len(tgt), chunk):
        out[s:s + chunk] = potential_matrix(tgt[s:s + chunk], src, k, h) @ values
    return out


@dataclass
class ForwardSolution:
    """Solution on the support; evaluates the total field at arbitrary points."""

    k: float
    x0: np.ndarray
    h: float
    support_points: np.ndarray
    contrast: np.ndarray  # c - 1 on the support
    u_support: np.ndarray
    residual: float
    iterations: int

    def total_field(self, pts: np.ndarray) -> np.ndarray:
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, 3)
        u = incident_wave(flat, self.x0, [self.k])[0]
        if self.support_points.size:
            u = u + self.k ** 2 * volume_potential(
                self.support_points, self.contrast * self.u_support, flat, self.k, self.h)
        return u.reshape(shape)


def solve_support(m: MediumModel, k: float, x0, tol: float = 1e-8, maxiter: int = 2000) -> ForwardSolution:
    g = m.grid
    mask = m.c != 1.0
    pts = np.stack([a[mask] for a in g.mesh()], axis=1)
    q = (m.c - 1.0)[mask]
    x0 = np.asarray(x0, dtype=float)
    if not mask.any():
        return ForwardSolution(k, x0, g.h, pts, q, np.zeros(0, complex), 0.0, 0)
    rhs = incident_wave(pts, x0, [k])[0]
    K = potential_matrix(pts, pts, k, g.h) * (k ** 2 * q)[None, :]
    n = len(q)
    A = LinearOperator((n, n), matvec=lambda v: v - K @ v, dtype=complex)
    its = [0]

    def count(_):
        its[0] += 1

    u, info = gmres(A, rhs, rtol=tol, atol=0.0, restart=min(n, 200), maxiter=maxiter,
                    callback=count, callback_type="pr_norm")
    res = float(np.linalg.norm(rhs - (u - K @ u)) / np.linalg.norm(rhs))
    if info != 0 or res > 10 * tol:
        raise ForwardSolveError(f"Lippmann-Schwinger solve at k={k:.6g} did not converge: "
                                f"relative residual {res:.3e} after {its[0]} iterations")
    log.debug("forward k=%.4f support=%d iterations=%d residual=%.2e", k, n, its[0], res)
    return ForwardSolution(k, x0, g.h, pts, q, u, res, its[0])


def solve_forward(m: MediumModel, k: float, x0, tol: float = 1e-8, maxiter: int = 2000,
                  targets: np.ndarray | None = None) -> np.ndarray:
    """Total field at the nodes of ``m.grid`` (or at ``targets``, shape ``(..., 3)``)."""
    sol = solve_support(m, k, x0, tol, maxiter)
    if targets is None:
        targets = np.stack(m.grid.mesh(), axis=-1)
    return sol.total_field(np.asarray(targets, dtype=float))


def born_first_term(m: MediumModel, k: float, x0, targets: np.ndarray) -> np.ndarray:
    """``k^2 V[(c - 1) u_inc]`` at the targets."""
    g = m.grid
    mask = m.c != 1.0
    pts = np.stack([a[mask] for a in g.mesh()], axis=1)
    q = (m.c - 1.0)[mask]
    flat = targets.reshape(-1, 3)
    uinc = incident_wave(pts, x0, [k])[0]
    return (k ** 2 * volume_potential(pts, q * uinc, flat, k, g.h)).reshape(targets.shape[:-1])


# ---------------------------------------------------------------------------
# measurements


@dataclass
class PhaselessData:
    """Modulus samples on the slab: ``values[q, i, j, t]`` for ``ks[q]``."""

    values: np.ndarray
    ks: np.ndarray
    delta: float = 0.0
    seed: int | None = None


def _solve_one(args):
    m, k, x0, targets, tol = args
    return solve_support(m, k, x0, tol).total_field(targets)


def measure(m: MediumModel, x0, ks, slab: SlabIndex, tol: float = 1e-8, volume: bool = False,
            jobs: int = 1):
    """Noiseless modulus data on the slab of the (inversion) grid ``slab.grid``.

    Returns ``(PhaselessData, u_slab)`` and, with ``volume=True``, also the
    complex total field on every node of ``slab.grid``.
    """
    g = slab.grid
    P = np.stack(g.mesh(), axis=-1)
    targets = P if volume else P[:, :, : slab.layers]
    ks = np.asarray(ks, dtype=float)
    tasks = [(m, float(k), x0, targets, tol) for k in ks]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            fields = list(ex.map(_solve_one, tasks))
    else:
        fields = [_solve_one(t) for t in tasks]
    u = np.stack(fields)
    u_slab = u[..., : slab.layers]
    data = PhaselessData(np.abs(u_slab), ks.copy())
    if volume:
        return data, u_slab, u
    return data, u_slab


def add_noise(f: PhaselessData, delta: float, seed: int) -> PhaselessData:
    """Multiplicative uniform noise ``f (1 + delta * U[-1, 1])``, reproducible from ``seed``."""
    if delta < 0:
        raise ValueError("noise level must be nonnegative")
    if delta == 0:
        return PhaselessData(f.values.copy(), f.ks.copy(), 0.0, seed)
    rng = np.random.default_rng(seed)
    noisy = np.maximum(f.values * (1.0 + delta * rng.uniform(-1.0, 1.0, size=f.values.shape)), 0.0)
    return PhaselessData(noisy, f.ks.copy(), float(delta), seed)
