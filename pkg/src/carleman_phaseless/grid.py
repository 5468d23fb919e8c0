"""Uniform Cartesian grid on the cube (-R, R)^3 and finite-difference stencils.

Fields are plain numpy arrays of shape ``(n, n, n)`` indexed ``[i, j, t]``
(x, y, z), C-ordered, so the flat layout is lexicographic in ``(i, j, t)``.
Vector fields carry the component axis first: ``(3, n, n, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid3D:
    """Nodes ``x_i = -R + i*h`` (0-based) per axis with ``h = 2R/(n-1)``."""

    R: float
    n: int

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.n - 1)

    @cached_property
    def coords(self) -> np.ndarray:
        c = -self.R + self.h * np.arange(self.n)
        c[-1] = self.R  # exact endpoint symmetry
        return c

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n ** 3

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.coords, self.coords, self.coords, indexing="ij"))

    def points(self) -> np.ndarray:
        """Node coordinates as an ``(n**3, 3)`` array in lexicographic order."""
        X, Y, Z = self.mesh()
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def refine(self, factor: int) -> "Grid3D":
        """Grid whose nodes contain this grid's nodes (spacing ``h/factor``)."""
        return Grid3D(self.R, (self.n - 1) * factor + 1)


def build_grid(R: float, n: int) -> Grid3D:
    if n < 3:
        raise ValueError(f"need at least 3 nodes per axis, got n={n}")
    if not R > 0:
        raise ValueError(f"half-width must be positive, got R={R}")
    return Grid3D(float(R), int(n))


@dataclass(frozen=True)
class SlabIndex:
    """Node sets of the measurement slab, the measured face and the rest of the boundary.

    ``slab`` marks nodes with ``z < -R + L`` (all x, y); those nodes occupy the
    first ``layers`` z-indices. ``gamma`` is the full bottom face ``t = 0``;
    ``rest`` is every other boundary node, so ``gamma`` and ``rest`` partition
    the boundary.
    """

    grid: Grid3D
    L: float
    layers: int
    slab: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    rest: np.ndarray = field(repr=False)


def slab_index(grid: Grid3D, L: float) -> SlabIndex:
    if not L > 0:
        raise ValueError("slab thickness must be positive")
    z = grid.coords
    # open slab: strict inequality, small guard against round-off in the node coordinates
    layers = int(np.count_nonzero(z < -grid.R + L - 1e-9 * grid.h))
    slab = np.zeros(grid.shape, dtype=bool)
    slab[:, :, :layers] = True
    boundary = np.zeros(grid.shape, dtype=bool)
    boundary[[0, -1], :, :] = True
    boundary[:, [0, -1], :] = True
    boundary[:, :, [0, -1]] = True
    gamma = np.zeros(grid.shape, dtype=bool)
    gamma[:, :, 0] = True
    rest = boundary & ~gamma
    return SlabIndex(grid, float(L), layers, slab, gamma, rest)


def boundary_mask(shape: tuple[int, ...]) -> np.ndarray:
    m = np.ones(shape, dtype=bool)
    m[1:-1, 1:-1, 1:-1] = False
    return m


# ---------------------------------------------------------------------------
# full-array operators


def laplacian_fd(phi: np.ndarray, h: float) -> np.ndarray:
    """7-point Laplacian on interior nodes, zero on the boundary."""
    out = np.zeros_like(phi)
    out[1:-1, 1:-1, 1:-1] = lap_interior(phi, h)
    return out


def gradient_fd(phi: np.ndarray, h: float) -> np.ndarray:
    """Central differences inside, second-order one-sided on boundary faces."""
    return np.stack(np.gradient(phi, h, edge_order=2))


def dz_bottom(phi: np.ndarray, h: float) -> np.ndarray:
    """One-sided second-order ``d/dz`` on the face ``t = 0``."""
    return (-3.0 * phi[..., 0] + 4.0 * phi[..., 1] - phi[..., 2]) / (2.0 * h)


def dz_bottom_T(q: np.ndarray, h: float, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.result_type(q, float))
    out[..., 0] = -3.0 * q / (2.0 * h)
    out[..., 1] = 4.0 * q / (2.0 * h)
    out[..., 2] = -q / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# interior-only operators and their transposes; the leading axes of the input
# are batch axes, the last three are spatial


def lap_interior(phi: np.ndarray, h: float) -> np.ndarray:
    c = phi[..., 1:-1, 1:-1, 1:-1]
    s = (
        phi[..., 2:, 1:-1, 1:-1] + phi[..., :-2, 1:-1, 1:-1]
        + phi[..., 1:-1, 2:, 1:-1] + phi[..., 1:-1, :-2, 1:-1]
        + phi[..., 1:-1, 1:-1, 2:] + phi[..., 1:-1, 1:-1, :-2]
    )
    return (s - 6.0 * c) / (h * h)


def lap_interior_T(q: np.ndarray, h: float) -> np.ndarray:
    shape = q.shape[:-3] + tuple(s + 2 for s in q.shape[-3:])
    out = np.zeros(shape, dtype=q.dtype)
    q = q / (h * h)
    out[..., 1:-1, 1:-1, 1:-1] -= 6.0 * q
    out[..., 2:, 1:-1, 1:-1] += q
    out[..., :-2, 1:-1, 1:-1] += q
    out[..., 1:-1, 2:, 1:-1] += q
    out[..., 1:-1, :-2, 1:-1] += q
    out[..., 1:-1, 1:-1, 2:] += q
    out[..., 1:-1, 1:-1, :-2] += q
    return out


def grad_interior(phi: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient on interior nodes, component axis inserted at -4."""
    s = 1.0 / (2.0 * h)
    gx = (phi[..., 2:, 1:-1, 1:-1] - phi[..., :-2, 1:-1, 1:-1]) * s
    gy = (phi[..., 1:-1, 2:, 1:-1] - phi[..., 1:-1, :-2, 1:-1]) * s
    gz = (phi[..., 1:-1, 1:-1, 2:] - phi[..., 1:-1, 1:-1, :-2]) * s
    return np.stack([gx, gy, gz], axis=-4)


def grad_interior_T(q: np.ndarray, h: float) -> np.ndarray:
    """Transpose of :func:`grad_interior`; ``q`` has the component axis at -4."""
    shape = q.shape[:-4] + tuple(s + 2 for s in q.shape[-3:])
    out = np.zeros(shape, dtype=q.dtype)
    s = 1.0 / (2.0 * h)
    qx, qy, qz = (q[..., c, :, :, :] * s for c in range(3))
    out[..., 2:, 1:-1, 1:-1] += qx
    out[..., :-2, 1:-1, 1:-1] -= qx
    out[..., 1:-1, 2:, 1:-1] += qy
    out[..., 1:-1, :-2, 1:-1] -= qy
    out[..., 1:-1, 1:-1, 2:] += qz
    out[..., 1:-1, 1:-1, :-2] -= qz
    return out
