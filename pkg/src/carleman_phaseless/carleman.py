"""Carleman-weighted least squares for the reduced coefficient system.

For a candidate ``phi`` of shape ``(N, n, n, n)`` (complex) the discrete functional is

    J(phi) = sum_m [ h^3 sum_interior w(z) |R_m(phi)|^2
                     + lam^4 e^{2 lam (R + r)^2} h^2 sum_bottom (|phi_m - g_m|^2 + |dz phi_m - h_m|^2)
                     + lam^4 h^2 sum_rest w(z) |phi_m - rest_m|^2
                     + eps h^3 sum_interior (|phi_m|^2 + |grad phi_m|^2 + |lap phi_m|^2) ]

with ``w(z) = exp(2 lam (z - r)^2)`` and the residual

    R_m = sum_n S[m,n] lap phi_n + sum_{n,l} A[m,n,l] grad phi_n . grad phi_l
          + sum_n b_mn . grad phi_n - rhs_m.

``rhs`` is zero for measured data; it only exists to manufacture exact test
problems. Gradients are returned in the complex form ``dJ/dRe + i dJ/dIm``,
so the real directional derivative along ``d`` is ``Re sum(conj(G) d)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .basis import ReducedTensors, assemble_b
from .grid import (Grid3D, dz_bottom, dz_bottom_T, grad_interior, grad_interior_T,
                   lap_interior, lap_interior_T, slab_index)
from .reduction import CoefficientStack

log = logging.getLogger(__name__)

BLOCKS = ("interior", "bottom", "rest", "regularization")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class CarlemanParams:
    lam: float = 1.1
    r: float | None = None  # weight offset; None means 2R
    eps: float = 10 ** -5.75
    eta: float = 1.0  # first trial step
    maxiter: int = 2000
    gtol: float = 1e-8  # relative to the first gradient
    ftol: float = 1e-13  # relative decrease below which descent stops
    metric: str = "gauss-newton"  # "gauss-newton", "quadratic" or "euclidean"
    M: float | None = None  # admissible radius, reported only
    cg_tol: float = 1e-10  # 1e-8 leaves ~1e-5 spread between CG starts
    cg_maxiter: int = 200000
    linear_solver: str = "direct"  # "direct" or "cg"
    continuation: tuple = (0.5,)  # smaller lam values solved first by :func:`solve`; values >= lam are dropped

    def __post_init__(self):
        if not self.lam >= 0 or not self.eps > 0 or not self.eta > 0:
            raise ValueError("need lam >= 0, eps > 0, eta > 0")
        path = tuple(float(v) for v in self.continuation)
        if any(v <= 0 for v in path) or list(path) != sorted(path):
            raise ValueError("continuation values must be positive and increasing")
        object.__setattr__(self, "continuation", tuple(v for v in path if v < self.lam))
        if self.metric not in ("gauss-newton", "quadratic", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class CarlemanProblem:
    grid: Grid3D
    params: CarlemanParams
    r: float
    S: np.ndarray
    A: np.ndarray
    b: np.ndarray = field(repr=False)  # (N, N, 3, m, m, m)
    w_int: np.ndarray = field(repr=False)  # (m,) z-weights on interior layers
    w_bottom: float
    w_rest: np.ndarray = field(repr=False)  # (n, n, n), zero off the rest nodes
    stack: CoefficientStack = field(repr=False)
    rhs: np.ndarray | None = field(default=None, repr=False)
    _lin: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        n = self.grid.n
        return (self.N, n, n, n)


def carleman_weight(z, lam: float, r: float):
    return np.exp(2.0 * lam * (np.asarray(z) - r) ** 2)


def _weights(grid: Grid3D, lam: float, r: float):
    s = slab_index(grid, grid.h)
    Z = grid.mesh()[2]
    w_int = carleman_weight(grid.coords[1:-1], lam, r)
    w_rest = np.where(s.rest, lam ** 4 * carleman_weight(Z, lam, r), 0.0)
    w_bottom = lam ** 4 * float(np.exp(2.0 * lam * (grid.R + r) ** 2))
    return w_int, w_bottom, w_rest


def build_problem(grid: Grid3D, t: ReducedTensors, stack: CoefficientStack, params: CarlemanParams,
                  x0, rhs: np.ndarray | None = None) -> CarlemanProblem:
    R = grid.R
    r = 2.0 * R if params.r is None else float(params.r)
    if not r > R:
        raise ValueError(f"weight offset r={r} must exceed R={R}")
    if stack.N != t.N:
        raise ValueError("coefficient stack and tensors disagree on N")
    pts = np.stack(grid.mesh(), axis=-1)[1:-1, 1:-1, 1:-1]
    b = assemble_b(t, pts, x0, min_dist=grid.h)
    w_int, w_bottom, w_rest = _weights(grid, params.lam, r)
    return CarlemanProblem(grid, params, r, t.S.copy(), t.A.copy(), b, w_int, w_bottom, w_rest, stack, rhs)


def with_lam(prob: CarlemanProblem, lam: float) -> CarlemanProblem:
    """Same problem with the Carleman parameter replaced (weights rebuilt, caches dropped)."""
    params = replace(prob.params, lam=lam)
    w_int, w_bottom, w_rest = _weights(prob.grid, lam, prob.r)
    return replace(prob, params=params, w_int=w_int, w_bottom=w_bottom, w_rest=w_rest, _lin={})


# ---------------------------------------------------------------------------
# functional and gradient


def _residual(phi, prob: CarlemanProblem, nonlinear: bool = True):
    h = prob.grid.h
    L = lap_interior(phi, h)  # (N, m, m, m)
    G = grad_interior(phi, h)  # (N, 3, m, m, m)
    R = np.einsum("mn,nxyz->mxyz", prob.S, L)
    R += np.einsum("mnjxyz,njxyz->mxyz", prob.b, G)
    if nonlinear:
        Q = np.einsum("njxyz,ljxyz->nlxyz", G, G)
        R += np.einsum("mnl,nlxyz->mxyz", prob.A, Q)
    if prob.rhs is not None:
        R -= prob.rhs
    return R, L, G


def eval_functional(phi: np.ndarray, prob: CarlemanProblem, blocks: bool = False, nonlinear: bool = True):
    """Discrete weighted functional; with ``blocks=True`` returns the per-block breakdown."""
    h = prob.grid.h
    st = prob.stack
    R, L, G = _residual(phi, prob, nonlinear)
    wz = prob.w_int[None, None, None, :]
    out = {
        "interior": h ** 3 * float(np.sum(wz * np.abs(R) ** 2)),
        "bottom": prob.w_bottom * h ** 2 * float(
            np.sum(np.abs(phi[..., 0] - st.g) ** 2) + np.sum(np.abs(dz_bottom(phi, h) - st.h) ** 2)),
        "rest": h ** 2 * float(np.sum(prob.w_rest * np.abs(phi - st.rest) ** 2)),
        "regularization": prob.params.eps * h ** 3 * float(
            np.sum(np.abs(phi[:, 1:-1, 1:-1, 1:-1]) ** 2) + np.sum(np.abs(G) ** 2) + np.sum(np.abs(L) ** 2)),
    }
    total = sum(out[k] for k in BLOCKS)
    if blocks:
        out["total"] = total
        return out
    return total


def eval_gradient(phi: np.ndarray, prob: CarlemanProblem, nonlinear: bool = True) -> np.ndarray:
    h = prob.grid.h
    st = prob.stack
    eps = prob.params.eps
    R, L, G = _residual(phi, prob, nonlinear)
    rho = 2.0 * h ** 3 * prob.w_int[None, None, None, :] * R  # (N, m, m, m)
    # linearised coefficient of grad(delta_p) in R_m
    C = prob.b
    if nonlinear:
        Asym = prob.A + prob.A.transpose(0, 2, 1)
        C = C + np.einsum("mpl,ljxyz->mpjxyz", Asym, G)
    out = lap_interior_T(np.einsum("mp,mxyz->pxyz", prob.S, rho), h)
    out += grad_interior_T(np.einsum("mpjxyz,mxyz->pjxyz", np.conj(C), rho), h)
    # bottom face
    wb = 2.0 * prob.w_bottom * h ** 2
    out[..., 0] += wb * (phi[..., 0] - st.g)
    out += dz_bottom_T(wb * (dz_bottom(phi, h) - st.h), h, phi.shape)
    # remaining boundary
    out += 2.0 * h ** 2 * prob.w_rest * (phi - st.rest)
    # regularization
    we = 2.0 * eps * h ** 3
    out[:, 1:-1, 1:-1, 1:-1] += we * phi[:, 1:-1, 1:-1, 1:-1]
    out += we * (grad_interior_T(G, h) + lap_interior_T(L, h))
    return out


def h2_norm_sq(phi: np.ndarray, h: float) -> float:
    """Discrete H^2 norm squared: values, gradients and Laplacians on interior nodes."""
    return h ** 3 * float(np.sum(np.abs(phi[..., 1:-1, 1:-1, 1:-1]) ** 2)
                          + np.sum(np.abs(grad_interior(phi, h)) ** 2)
                          + np.sum(np.abs(lap_interior(phi, h)) ** 2))


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Real inner product of complex arrays viewed as real vectors."""
    return float(np.real(np.vdot(a, b)))


# ---------------------------------------------------------------------------
# the convex quadratic part as a sparse least-squares system


def _ops_1d(n: int, h: float):
    E = sp.eye(n, format="csr")[1:-1]
    D1 = (sp.eye(n, k=1, format="csr") - sp.eye(n, k=-1, format="csr"))[1:-1] / (2.0 * h)
    D2 = (sp.eye(n, k=1, format="csr") + sp.eye(n, k=-1, format="csr") - 2.0 * sp.eye(n, format="csr"))[1:-1] / h ** 2
    return E, D1, D2


def _kron3(a, b, c):
    return sp.kron(sp.kron(a, b, format="csr"), c, format="csr")


def linear_system(prob: CarlemanProblem):
    """Sparse ``(M, y)`` with ``||M phi - y||^2`` equal to the functional without the quadratic term."""
    if "M" in prob._lin:
        return prob._lin["M"], prob._lin["y"]
    g = prob.grid
    n, h, N = g.n, g.h, prob.N
    nn = n ** 3
    E, D1, D2 = _ops_1d(n, h)
    I = sp.eye(n, format="csr")
    Lap = _kron3(D2, E, E) + _kron3(E, D2, E) + _kron3(E, E, D2)
    Gs = [_kron3(D1, E, E), _kron3(E, D1, E), _kron3(E, E, D1)]
    Eint = _kron3(E, E, E)
    m3 = Lap.shape[0]
    wrow = np.sqrt(h ** 3 * np.broadcast_to(prob.w_int[None, None, :], (n - 2,) * 3).ravel())
    Wr = sp.diags(wrow)
    blocks = []
    for mi in range(N):
        row = []
        for ni in range(N):
            blk = prob.S[mi, ni] * Lap
            for j in range(3):
                blk = blk + sp.diags(prob.b[mi, ni, j].ravel()) @ Gs[j]
            row.append(Wr @ blk)
        blocks.append(row)
    M_int = sp.bmat(blocks, format="csr")
    y_int = np.zeros(N * m3, dtype=complex)
    if prob.rhs is not None:
        y_int = (prob.rhs.reshape(N, -1) * wrow).ravel()

    # bottom face: value and one-sided d/dz
    sel = np.arange(nn).reshape(n, n, n)
    bottom = sel[:, :, 0].ravel()
    nb = bottom.size
    P0 = sp.csr_matrix((np.ones(nb), (np.arange(nb), bottom)), shape=(nb, nn))
    P1 = sp.csr_matrix((np.ones(nb), (np.arange(nb), sel[:, :, 1].ravel())), shape=(nb, nn))
    P2 = sp.csr_matrix((np.ones(nb), (np.arange(nb), sel[:, :, 2].ravel())), shape=(nb, nn))
    Dz = (-3.0 * P0 + 4.0 * P1 - P2) / (2.0 * h)
    sb = np.sqrt(prob.w_bottom * h ** 2)
    rest_idx = np.flatnonzero(prob.w_rest.ravel())
    nr = rest_idx.size
    Pr = sp.csr_matrix((np.ones(nr), (np.arange(nr), rest_idx)), shape=(nr, nn))
    sr = np.sqrt(h ** 2 * prob.w_rest.ravel()[rest_idx])
    se = np.sqrt(prob.params.eps * h ** 3)
    Reg = sp.vstack([Eint, *Gs, Lap], format="csr") * se
    st = prob.stack
    bnd = sp.vstack([sb * P0, sb * Dz, sp.diags(sr) @ Pr, Reg], format="csr")
    M = sp.vstack([M_int, sp.block_diag([bnd] * N, format="csr")], format="csr")
    y_bnd = []
    for mi in range(N):
        y_bnd += [sb * st.g[mi].ravel(), sb * st.h[mi].ravel(), sr * st.rest[mi].ravel()[rest_idx],
                  np.zeros(Reg.shape[0])]
    y = np.concatenate([y_int] + y_bnd)
    prob._lin["M"], prob._lin["y"] = M, y
    return M, y


def _normal_matrix(prob: CarlemanProblem):
    if "H" not in prob._lin:
        M, _ = linear_system(prob)
        prob._lin["H"] = (M.conj().T @ M).tocsc()
    return prob._lin["H"]


class HermitianFactor:
    """Sparse Cholesky factor of a Hermitian positive definite matrix (CHOLMOD).

    A semidefinite matrix (nodes no block constrains, e.g. at ``lam = 0``) is
    shifted by ``1e-12`` times its largest diagonal entry, with a warning.
    """

    def __init__(self, H):
        from cvxopt import cholmod, matrix, spmatrix

        cholmod.options["supernodal"] = 2
        for shift in (0.0, 1e-12 * float(np.abs(H.diagonal()).max())):
            low = sp.tril(H + shift * sp.eye(H.shape[0], format="csc")).tocoo()
            A = spmatrix(matrix(low.data.astype(complex)), matrix(low.row.astype(np.int64)),
                         matrix(low.col.astype(np.int64)), H.shape, "z")
            del low
            self._F = cholmod.symbolic(A, uplo="L")
            try:
                cholmod.numeric(A, self._F)
                break
            except ArithmeticError:
                if shift:
                    raise
                log.warning("normal matrix is singular; factorising with a diagonal shift")
        self.shape = H.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        from cvxopt import cholmod, matrix

        x = matrix(np.ascontiguousarray(rhs, dtype=complex).reshape(-1, 1))
        cholmod.solve(self._F, x)
        return np.array(x).ravel()


def _factor(prob: CarlemanProblem) -> HermitianFactor:
    if "chol" not in prob._lin:
        prob._lin["chol"] = HermitianFactor(_normal_matrix(prob))
    return prob._lin["chol"]


def init_guess(prob: CarlemanProblem, start: np.ndarray | None = None, solver: str | None = None) -> np.ndarray:
    """Minimiser of the functional without the quadratic gradient term.

    Solves the normal equations ``M^H M phi = M^H y`` either by sparse Cholesky
    (``"direct"``) or by Jacobi-preconditioned conjugate gradients (``"cg"``);
    both are checked against the relative residual ``params.cg_tol``.
    """
    solver = solver or prob.params.linear_solver
    M, y = linear_system(prob)
    H = _normal_matrix(prob)
    rhs = M.conj().T @ y
    nrm = np.linalg.norm(rhs)
    if nrm == 0:
        return np.zeros(prob.shape, dtype=complex)
    if solver == "direct":
        x = _factor(prob).solve(rhs)
        # one step of iterative refinement
        x += _factor(prob).solve(rhs - H @ x)
    else:
        d = H.diagonal().real
        Mpre = LinearOperator(H.shape, matvec=lambda v: v / d, dtype=complex)
        x0 = None if start is None else start.ravel()
        x, info = cg(H, rhs, x0=x0, rtol=prob.params.cg_tol, atol=0.0,
                     maxiter=prob.params.cg_maxiter, M=Mpre)
    res = np.linalg.norm(rhs - H @ x) / nrm
    if res > prob.params.cg_tol:
        raise SolverError(f"linearised problem not solved: relative residual {res:.3e}")
    return x.reshape(prob.shape)


# ---------------------------------------------------------------------------
# descent


@dataclass
class DescentLog:
    entries: list = field(default_factory=list)
    converged: bool = False
    message: str = ""


def jacobian(phi: np.ndarray, prob: CarlemanProblem):
    """Sparse Jacobian of the weighted residual vector at ``phi``.

    The residual is holomorphic in ``phi``, so its linearisation is the
    linear system with ``b`` replaced by ``b + (A + A^T) grad phi``.
    """
    Asym = prob.A + prob.A.transpose(0, 2, 1)
    C = prob.b + np.einsum("mpl,ljxyz->mpjxyz", Asym, grad_interior(phi, prob.grid.h))
    return linear_system(replace(prob, b=C, _lin={}))[0]


def _direction(G: np.ndarray, prob: CarlemanProblem, phi: np.ndarray) -> np.ndarray:
    if prob.params.metric == "euclidean":
        return G
    # Riesz representative of the derivative in the metric 2 K^H K, where K is
    # the system matrix of the convex quadratic part or the Jacobian at phi
    if prob.params.metric == "quadratic":
        F = _factor(prob)
    else:
        K = jacobian(phi, prob)
        F = HermitianFactor((K.conj().T @ K).tocsc())
    return (F.solve(G.ravel()) / 2.0).reshape(G.shape)


def minimize(phi0: np.ndarray, prob: CarlemanProblem, callback=None):
    """Gradient descent ``phi <- phi - eta * D(grad J)`` with backtracking.

    ``D`` is the identity (``metric="euclidean"``), the inverse Hessian of
    the convex quadratic part (``metric="quadratic"``) or the inverse
    Gauss-Newton matrix at the current iterate (``metric="gauss-newton"``). Each iteration starts
    from twice the last accepted step (capped at ``params.eta``) and halves it
    until the functional decreases. ``callback(entry, phi)`` sees every
    accepted iterate. Returns ``(phi, DescentLog)``.
    """
    p = prob.params
    phi = phi0.copy()
    J = eval_functional(phi, prob)
    G = eval_gradient(phi, prob)
    g0 = np.abs(G).max()
    eta = p.eta
    dlog = DescentLog()

    def record(it, J, G, eta):
        entry = {"iteration": it, "J": J, "grad_norm": float(np.abs(G).max()), "step": eta}
        entry.update({k: v for k, v in eval_functional(phi, prob, blocks=True).items() if k in BLOCKS})
        if p.M is not None:
            entry["h2_norm"] = float(np.sqrt(h2_norm_sq(phi, prob.grid.h)))
        dlog.entries.append(entry)
        if callback is not None:
            callback(entry, phi)

    record(0, J, G, 0.0)
    if g0 == 0:
        dlog.converged, dlog.message = True, "zero gradient"
        return phi, dlog
    for it in range(1, p.maxiter + 1):
        D = _direction(G, prob, phi)
        slope = inner(G, D)
        if slope <= 0:
            dlog.message = "not a descent direction"
            break
        eta = min(2.0 * eta, p.eta)
        while True:
            trial = phi - eta * D
            Jt = eval_functional(trial, prob)
            if Jt < J:
                break
            eta *= 0.5
            if eta < 1e-30 * p.eta:
                dlog.message = "step size underflow"
                break
        if Jt >= J:
            break
        decrease = J - Jt
        phi, J = trial, Jt
        G = eval_gradient(phi, prob)
        record(it, J, G, eta)
        if np.abs(G).max() <= p.gtol * g0:
            dlog.converged, dlog.message = True, "gradient tolerance reached"
            break
        if decrease <= p.ftol * J:
            dlog.converged, dlog.message = True, "relative decrease below ftol"
            break
    else:
        dlog.message = "iteration cap reached"
    return phi, dlog


def solve(prob: CarlemanProblem, phi0: np.ndarray | None = None, callback=None):
    """Initializer followed by descent along the parameter path ``continuation + (lam,)``.

    Each stage starts from the previous minimiser; the initializer (when
    ``phi0`` is None) is computed at the first value of the path. Log entries
    carry the ``lam`` they were produced with and a running iteration count.
    Returns ``(phi, DescentLog, phi_init)``.
    """
    path = prob.params.continuation + (prob.params.lam,)
    first = with_lam(prob, path[0]) if len(path) > 1 else prob
    phi_init = init_guess(first) if phi0 is None else phi0
    phi = phi_init
    dlog = DescentLog()
    offset = 0
    for lam in path:
        stage = prob if lam == prob.params.lam else with_lam(prob, lam)

        def cb(entry, x, lam=lam, offset=offset, first=lam == path[0]):
            restart = entry["iteration"] == 0 and not first
            entry.update(lam=lam, iteration=entry["iteration"] + offset)
            if callback is not None and not restart:
                callback(entry, x)

        phi, part = minimize(phi, stage, callback=cb)
        dlog.entries += part.entries if not dlog.entries else part.entries[1:]
        offset = dlog.entries[-1]["iteration"]
        dlog.converged, dlog.message = part.converged, part.message
    return phi, dlog, phi_init


def bregman_probe(prob: CarlemanProblem, pairs: int, scale: float, rng: np.random.Generator,
                  smooth: int = 2):
    """Bregman divergence minus ``eps * ||u - w||^2_H2`` for random candidate pairs.

    Candidates are random complex fields, box-smoothed ``smooth`` times and
    scaled to max modulus ``scale``. Nonnegative margins are consistent with
    convexity along the sampled pairs.
    """
    margins = []
    for _ in range(pairs):
        u = random_candidate(prob.shape, scale, rng, smooth)
        w = random_candidate(prob.shape, scale, rng, smooth)
        d = u - w
        bd = eval_functional(u, prob) - eval_functional(w, prob) - inner(eval_gradient(w, prob), d)
        margins.append(bd - prob.params.eps * h2_norm_sq(d, prob.grid.h))
    return np.array(margins)


def random_candidate(shape, scale: float, rng: np.random.Generator, smooth: int = 2) -> np.ndarray:
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    for _ in range(smooth):
        y = x.copy()
        for ax in (1, 2, 3):
            y = y + np.roll(x, 1, axis=ax) + np.roll(x, -1, axis=ax)
        x = y / 7.0
    return scale * x / np.abs(x).max()
