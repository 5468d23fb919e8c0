"""Polynomial-exponential orthonormal basis on a wavenumber interval.

The basis is the Gram-Schmidt orthonormalisation of ``k**j * exp(k)``,
``j = 0..N-1``, on ``[k_lo, k_hi]``. Internally each function is stored as
``p_n(t) * exp(k)`` with ``p_n`` a Legendre series in the affine variable
``t = (2k - k_lo - k_hi) / (k_hi - k_lo)``; this spans the same space as the
monomials but avoids the cancellation that monomial coefficients suffer for
N around 7. Derivatives are exact: ``d/dk [p(t) e^k] = (p(t) + p'(t) dt/dk) e^k``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as leg
from numpy.polynomial import polynomial as poly


@dataclass(frozen=True)
class BasisSystem:
    k_lo: float
    k_hi: float
    N: int
    coef: np.ndarray = field(repr=False)  # (N, N) Legendre coefficients, row n -> Psi_n
    quad_k: np.ndarray = field(repr=False)
    quad_w: np.ndarray = field(repr=False)

    def _t(self, k):
        return (2.0 * np.asarray(k, dtype=float) - self.k_lo - self.k_hi) / (self.k_hi - self.k_lo)

    def values(self, k) -> np.ndarray:
        """All basis functions at ``k``; shape ``(N,) + k.shape``."""
        k = np.asarray(k, dtype=float)
        p = leg.legval(self._t(k), self.coef.T)
        return p * np.exp(k)

    def derivatives(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        t = self._t(k)
        dcoef = leg.legder(self.coef.T, axis=0) * (2.0 / (self.k_hi - self.k_lo))
        p = leg.legval(t, self.coef.T)
        dp = leg.legval(t, dcoef) if self.N > 1 else np.zeros_like(p)
        return (p + dp) * np.exp(k)

    def gram(self, quad_k=None, quad_w=None) -> np.ndarray:
        k = self.quad_k if quad_k is None else quad_k
        w = self.quad_w if quad_w is None else quad_w
        V = self.values(k)
        return (V * w) @ V.T

    def monomial_coefficients(self) -> np.ndarray:
        """Coefficients ``c[n, j]`` with ``Psi_n(k) = sum_j c[n, j] k**j e**k``.

        Exported for reference only; evaluating through these loses accuracy.
        """
        a = 2.0 / (self.k_hi - self.k_lo)
        b = -(self.k_lo + self.k_hi) / (self.k_hi - self.k_lo)
        out = np.zeros((self.N, self.N))
        for n in range(self.N):
            pt = leg.leg2poly(self.coef[n])  # power series in t
            pk = np.zeros(1)
            lin = np.array([b, a])
            acc = np.array([1.0])
            for j, cj in enumerate(pt):
                pk = poly.polyadd(pk, cj * acc)
                acc = poly.polymul(acc, lin)
            out[n, : len(pk)] = pk[: self.N]
        return out


def gauss_rule(k_lo: float, k_hi: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leg.leggauss(order)
    half = 0.5 * (k_hi - k_lo)
    return half * x + 0.5 * (k_hi + k_lo), half * w


def build_basis(k_lo: float, k_hi: float, N: int, quad_order: int = 64) -> BasisSystem:
    """Modified Gram-Schmidt (with one reorthogonalisation pass) under Gauss-Legendre quadrature."""
    if not (k_hi > k_lo > 0):
        raise ValueError(f"need 0 < k_lo < k_hi, got [{k_lo}, {k_hi}]")
    if N < 1:
        raise ValueError("N must be at least 1")
    if quad_order < 2 * N:
        raise ValueError(f"quad_order={quad_order} cannot resolve products of degree {2 * N - 2}")
    qk, qw = gauss_rule(k_lo, k_hi, quad_order)
    t = (2.0 * qk - k_lo - k_hi) / (k_hi - k_lo)
    E = np.exp(qk)
    V = leg.legvander(t, N - 1) * E[:, None]  # raw system sampled at the nodes

    def ip(a, b):
        return np.sum(qw * a * b)

    coef = np.zeros((N, N))
    vals = np.zeros((N, qk.size))
    for n in range(N):
        c = np.zeros(N)
        c[n] = 1.0
        v = V[:, n].copy()
        for _ in range(2):
            for q in range(n):
                r = ip(v, vals[q])
                c -= r * coef[q]
                v -= r * vals[q]
        nrm = np.sqrt(ip(v, v))
        if not np.isfinite(nrm) or nrm <= 0:
            raise ValueError(f"raw system degenerate at n={n}")
        coef[n] = c / nrm
        vals[n] = v / nrm
    # canonical sign: Psi_n positive at k_hi
    sgn = np.sign(leg.legval(1.0, coef.T))
    coef *= np.where(sgn == 0, 1.0, sgn)[:, None]

    basis = BasisSystem(float(k_lo), float(k_hi), int(N), coef, qk, qw)
    check_k, check_w = gauss_rule(k_lo, k_hi, 2 * quad_order)
    resid = np.abs(basis.gram(check_k, check_w) - np.eye(N)).max()
    if resid > 1e-8:
        raise ValueError(f"loss of orthogonality {resid:.2e} for N={N}; reduce N")
    return basis


def eval_basis(b: BasisSystem, n: int, k):
    """``(Psi_n(k), Psi_n'(k))`` for the 0-based index ``n``."""
    if not 0 <= n < b.N:
        raise IndexError(f"basis index {n} outside 0..{b.N - 1}")
    return b.values(k)[n], b.derivatives(k)[n]


@dataclass(frozen=True)
class ReducedTensors:
    """Integrals of the reduced system.

    ``S[m, n] = int Psi_n' Psi_m``, ``A[m, n, l] = int 2k Psi_n Psi_m (Psi_l + k Psi_l')``,
    ``beta[m, n] = int k Psi_n' Psi_m``.
    """

    S: np.ndarray
    A: np.ndarray
    beta: np.ndarray
    basis: BasisSystem = field(repr=False)

    @property
    def N(self) -> int:
        return self.S.shape[0]


def compute_tensors(b: BasisSystem, quad_order: int | None = None) -> ReducedTensors:
    if quad_order is None:
        k, w = b.quad_k, b.quad_w
    else:
        k, w = gauss_rule(b.k_lo, b.k_hi, quad_order)
    P = b.values(k)
    D = b.derivatives(k)
    S = np.einsum("q,nq,mq->mn", w, D, P)
    beta = np.einsum("q,nq,mq->mn", w, k * D, P)
    A = np.einsum("q,nq,mq,lq->mnl", 2.0 * k * w, P, P, P + k * D)
    return ReducedTensors(S, A, beta, b)


def assemble_b(t: ReducedTensors, x: np.ndarray, x0, min_dist: float = 0.0) -> np.ndarray:
    """Vector coefficients ``b_mn(x)`` at points ``x`` of shape ``(..., 3)``.

    Returns a complex array ``(N, N, 3) + x.shape[:-1]``.
    """
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(x0, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r <= min_dist) or np.any(r == 0):
        raise ValueError("evaluation point too close to the source")
    e = np.moveaxis(d / r[..., None], -1, 0)  # (3, ...)
    inv_r = 1.0 / r
    N = t.N
    extra = (None,) * r.ndim
    eye = np.eye(N)
    c_unit = 2j * (t.beta + eye)  # multiplies the unit direction
    c_r = -2.0 * t.S  # multiplies direction / |x - x0|
    out = (c_unit[(..., None) + extra] + c_r[(..., None) + extra] * inv_r) * e[None, None]
    return out


def uniform_weights(ks: np.ndarray, rule: str = "gregory", order: int = 8) -> np.ndarray:
    """Quadrature weights on uniformly spaced samples ``ks``.

    ``rule="trapezoid"`` is the composite trapezoid; ``"gregory"`` adds
    symmetric end corrections on ``order`` points at each end, chosen so the
    rule is exact for polynomials of degree ``< 2*order``.
    """
    ks = np.asarray(ks, dtype=float)
    n = ks.size - 1
    if n < 1:
        raise ValueError("need at least two samples")
    h = (ks[-1] - ks[0]) / n
    if not np.allclose(np.diff(ks), h, rtol=1e-9, atol=1e-12):
        raise ValueError("samples are not uniformly spaced")
    w = np.ones(n + 1)
    order = min(order, n // 2)
    if rule == "trapezoid" or order < 2:
        w[[0, -1]] = 0.5
        return w * h
    if rule != "gregory":
        raise ValueError(f"unknown rule {rule!r}")
    m = n / 2.0
    s = (np.arange(n + 1.0) - m) / m
    M = np.array([[2.0 * s[i] ** (2 * j) for i in range(order)] for j in range(order)])
    rhs = np.array([2.0 * m / (2 * j + 1) - np.sum(s ** (2 * j)) for j in range(order)])
    c = np.linalg.solve(M, rhs)
    w[:order] += c
    w[::-1][:order] += c
    return w * h


def tensor_report(t: ReducedTensors) -> dict:
    b = t.basis
    return {
        "k_lo": b.k_lo,
        "k_hi": b.k_hi,
        "N": b.N,
        "quad_order": int(b.quad_k.size),
        "orthonormality_residual": float(np.abs(b.gram() - np.eye(b.N)).max()),
        "S": t.S.tolist(),
        "S_condition": float(np.linalg.cond(t.S)),
        "beta": t.beta.tolist(),
    }


def dump_report(t: ReducedTensors, path) -> None:
    with open(path, "w") as fh:
        json.dump(tensor_report(t), fh, indent=2)
