"""Dense linear algebra on float64 numpy arrays.

Matrices are plain 2-D ``numpy.ndarray`` objects. Every routine here is pure:
inputs are never modified in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(a) -> np.ndarray:
    """Validate ``a`` as a finite, non-empty 2-D array and return a float64 copy-free view."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T``.

    ``u`` is m x p, ``v`` is n x p with p = min(m, n); ``sigma`` is sorted
    non-increasing.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def matmul(a, b) -> np.ndarray:
    """Dense product with a fixed accumulation order.

    Each output entry is accumulated as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``,
    the order of a naive triple loop, so results are reproducible bit for bit.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def seeded_random(rows: int, cols: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Standard-normal matrix times ``scale`` drawn from numpy's PCG64 generator."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((rows, cols)) * scale


def _jacobi_orthogonalize(w: np.ndarray, max_sweeps: int, tol: float):
    # One-sided (Hestenes) Jacobi: rotate column pairs of w until mutually orthogonal.
    cols = w.shape[1]
    v = np.eye(cols)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                wp = w[:, p]
                wq = w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                new_q = s * wp + c * wq
                w[:, p] = new_p
                w[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            return w, v
    raise NumericError(
        f"one-sided Jacobi SVD did not converge after {max_sweeps} sweeps",
        step=max_sweeps,
    )


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace columns not in `filled` with unit vectors orthogonal to everything kept so far.
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(filled)]
    for j in np.flatnonzero(~filled):
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for b in basis:
                cand -= (b @ cand) * b
            for b in basis:
                cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-6:
                u[:, j] = cand / norm
                basis.append(u[:, j])
                break
    return u


def svd(a, max_sweeps: int = MAX_SWEEPS, tol: float = JACOBI_TOL) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    The taller orientation is decomposed (the input is transposed when it has
    more columns than rows). Column signs are fixed so that the largest
    magnitude entry of each left singular vector is non-negative.

    Raises
    ------
    NumericError
        If the rotations have not converged after ``max_sweeps`` sweeps.
    """
    a = as_matrix(a)
    flipped = a.shape[0] < a.shape[1]
    w = (a.T if flipped else a).copy()
    w, v = _jacobi_orthogonalize(w, max_sweeps, tol)

    sigma = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]

    cutoff = sigma[0] * w.shape[0] * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    filled = sigma > cutoff
    u = np.zeros_like(w)
    u[:, filled] = w[:, filled] / sigma[filled]
    sigma = np.where(filled, sigma, 0.0)
    if not np.all(filled):
        u = _complete_basis(u, filled)

    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs

    if flipped:
        # a.T = u s v^T  =>  a = v s u^T; re-apply the sign rule to the new left factor.
        u, v = v, u
        pivot = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
        u = u * signs
        v = v * signs
    return SvdResult(u=u, sigma=sigma, v=v)


def truncate(s: SvdResult, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the rank-``r`` truncation into factors ``(U_r, V_r)`` with ``U_r @ V_r.T`` optimal.

    The singular values are shared evenly: both factors carry ``sqrt(sigma)``.
    """
    p = s.sigma.shape[0]
    if not 1 <= r <= p:
        raise ValueError(f"rank {r} outside [1, {p}]")
    root = np.sqrt(s.sigma[:r])
    return s.u[:, :r] * root, s.v[:, :r] * root


def tail_error(s: SvdResult, r: int) -> float:
    """Frobenius error of the best rank-``r`` approximation, from the discarded singular values."""
    tail = s.sigma[r:]
    return float(np.sqrt(np.sum(tail * tail)))
