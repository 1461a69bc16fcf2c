"""Dense SVD by one-sided (Hestenes) Jacobi, plus subspace utilities.

This is deliberately self-contained: it is the reference the online-PCA
path is checked against, so it shares nothing with that path except numpy.
Columns are rotated pairwise until mutually orthogonal; rotations for
disjoint pairs are applied together using a round-robin tournament order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .matrix import NonFiniteError, ShapeError, as_matrix

MAX_SWEEPS = 100
_EPS = np.finfo(np.float64).eps


class SvdConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SvdResult:
    """Thin SVD ``A = U diag(sigma) V^T`` with ``r = min(n, m)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    sweeps: int = 0

    def top_k(self, k: int) -> np.ndarray:
        return self.U[:, :k].copy()

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = len(self.sigma) if k is None else k
        return (self.U[:, :k] * self.sigma[:k]) @ self.V[:, :k].T


@lru_cache(maxsize=64)
def _round_robin(m: int):
    """Pairings covering every (p, q), p < q, once per sweep; disjoint per round."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def _input_hash(A: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(A).tobytes()).hexdigest()[:12]


def _jacobi_tall(A: np.ndarray, max_sweeps: int):
    """One-sided Jacobi on a tall matrix (n >= m). Returns (U_raw, V, sweeps)."""
    n, m = A.shape
    # Work on rows of the transposes so every gathered pair is contiguous.
    Ut = np.array(A.T, order="C", copy=True)
    Vt = np.eye(m)
    if m == 1:
        return Ut.T.copy(), Vt, 0
    tol = max(n, m) * _EPS
    scale = np.linalg.norm(A)
    zero2 = (1e-14 * scale) ** 2
    rounds = _round_robin(m)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            up = Ut[p]
            uq = Ut[q]
            alpha = np.einsum("ij,ij->i", up, up)
            beta = np.einsum("ij,ij->i", uq, uq)
            gamma = np.einsum("ij,ij->i", up, uq)
            mask = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > zero2)
            if not mask.any():
                continue
            rotated = True
            g = np.where(mask, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(mask, 1.0 / np.sqrt(1.0 + t * t), 1.0)[:, None]
            s = np.where(mask, c[:, 0] * t, 0.0)[:, None]
            Ut[p] = c * up - s * uq
            Ut[q] = s * up + c * uq
            vp = Vt[p]
            vq = Vt[q]
            Vt[p] = c * vp - s * vq
            Vt[q] = s * vp + c * vq
        if not rotated:
            return Ut.T.copy(), Vt.T.copy(), sweep
    raise SvdConvergenceError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps (input {A.shape}, hash {_input_hash(A)})"
    )


def _complete_orthonormal(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` by unit vectors orthogonal to the rest."""
    n, r = U.shape
    basis = [U[:, j] for j in range(r) if keep[j]]
    out = U.copy()
    candidates = iter(np.eye(n))
    for j in range(r):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 0.5:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def svd(A, max_sweeps: int = MAX_SWEEPS, method: str = "jacobi") -> SvdResult:
    """Thin SVD with sigma non-increasing and a deterministic sign choice.

    Each column of ``U`` is flipped so that its largest-magnitude entry is
    positive (``V`` follows), so equal inputs give equal outputs.
    ``method="lapack"`` delegates the factorization to numpy (same output
    conventions) for matrices where pure-numpy Jacobi sweeps are too slow.
    """
    A = as_matrix(A, "A")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("svd input contains NaN or Inf")
    if method == "lapack":
        U, sigma, Vt = np.linalg.svd(A, full_matrices=False)
        return _fix_signs(U, sigma, Vt.T, 0)
    if method != "jacobi":
        raise ValueError(f"unknown svd method {method!r}")
    n, m = A.shape
    transposed = n < m
    work = A.T if transposed else A

    Uraw, V, sweeps = _jacobi_tall(work, max_sweeps)
    sigma = np.linalg.norm(Uraw, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    Uraw = Uraw[:, order]
    V = V[:, order]

    scale = sigma[0] if sigma.size else 0.0
    keep = sigma > 1e-14 * max(scale, np.finfo(float).tiny)
    U = np.zeros_like(Uraw)
    U[:, keep] = Uraw[:, keep] / sigma[keep]
    if not keep.all():
        U = _complete_orthonormal(U, keep)

    if transposed:
        U, V = V, U
    return _fix_signs(U, sigma, V, sweeps)


def _fix_signs(U, sigma, V, sweeps) -> SvdResult:
    U, V = U.copy(), V.copy()
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1
    V[:, flip] *= -1
    return SvdResult(U, sigma, V, sweeps)


def top_k_left(A, k: int) -> np.ndarray:
    """Top-k left singular vectors of A (n x k)."""
    A = as_matrix(A, "A")
    if not 1 <= k <= A.shape[0]:
        raise ShapeError(f"rank k={k} must lie in [1, {A.shape[0]}]")
    res = svd(A)
    if k <= res.U.shape[1]:
        return res.top_k(k)
    # k exceeds min(n, m): pad with an orthonormal completion.
    U = np.zeros((A.shape[0], k))
    U[:, : res.U.shape[1]] = res.U
    keep = np.arange(k) < res.U.shape[1]
    return _complete_orthonormal(U, keep)


def tail_energy(A, k: int) -> float:
    """sqrt(sum_{i>k} sigma_i^2): the best rank-k approximation error."""
    s = svd(A).sigma
    return float(np.sqrt(np.sum(s[k:] ** 2)))


def _orthonormalize(P: np.ndarray, name: str) -> np.ndarray:
    Q, R = np.linalg.qr(P)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-12 * max(d.max(), 1e-300):
        raise ValueError(f"{name} is rank deficient")
    return Q


def principal_angles(P1, P2) -> np.ndarray:
    """Principal angles (ascending, radians) between span(P1) and span(P2).

    Small angles come from the sines, large ones from the cosines, so both
    ends stay accurate.
    """
    P1 = as_matrix(P1, "P1")
    P2 = as_matrix(P2, "P2")
    if P1.shape != P2.shape:
        raise ShapeError(f"principal_angles: {P1.shape} vs {P2.shape}")
    Q1 = _orthonormalize(P1, "P1")
    Q2 = _orthonormalize(P2, "P2")
    C = Q1.T @ Q2
    cos = np.sort(np.clip(svd(C).sigma, 0.0, 1.0))[::-1]
    sin = np.sort(np.clip(svd(Q2 - Q1 @ C).sigma, 0.0, 1.0))
    from_cos = np.arccos(cos)
    from_sin = np.arcsin(sin)
    return np.where(from_sin < np.pi / 4, from_sin, from_cos)
