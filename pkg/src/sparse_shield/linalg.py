"""Dense kernels: blocked MVM, Gram-Schmidt QR, LS solve, truncated SVD, inverse.

Matrices are plain 2-D numpy arrays. Storage at module boundaries is float32;
everything that accumulates does so in float64.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

RANK_TOL = 1e-7


class RankDeficientError(np.linalg.LinAlgError):
    """A column collapsed to (numerically) zero during orthogonalization."""


class ConvergenceError(np.linalg.LinAlgError):
    pass


def default_threads() -> int:
    return max(1, int(os.environ.get("SPARSE_SHIELD_THREADS", "1")))


@dataclass(frozen=True)
class MvmPlan:
    """Row-block workers and inner dot-product chunk length."""

    par_rows: int = 1
    simd_width: int = 8

    def __post_init__(self):
        if self.par_rows < 1 or self.simd_width < 1:
            raise ValueError("par_rows and simd_width must be >= 1")


def _chunked_cols(AT: np.ndarray, x: np.ndarray, simd: int) -> np.ndarray:
    """Column-major core: AT is (cols, rows) float64, x is float64 of length cols."""
    cols, rows = AT.shape
    if cols == 0:
        return np.zeros(rows)
    nchunks = -(-cols // simd)
    prod = np.zeros((nchunks * simd, rows))
    np.multiply(AT, x[:, None], out=prod[:cols])
    prod = prod.reshape(nchunks, simd, rows)
    # fixed tree: left to right inside each chunk, then left to right across chunks
    partial = prod[:, 0, :].copy()
    for k in range(1, simd):
        partial += prod[:, k, :]
    total = partial[0].copy()
    for c in range(1, nchunks):
        total += partial[c]
    return total


def mvm_t(AT: np.ndarray, x: np.ndarray, plan: MvmPlan | None = None) -> np.ndarray:
    """float64 ``AT.T @ x`` with the fixed chunk tree, for a (cols, rows) layout.

    ``AT`` should already be a C-contiguous float64 array holding float32
    values; this is the hot path used by the pursuit loop.
    """
    plan = plan or MvmPlan()
    x = np.asarray(x, dtype=np.float32).astype(np.float64).reshape(-1)
    if AT.ndim != 2 or AT.shape[0] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A^T {AT.shape}, x {x.shape}")
    rows = AT.shape[1]
    workers = min(plan.par_rows, max(rows, 1))
    if workers == 1:
        return _chunked_cols(AT, x, plan.simd_width)
    bounds = np.linspace(0, rows, workers + 1).astype(int)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(
            lambda b: _chunked_cols(AT[:, b[0] : b[1]], x, plan.simd_width),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(parts))


def mvm(A: np.ndarray, x: np.ndarray, plan: MvmPlan | None = None) -> np.ndarray:
    """y = A @ x in float32 with a deterministic reduction order.

    Each output row is accumulated in float64 per SIMD chunk, then left to
    right across chunks, so ``plan.par_rows`` only changes which worker
    owns a row and never the bits of the result.
    """
    A = np.asarray(A, dtype=np.float32)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    AT = np.ascontiguousarray(A.T, dtype=np.float64)
    return mvm_t(AT, x, plan).astype(np.float32)


def qr_append(Q_prev: np.ndarray, R_prev: np.ndarray, new_col: np.ndarray, tol: float = RANK_TOL):
    """Extend a thin QR factorization by one column (modified Gram-Schmidt).

    Returns float64 ``(Q, R)`` of shapes ``(l, k+1)`` and ``(k+1, k+1)``.
    """
    Q_prev = np.asarray(Q_prev, dtype=np.float64)
    R_prev = np.asarray(R_prev, dtype=np.float64)
    eps = np.array(new_col, dtype=np.float64).reshape(-1)
    l, k = Q_prev.shape if Q_prev.size else (eps.shape[0], 0)
    if eps.shape[0] != l:
        raise ValueError(f"new column has length {eps.shape[0]}, expected {l}")
    R = np.zeros((k + 1, k + 1))
    R[:k, :k] = R_prev
    orig = np.linalg.norm(eps)
    for j in range(k):
        q = Q_prev[:, j]
        R[j, k] = q @ eps
        eps -= R[j, k] * q
    norm = np.linalg.norm(eps)
    if norm <= tol * orig or norm == 0.0:
        raise RankDeficientError(
            f"column {k} collapsed to {norm:.3g} (original norm {orig:.3g})"
        )
    R[k, k] = norm
    Q = np.empty((l, k + 1))
    Q[:, :k] = Q_prev
    Q[:, k] = eps / norm
    return Q, R


def mgs_qr(A: np.ndarray, tol: float = RANK_TOL):
    A = np.asarray(A, dtype=np.float64)
    rows, cols = A.shape
    if cols > rows:
        raise ValueError(f"need cols <= rows, got {A.shape}")
    Q = np.zeros((rows, 0))
    R = np.zeros((0, 0))
    for j in range(cols):
        Q, R = qr_append(Q, R, A[:, j], tol)
    return Q, R


def back_substitute(R: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve R v = y for upper-triangular R (y may be a vector or matrix)."""
    R = np.asarray(R, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    n = R.shape[0]
    diag = np.abs(np.diag(R))
    if n and diag.min() <= 1e-12 * max(diag.max(), 1e-300):
        raise RankDeficientError("R has a zero or tiny diagonal entry")
    v = np.zeros_like(y)
    for i in range(n - 1, -1, -1):
        v[i] = (y[i] - R[i, i + 1 :] @ v[i + 1 :]) / R[i, i]
    return v


def ls_solve_qr(Q: np.ndarray, R: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin_v ||b - Q R v||_2 = R^{-1} Q^T b."""
    Q = np.asarray(Q, dtype=np.float64)
    return back_substitute(R, Q.T @ np.asarray(b, dtype=np.float64))


def _round_robin(n: int):
    """Yield n-1 (n even) rounds of disjoint index pairs covering every pair once."""
    players = list(range(n))
    for _ in range(n - 1):
        half = n // 2
        yield np.array(players[:half]), np.array(players[half:][::-1])
        players = [players[0]] + [players[-1]] + players[1:-1]


def jacobi_eigh(S: np.ndarray, tol: float = 1e-7, max_sweeps: int = 64):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order so that each round touches a
    set of disjoint (p, q) pairs at once. Returns ``(eigenvalues, V)`` sorted
    by descending eigenvalue, with ``S = V diag(w) V^T``.
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V
    size = n + (n % 2)
    scale = np.linalg.norm(A)
    target = tol * scale

    def off(M):
        return np.sqrt(max(np.sum(M * M) - np.sum(np.diag(M) ** 2), 0.0))

    for _ in range(max_sweeps):
        if off(A) < target or scale == 0.0:
            break
        for p, q in _round_robin(size):
            keep = (p < n) & (q < n)
            p, q = p[keep], q[keep]
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    else:
        if off(A) >= target:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def energy_rank(singulars: np.ndarray, energy: float) -> int:
    """Smallest k whose leading squared singular values reach ``energy`` of the total."""
    sq = np.asarray(singulars, dtype=np.float64) ** 2
    total = sq.sum()
    if total == 0:
        return 1
    cum = np.cumsum(sq)
    # relative slack absorbs rounding in the cumulative sum
    return int(np.searchsorted(cum, energy * total * (1 - 1e-12)) + 1)


def truncated_svd(X: np.ndarray, energy: float = 0.9):
    """Leading left singular vectors of ``X`` (l x n) keeping ``energy`` of sum sigma^2.

    Computed from the l x l Gram matrix X X^T. Returns ``(U_r, singulars, r)``
    with the r retained singular values in descending order.
    """
    if not 0 < energy <= 1:
        raise ValueError("energy must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("empty matrix")
    w, V = jacobi_eigh(X @ X.T)
    singulars = np.sqrt(np.clip(w, 0.0, None))
    r = min(energy_rank(singulars, energy), X.shape[0])
    U = V[:, :r]
    # fix the sign so that the largest-magnitude entry of each vector is positive
    idx = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[idx, np.arange(r)])
    return U, singulars[:r], r


def default_ridge(S: np.ndarray) -> float:
    d = S.shape[0]
    return max(1e-6 * float(np.trace(S)) / d, 1e-12)


def sym_inverse(S: np.ndarray, ridge: float | None = None) -> np.ndarray:
    """(S + ridge I)^{-1} through MGS QR."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got {S.shape}")
    if ridge is None:
        ridge = default_ridge(S)
    M = S + ridge * np.eye(S.shape[0])
    # the rank check here only guards true singularity; conditioning is handled by the ridge
    Q, R = mgs_qr(M, tol=1e-14)
    return back_substitute(R, Q.T)
