"""Orthogonal matching pursuit with an incrementally grown QR factorization."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from time import perf_counter
from typing import NamedTuple

import numpy as np

from .linalg import MvmPlan, RankDeficientError, back_substitute, mvm_t, qr_append

STOP_TOL = 1e-7


@dataclass
class SparseCode:
    support: list[int]
    coefficients: np.ndarray
    residual: np.ndarray
    reconstruction: np.ndarray
    residual_norms: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class OmpState:
    """Selected atoms with their thin QR factors, plus the current residual."""

    support: tuple[int, ...]
    Q: np.ndarray
    R: np.ndarray
    residual: np.ndarray

    @classmethod
    def start(cls, x: np.ndarray) -> "OmpState":
        x = np.asarray(x, dtype=np.float64)
        return cls((), np.zeros((x.shape[0], 0)), np.zeros((0, 0)), x.copy())


def _atoms(D) -> np.ndarray:
    return np.asarray(getattr(D, "atoms", D))


def _atoms64(D) -> np.ndarray:
    cached = getattr(D, "atoms64", None)
    if cached is not None:
        return cached
    return np.ascontiguousarray(np.asarray(_atoms(D), dtype=np.float32), dtype=np.float64)


def omp_qr_step(state: OmpState, D, j: int) -> OmpState:
    """Add atom ``j``: extend Q, R and drop the new direction from the residual.

    Only the newest column of Q is needed because the residual is already
    orthogonal to the previous ones.
    """
    if j in state.support:
        raise ValueError(f"atom {j} already selected")
    Q, R = qr_append(state.Q, state.R, _atoms64(D)[:, j])
    q = Q[:, -1]
    r = state.residual - q * (q @ state.residual)
    return OmpState(state.support + (j,), Q, R, r)


def omp(D, x, lam: int, plan: MvmPlan | None = None, timings: dict | None = None) -> SparseCode:
    """Greedy ``lam``-sparse approximation of ``x`` over the columns of ``D``.

    Stops early when the residual falls below ``STOP_TOL * ||x||``, when the
    best atom is already in the support, or when a new atom is numerically
    dependent on the selected ones. Ties in the correlation go to the lowest
    atom index. Pass a dict as ``timings`` to accumulate per-stage seconds.
    """
    atoms = _atoms(D)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != atoms.shape[0]:
        raise ValueError(f"signal length {x.shape[0]} != atom length {atoms.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains NaN or Inf")
    if lam < 0 or lam > atoms.shape[1]:
        raise ValueError(f"sparsity {lam} outside [0, {atoms.shape[1]}]")
    clock = perf_counter if timings is not None else None
    state = OmpState.start(x)
    xnorm = float(np.linalg.norm(x))
    norms = [xnorm]
    A64 = _atoms64(D)
    for _ in range(lam):
        if norms[-1] <= STOP_TOL * xnorm or xnorm == 0.0:
            break
        if clock:
            t0 = clock()
        p = np.abs(mvm_t(A64, state.residual, plan))
        if clock:
            t1 = clock()
            timings["correlate"] = timings.get("correlate", 0.0) + t1 - t0
        j = int(np.argmax(p))
        if clock:
            t2 = clock()
            timings["select"] = timings.get("select", 0.0) + t2 - t1
        if j in state.support:
            break
        try:
            state = omp_qr_step(state, A64, j)
            norms.append(float(np.linalg.norm(state.residual)))
        except RankDeficientError:
            break
        finally:
            if clock:
                timings["qr_update"] = timings.get("qr_update", 0.0) + clock() - t2
    if clock:
        t3 = clock()
    support = list(state.support)
    if support:
        v = back_substitute(state.R, state.Q.T @ x)
        recon = A64[:, support] @ v
    else:
        v = np.zeros(0)
        recon = np.zeros_like(x)
    if clock:
        timings["solve"] = timings.get("solve", 0.0) + clock() - t3
    return SparseCode(support, v, state.residual, recon, norms)


class BatchCode(NamedTuple):
    reconstruction: np.ndarray  # (l, n)
    residuals: np.ndarray  # (l, n)
    failed: np.ndarray  # (n,) bool


def batch_reconstruct(D, X, lam: int, plan: MvmPlan | None = None, threads: int = 1) -> BatchCode:
    """Column-wise :func:`omp`. A column that raises is flagged and keeps r = x, x~ = 0."""
    X = np.asarray(X, dtype=np.float64)
    l, n = X.shape
    recon = np.zeros((l, n))
    resid = X.copy()
    failed = np.zeros(n, dtype=bool)
    if lam == 0 or n == 0:
        return BatchCode(recon, resid, failed)
    if getattr(D, "atoms64", None) is None:
        D = _Cached(_atoms(D))

    def run(i):
        try:
            code = omp(D, X[:, i], lam, plan)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            failed[i] = True
            return
        recon[:, i] = code.reconstruction
        resid[:, i] = code.residual

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, range(n)))
    else:
        for i in range(n):
            run(i)
    return BatchCode(recon, resid, failed)


class _Cached:
    def __init__(self, atoms):
        self.atoms = atoms
        self.atoms64 = _atoms64(atoms)
