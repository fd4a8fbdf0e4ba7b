"""Dictionary learning by residual-proportional column sampling.

Atoms are data columns. After a small uniform start, each round draws new
columns with probability proportional to how badly the current atoms
reconstruct them (normalized projection residual), so poorly covered
regions of the data get picked first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .linalg import RankDeficientError, ls_solve_qr, mgs_qr, qr_append
from .sparse import omp

# normalized residuals at or below this are treated as exactly zero
ZERO_RESIDUAL = 1e-6


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Dictionary:
    atoms: np.ndarray  # (l, m) float32, unit-norm columns
    source_ids: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        atoms = np.ascontiguousarray(self.atoms, dtype=np.float32)
        if atoms.ndim != 2 or atoms.shape[1] < 1:
            raise ValueError(f"atoms must be (l, m) with m >= 1, got {atoms.shape}")
        if len(self.source_ids) != atoms.shape[1]:
            raise ValueError("one source id per atom")
        if len(set(self.source_ids)) != len(self.source_ids):
            raise ValueError("duplicate source ids")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "source_ids", tuple(int(i) for i in self.source_ids))

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    @cached_property
    def atoms64(self) -> np.ndarray:
        return self.atoms.astype(np.float64)


@dataclass
class DictLearnConfig:
    target_cols: int
    init_cols: int | None = None  # defaults to max(1, target_cols // 20)
    growth: int = 1
    seed: int = 0
    init_indices: list[int] | None = field(default=None)

    def __post_init__(self):
        if self.init_cols is None:
            self.init_cols = max(1, self.target_cols // 20)
        if not 1 <= self.init_cols <= self.target_cols:
            raise ValueError("need 1 <= init_cols <= target_cols")
        if self.growth < 1:
            raise ValueError("growth must be >= 1")


def selection_probabilities(residual_norms: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    """Categorical distribution over columns, proportional to normalized residuals.

    Ineligible columns and columns with (numerically) zero residual get
    probability exactly 0. Returns all zeros when nothing can be drawn.
    """
    w = np.where(eligible & (residual_norms > ZERO_RESIDUAL), residual_norms, 0.0)
    total = w.sum()
    return w / total if total > 0 else w


def _draw(rng: np.random.Generator, weights: np.ndarray) -> int:
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def distinct_columns(X: np.ndarray) -> np.ndarray:
    """Index of the first occurrence of every distinct nonzero column."""
    X = np.asarray(X, dtype=np.float64)
    nonzero = np.flatnonzero(np.any(X != 0, axis=0))
    if nonzero.size == 0:
        return nonzero
    _, first = np.unique(X[:, nonzero].T, axis=0, return_index=True)
    return np.sort(nonzero[first])


def learn_dictionary(X, cfg: DictLearnConfig) -> Dictionary:
    """Pick ``cfg.target_cols`` columns of ``X`` (l x n) as unit-norm atoms.

    Residuals of every column against the span of the atoms picked so far
    are kept up to date with one Gram-Schmidt sweep per new independent
    atom. Once every residual is zero (the atoms span the data), the
    remaining atoms are drawn uniformly from unselected distinct columns.
    """
    X = np.asarray(X, dtype=np.float64)
    l, n = X.shape
    m = cfg.target_cols
    distinct = distinct_columns(X)
    if distinct.size < m:
        raise InsufficientDataError(
            f"need {m} distinct nonzero columns, found {distinct.size} among {n}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    norms = np.linalg.norm(X, axis=0)
    usable = norms > 0
    Xn = np.zeros_like(X)
    Xn[:, usable] = X[:, usable] / norms[usable]

    resid = Xn.copy()
    res_norm = np.where(usable, 1.0, 0.0)
    Q = np.zeros((l, 0))
    R = np.zeros((0, 0))
    selected: list[int] = []
    taken = np.zeros(n, dtype=bool)

    def take(i: int):
        nonlocal Q, R, resid, res_norm
        selected.append(i)
        taken[i] = True
        if res_norm[i] <= ZERO_RESIDUAL:
            return
        try:
            Q, R = qr_append(Q, R, Xn[:, i])
        except RankDeficientError:
            return
        q = Q[:, -1]
        resid -= np.outer(q, q @ resid)
        res_norm = np.linalg.norm(resid, axis=0)

    if cfg.init_indices is not None:
        init = [int(i) for i in cfg.init_indices]
        if any(not usable[i] for i in init) or len(set(init)) != len(init):
            raise ValueError("init_indices must be distinct nonzero columns")
    else:
        init = list(rng.choice(distinct, size=cfg.init_cols, replace=False))
    for i in init:
        take(int(i))

    # columns identical to an already selected one never become atoms
    fill_pool = np.zeros(n, dtype=bool)
    fill_pool[distinct] = True
    while len(selected) < m:
        p = selection_probabilities(res_norm, usable & ~taken)
        if not p.any():
            break
        for _ in range(min(cfg.growth, m - len(selected))):
            if not p.any():
                break
            i = _draw(rng, p)
            p[i] = 0.0
            take(i)

    if len(selected) < m:
        covered = {X[:, i].tobytes() for i in selected}
        pool = [i for i in np.flatnonzero(fill_pool & ~taken) if X[:, i].tobytes() not in covered]
        extra = rng.choice(np.array(pool, dtype=np.intp), size=m - len(selected), replace=False)
        selected.extend(int(i) for i in extra)

    atoms = Xn[:, selected].astype(np.float32)
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms, tuple(selected), cfg.seed)


def projection_residual(D_t, x) -> float:
    """||D_t D_t^+ x - x||_2 through a QR least-squares solve."""
    D_t = np.asarray(D_t, dtype=np.float64)
    if D_t.ndim == 1:
        D_t = D_t[:, None]
    x = np.asarray(x, dtype=np.float64)
    Q, R = mgs_qr(D_t)
    v = ls_solve_qr(Q, R, x)
    return float(np.linalg.norm(x - D_t @ v))


def reconstruction_error_stats(D, X_holdout, lam: int) -> tuple[float, float]:
    """Mean and max of ||x - x~|| / ||x|| over nonzero holdout columns."""
    X = np.asarray(X_holdout, dtype=np.float64)
    errs = []
    for i in range(X.shape[1]):
        x = X[:, i]
        nx = np.linalg.norm(x)
        if nx == 0:
            continue
        code = omp(D, x, lam)
        errs.append(np.linalg.norm(x - code.reconstruction) / nx)
    if not errs:
        return 0.0, 0.0
    return float(np.mean(errs)), float(np.max(errs))


def generalization_gap_scale(m: int, l: int, n: int, lam: int) -> float:
    """sqrt(m l ln(n lam) / n): order of magnitude of the holdout-vs-train error gap.

    Diagnostic only; the constant in front is unknown, so this is not a bound.
    """
    return float(np.sqrt(m * l * np.log(n * lam) / n))
