"""Dense symmetric linear-algebra kernels.

Cholesky factorization with incremental row/column insertion and deletion,
triangular solves, and partitioned-inverse (inverse variance lemma) block
updates. These are the building blocks for chaining per-pattern matrix work
across nearby missing patterns: a factor of the observed-observed covariance
block gets one variable appended or deleted at O(n^2) cost, and the
conditional covariance of the missing block gets grown or shrunk at
O(n_d * n_m^2) cost instead of being rebuilt.

All operations are pure: inputs are never mutated and returned values are
safe to share between workers.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import _kernels
from ._kernels import REL_PIVOT_TOL
from .errors import (
    DimensionMismatch,
    IndexAlreadyPresent,
    IndexNotPresent,
    NotPositiveDefinite,
)

__all__ = [
    "CholFactor",
    "BlockPartition",
    "cholesky",
    "solve_lower",
    "log_det",
    "chol_insert",
    "chol_delete",
    "ivl_extend",
    "ivl_shrink",
    "conditional_covariance",
]


def _as_sym_matrix(m, name="matrix"):
    a = np.ascontiguousarray(np.asarray(m, dtype=np.float64))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    if a.size and not np.allclose(a, a.T, rtol=0.0, atol=1e-8 * (1.0 + np.abs(a).max())):
        raise DimensionMismatch(f"{name} must be symmetric")
    return a


def _pivot_tol(m):
    if m.size == 0:
        return 0.0
    return REL_PIVOT_TOL * max(float(np.max(np.diag(m))), 0.0)


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor together with its variable ordering.

    ``lower @ lower.T`` reconstructs the source matrix with rows/columns
    taken in ``perm`` order. Freshly factorized matrices carry the identity
    permutation; :func:`chol_insert` always appends the new variable at the
    trailing factor position, so ``perm`` records where each original
    variable ended up.
    """

    lower: NDArray[np.float64]
    perm: NDArray[np.int64]

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> NDArray[np.float64]:
        """Return ``lower @ lower.T`` (the permuted source matrix)."""
        return self.lower @ self.lower.T


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint index sets splitting a matrix into an X and a Y block."""

    x_indices: NDArray[np.int64]
    y_indices: NDArray[np.int64]

    def __post_init__(self):
        x = np.asarray(self.x_indices, dtype=np.int64)
        y = np.asarray(self.y_indices, dtype=np.int64)
        object.__setattr__(self, "x_indices", x)
        object.__setattr__(self, "y_indices", y)
        if np.intersect1d(x, y).size:
            raise DimensionMismatch("partition blocks must be disjoint")

    def validate_covers(self, dim: int) -> None:
        union = np.union1d(self.x_indices, self.y_indices)
        if union.size != dim or (union != np.arange(dim)).any():
            raise DimensionMismatch(
                f"partition must cover all {dim} indices exactly once"
            )


def cholesky(m) -> CholFactor:
    """Factor a symmetric positive definite matrix as ``L L^T``.

    Raises :class:`NotPositiveDefinite` when a pivot falls below
    ``1e-12`` times the largest diagonal entry of the source.
    """
    a = _as_sym_matrix(m)
    n = a.shape[0]
    buf = a.copy()
    piv = _kernels.chol_inplace(buf, n, _pivot_tol(a))
    if piv >= 0:
        raise NotPositiveDefinite(f"pivot {piv} is not positive")
    return CholFactor(np.tril(buf), np.arange(n, dtype=np.int64))


def solve_lower(f: CholFactor, z) -> NDArray[np.float64]:
    """Forward substitution ``w = L^{-1} z``.

    ``z`` is given in ascending original-variable order; the factor's
    permutation is applied internally, so ``||w||^2`` equals the quadratic
    form ``z^T (L L^T)^{-1} z`` regardless of insertion history.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != f.dim:
        raise DimensionMismatch(f"expected length {f.dim}, got {z.shape[0]}")
    if f.dim == 0:
        return np.empty(0)
    # Factor position k holds variable f.perm[k]; z is indexed by the
    # variables in ascending order.
    b = np.ascontiguousarray(z[np.searchsorted(np.sort(f.perm), f.perm)])
    _kernels.forward_solve_vec(f.lower, f.dim, b)
    return b


def log_det(f: CholFactor) -> float:
    """Log determinant of the factored matrix, ``2 * sum(log(diag(L)))``."""
    if f.dim == 0:
        return 0.0
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def chol_insert(f: CholFactor, m_full, new_index: int) -> CholFactor:
    """Append variable ``new_index`` to the factor as the last dimension.

    ``m_full`` is the enlarged symmetric matrix supplying the new row and
    column against the existing factor members. Cost O(n^2).
    """
    a = _as_sym_matrix(m_full, "m_full")
    new_index = int(new_index)
    if new_index in f.perm:
        raise IndexAlreadyPresent(f"index {new_index} already in factor")
    if new_index < 0 or new_index >= a.shape[0]:
        raise DimensionMismatch(f"index {new_index} out of range for m_full")
    n = f.dim
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = f.lower
    perm = np.empty(n + 1, dtype=np.int64)
    perm[:n] = f.perm
    work = np.empty(max(n, 1))
    piv = _kernels.chol_insert_one(L, n, a, perm, new_index, _pivot_tol(a), work)
    if piv >= 0:
        raise NotPositiveDefinite("enlarged matrix is not positive definite")
    return CholFactor(L, perm)


def chol_delete(f: CholFactor, drop_index: int) -> CholFactor:
    """Remove variable ``drop_index`` from the factor.

    The remaining permutation order is preserved; triangularity of the
    trailing block is restored with plane rotations at O(n^2) cost.
    """
    drop_index = int(drop_index)
    hits = np.nonzero(f.perm == drop_index)[0]
    if hits.size == 0:
        raise IndexNotPresent(f"index {drop_index} not in factor")
    pos = int(hits[0])
    n = f.dim
    L = f.lower.copy()
    _kernels.chol_delete_at(L, n, pos)
    perm = np.delete(f.perm, pos)
    return CholFactor(np.tril(L[: n - 1, : n - 1]).copy(), perm)


def ivl_extend(lambda_xx_inv, lambda_yx, lambda_yy) -> NDArray[np.float64]:
    """Full inverse of a partitioned symmetric matrix from one block inverse.

    Given the inverse of the X block plus the Y-row blocks of the full
    matrix, assembles the (|X|+|Y|) inverse using ``B = Lambda_YX
    Lambda_XX^{-1}`` and the conditional block ``Lambda_YY - B Lambda_XY``.
    Cost O(n_d * n_m^2) for |Y| = n_d small against |X| = n_m.
    """
    kx = _as_sym_matrix(lambda_xx_inv, "lambda_xx_inv")
    lyy = _as_sym_matrix(lambda_yy, "lambda_yy")
    lyx = np.ascontiguousarray(np.atleast_2d(np.asarray(lambda_yx, dtype=np.float64)))
    nx = kx.shape[0]
    ny = lyy.shape[0]
    if lyx.shape != (ny, nx):
        raise DimensionMismatch(
            f"lambda_yx must have shape ({ny}, {nx}), got {lyx.shape}"
        )
    if ny == 0:
        return kx.copy()
    full = np.zeros((nx + ny, nx + ny))
    full[nx:, :nx] = lyx
    full[nx:, nx:] = lyy
    x_ids = np.arange(nx, dtype=np.int64)
    y_ids = np.arange(nx, nx + ny, dtype=np.int64)
    out = np.empty((nx + ny, nx + ny))
    piv = _kernels.ivl_extend_kernel(kx, nx, full, x_ids, y_ids, ny,
                                     _pivot_tol(lyy), out)
    if piv >= 0:
        raise NotPositiveDefinite("conditional block Lambda_Y|X is singular")
    return out


def ivl_shrink(lambda_inv, part: BlockPartition) -> NDArray[np.float64]:
    """Inverse of the retained X sub-block of the original matrix.

    Given the full inverse, removes the Y block by Schur complement:
    ``(L^-1)_XX - (L^-1)_XY (L^-1)_YY^{-1} (L^-1)_YX``. The result is
    indexed in ``part.x_indices`` order.
    """
    k = _as_sym_matrix(lambda_inv, "lambda_inv")
    part.validate_covers(k.shape[0])
    keep = np.ascontiguousarray(part.x_indices)
    drop = np.ascontiguousarray(part.y_indices)
    if drop.size == 0:
        return k[np.ix_(keep, keep)].copy()
    out = np.empty((keep.size, keep.size))
    tol = REL_PIVOT_TOL * max(float(np.max(np.diag(k)[drop])), 0.0)
    piv = _kernels.ivl_shrink_kernel(k, keep, keep.size, drop, drop.size,
                                     tol, out)
    if piv >= 0:
        raise NotPositiveDefinite("(Lambda^-1)_YY block is singular")
    return out


def conditional_covariance(sigma, missing) -> NDArray[np.float64]:
    """Schur complement ``S_mm - S_mo S_oo^{-1} S_om`` by direct computation.

    Reference path for the conditional covariance of the missing block given
    the observed block; equals the inverse of the missing/missing sub-block
    of the precision matrix. Indices in ``missing`` are returned in sorted
    order.
    """
    s = _as_sym_matrix(sigma, "sigma")
    d = s.shape[0]
    mis = np.unique(np.asarray(list(missing), dtype=np.int64))
    if mis.size and (mis[0] < 0 or mis[-1] >= d):
        raise DimensionMismatch("missing indices out of range")
    obs = np.setdiff1d(np.arange(d, dtype=np.int64), mis)
    if obs.size == 0:
        return s.copy()
    if mis.size == 0:
        return np.empty((0, 0))
    f = cholesky(s[np.ix_(obs, obs)])
    bt = np.ascontiguousarray(s[np.ix_(mis, obs)])
    _kernels.forward_solve_rows(f.lower, obs.size, bt, mis.size)
    k = s[np.ix_(mis, mis)] - bt @ bt.T
    return 0.5 * (k + k.T)
