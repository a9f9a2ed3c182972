"""Triplet finalisation into CSR, small sparse helpers and CG solvers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import DimensionError, SolverError, SparseIndexError

CsrMatrix = sp.csr_matrix


@dataclass
class Triplets:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    n: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.vals = np.asarray(self.vals, dtype=float).ravel()
        if not (self.rows.size == self.cols.size == self.vals.size):
            raise DimensionError("triplet arrays must have equal length")

    def __len__(self):
        return self.vals.size


MAX_PADDED_GROUP = 64


def _sum_groups(vals, starts, sizes):
    """Left-to-right sums of contiguous groups, each taken in ascending value order."""
    G = int(sizes.max())
    if G > MAX_PADDED_GROUP or not np.isfinite(vals).all():
        gid = np.repeat(np.arange(starts.size), sizes)
        vals = vals[np.lexsort((vals, gid))]
        return np.add.reduceat(vals, starts)
    # short groups: pad rows with +inf, sort each row, drop the padding
    gid = np.repeat(np.arange(starts.size), sizes)
    pad = np.full((starts.size, G), np.inf)
    pad[gid, np.arange(vals.size) - starts[gid]] = vals
    pad.sort(axis=1)
    out = pad[:, 0].copy()
    for j in range(1, G):
        out += np.where(j < sizes, pad[:, j], 0.0)
    return out


def finalize(t: Triplets) -> CsrMatrix:
    """Sum duplicates and compress by rows.

    Entries are ordered by (row, col, value) before summation, so the result
    does not depend on the order in which triplets were produced.
    """
    n = int(t.n)
    rows, cols, vals = t.rows, t.cols, t.vals
    if rows.size == 0:
        return sp.csr_matrix((n, n))
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n:
        raise SparseIndexError(f"triplet index outside 0..{n - 1}")
    key = rows * n + cols
    order = np.argsort(key, kind="stable")
    key, vals = key[order], vals[order]
    starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
    sizes = np.diff(np.append(starts, key.size))
    data = _sum_groups(vals, starts, sizes)
    ukey = key[starts]
    indices = ukey % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(ukey // n, minlength=n), out=indptr[1:])
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def spmv(A, x):
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot apply {A.shape} matrix to vector of length {x.shape[0]}")
    return A @ x


def add_scaled(A, B, alpha):
    """Return A + alpha*B in canonical CSR form without explicit zeros."""
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch {A.shape} vs {B.shape}")
    C = (A + alpha * B).tocsr()
    C.sum_duplicates()
    C.eliminate_zeros()
    return C


def diag(A):
    return np.asarray(A.diagonal())


def write_matrix_market(A, path, comment=""):
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, precision=17)


def read_matrix_market(path):
    return sp.csr_matrix(scipy.io.mmread(str(path)))


# -------------------------------------------------------------------- solvers


@dataclass
class CGInfo:
    converged: bool
    iterations: int
    residual: float  # relative residual ||b - Ax|| / ||b||
    history: list = field(default_factory=list)


def _jacobi(A, precond):
    if precond in (None, "none"):
        return None
    if precond != "jacobi":
        raise ValueError(f"unknown preconditioner {precond!r}")
    dg = diag(A).copy()
    dg[dg == 0] = 1.0
    return 1.0 / dg


def _pcg(A, b, tol, max_iter, inv_diag, x0=None, project=None, callback=None):
    n = b.shape[0]
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(True, 0, 0.0, [0.0])
    if project is not None:
        x = project(x)
    r = b - A @ x
    z = r * inv_diag if inv_diag is not None else r
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    it = 0
    while history[-1] > tol and it < max_iter:
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0.0:
            if pAp == 0.0 and np.linalg.norm(Ap) == 0.0 and rz == 0.0:
                break
            raise SolverError(f"CG breakdown at iteration {it}: p^T A p = {pAp:.3e}", info=it)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if project is not None:
            x = project(x)
        it += 1
        if callback is not None:
            callback(x)
        history.append(np.linalg.norm(r) / bnorm)
        z = r * inv_diag if inv_diag is not None else r
        if project is not None:
            z = project(z)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    return x, CGInfo(res <= tol * (1 + 1e-6) or history[-1] <= tol, it, float(res), history)


def cg_solve(A, b, tol=1e-10, max_iter=None, precond="jacobi", x0=None, callback=None):
    """Preconditioned conjugate gradients for an SPD matrix.

    Returns ``(x, info)``. Hitting ``max_iter`` is reported through
    ``info.converged``; a non-positive curvature p^T A p raises SolverError.
    """
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise DimensionError(f"incompatible system {A.shape} with rhs {b.shape}")
    if max_iter is None:
        max_iter = 10 * b.shape[0]
    return _pcg(A, b, tol, max_iter, _jacobi(A, precond), x0=x0, callback=callback)


def cg_solve_meanfree(A, b, M=None, tol=1e-10, max_iter=None, precond="jacobi", constraint=None, callback=None):
    """Solve the singular closed-surface system A x = b with a zero-mean side condition.

    The constraint is c^T x = 0 with c = M @ 1 by default (zero integral mean);
    pass ``constraint=np.ones(n)`` for a zero nodal sum instead. The load is
    first made compatible by removing its component along c. Returns
    ``(x, info)`` and raises SolverError when CG does not converge.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"incompatible system {A.shape} with rhs {b.shape}")
    if constraint is None:
        if M is None:
            raise DimensionError("need the mass matrix or an explicit constraint vector")
        c = M @ np.ones(n)
    else:
        c = np.asarray(constraint, dtype=float)
    ones = np.ones(n)
    c_one = c @ ones

    def project(v):
        return v - (c @ v) / c_one * ones

    # A 1 = 0, so compatibility is 1^T b = 0; remove the part of b along c
    b_proj = b - (ones @ b) / c_one * c
    if max_iter is None:
        max_iter = 10 * n
    x, info = _pcg(A, b_proj, tol, max_iter, _jacobi(A, precond), project=project, callback=callback)
    if not info.converged:
        raise SolverError(f"mean-free CG did not converge: residual {info.residual:.3e} after {info.iterations} iterations", info)
    return project(x), info


def apply_dirichlet(A, b, boundary_idx, values):
    """Symmetric elimination of Dirichlet rows and columns.

    Constrained rows and columns are zeroed with unit diagonal, the right-hand
    side is corrected by the boundary coupling and set to the boundary data.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    idx = np.asarray(boundary_idx, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise SparseIndexError(f"boundary index outside 0..{n - 1}")
    g = np.broadcast_to(np.asarray(values, dtype=float), idx.shape)
    full = np.zeros(n)
    full[idx] = g
    mask = np.zeros(n)
    mask[idx] = 1.0
    b_new = np.asarray(b, dtype=float) - A @ full
    b_new[idx] = g
    keep = sp.diags(1.0 - mask)
    A_new = (keep @ A @ keep + sp.diags(mask)).tocsr()
    A_new.eliminate_zeros()
    A_new.sort_indices()
    return A_new, b_new
