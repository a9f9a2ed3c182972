"""Element-batched assembly of mass and stiffness matrices and load vectors.

Every element of a batch is processed at once through dense arrays whose
leading axis runs over elements. Per element and quadrature node the
Jacobian page L holds the tangent vectors dF/dxi_k as columns; surface
elements append an (unnormalised) normal column so that L is square and
C = L^-1 gives tangential gradients as C^T grad(phi_hat).

A per-element loop assembler is kept alongside as the reference oracle and
the benchmark baseline.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateElementError, EvaluationError, PreconditionError, ResourceError
from .reference import precompute
from .sparsela import Triplets, finalize

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 2048  # keeps per-batch work arrays cache-sized; larger batches scale worse
MEMORY_BUDGET = 2 * 1024**3  # bytes per batch of dense work arrays
DEGENERATE_RTOL = 1e-14
DEFAULT_WORKERS = 1  # thread pool size used when workers is None


@dataclass
class AssemblyOutput:
    """Triplet lists for M and A (0-based indices), plus an optional load vector."""

    rows: np.ndarray
    cols: np.ndarray
    M_vals: np.ndarray
    A_vals: np.ndarray
    n: int
    b: np.ndarray | None = None

    @property
    def M_triplets(self):
        return Triplets(self.rows, self.cols, self.M_vals, self.n)

    @property
    def A_triplets(self):
        return Triplets(self.rows, self.cols, self.A_vals, self.n)

    def M(self):
        return finalize(self.M_triplets)

    def A(self):
        return finalize(self.A_triplets)


# ------------------------------------------------------------------ geometry


def _normal_column(T, kind):
    """Append the normal column for codimension-one elements; T is (..., m, d)."""
    m, d = T.shape[-2:]
    if kind == "bulk" or m == d:
        return T, None
    if d == 2:
        a, b = T[..., :, 0], T[..., :, 1]
        n = np.stack(
            [a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
             a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
             a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]],
            axis=-1,
        )
    else:
        t = T[..., :, 0]
        n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
    return np.concatenate([T, n[..., :, None]], axis=-1), n


def _det_small(L):
    m = L.shape[-1]
    if m == 2:
        return L[..., 0, 0] * L[..., 1, 1] - L[..., 0, 1] * L[..., 1, 0]
    if m == 3:
        return np.einsum("...i,...i->...", L[..., 0, :], np.cross(L[..., 1, :], L[..., 2, :]))
    return np.linalg.det(L)


def _inv_small(L):
    """Inverse of a stack of 1x1, 2x2 or 3x3 matrices via the adjugate."""
    m = L.shape[-1]
    if m == 1:
        return 1.0 / L
    if m == 2:
        a, b, c, d = L[..., 0, 0], L[..., 0, 1], L[..., 1, 0], L[..., 1, 1]
        adj = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2)
        return adj / (a * d - b * c)[..., None, None]
    if m != 3:
        return np.linalg.inv(L)
    r0, r1, r2 = L[..., 0, :], L[..., 1, :], L[..., 2, :]
    # columns of the adjugate are cross products of the rows
    c0 = np.cross(r1, r2)
    c1 = np.cross(r2, r0)
    c2 = np.cross(r0, r1)
    det = np.einsum("...i,...i->...", r0, c0)
    return np.stack([c0, c1, c2], axis=-1) / det[..., None, None]


def element_geometry(X, grad_Fq, kind):
    """Jacobian pages, their inverses and measures for a batch of elements.

    X is (B, nref, m) element node coordinates, grad_Fq is (d, nref, Q).
    Returns L and C of shape (B, Q, m, m) and det of shape (B, Q).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    B, nref, m = X.shape
    d, _, Q = grad_Fq.shape
    # fixed summation order over nodes keeps each page independent of the batch
    T = np.zeros((B, Q, m, d))
    for j in range(nref):
        T += X[:, None, j, :, None] * grad_Fq[:, j, :].T[None, :, None, :]
    L, n = _normal_column(T, kind)
    if n is None:
        det = np.abs(_det_small(L))
    else:
        det = np.sqrt(np.einsum("...i,...i->...", n, n))
    with np.errstate(all="ignore"):
        C = _inv_small(np.where(det[..., None, None] > 0, L, np.eye(L.shape[-1])))
    return L, C, det


def element_geometry_all(mesh, signed=False):
    """Geometry of every element of ``mesh`` at the reference quadrature nodes."""
    pack = precompute(mesh.d, mesh.p)
    X = mesh.nodes[mesh.elements]
    L, C, det = element_geometry(X, pack.grad_Fq, mesh.kind)
    if not signed:
        return L, C, det
    return L, C, det, _det_small(L)


def _check_degenerate(X, det, d, offset):
    corners = X[:, : d + 1]
    h = np.linalg.norm(corners[:, 1:] - corners[:, :1], axis=-1).max(axis=1)
    bad = ~(det.min(axis=1) > DEGENERATE_RTOL * h**d)
    if bad.any():
        raise DegenerateElementError(np.flatnonzero(bad) + offset)


def _padded_grads(pack, m):
    """Reference gradients with zero rows for the normal direction: (m, nref, Q)."""
    g = pack.grad_Fq
    if m == g.shape[0]:
        return g
    pad = np.zeros((m - g.shape[0],) + g.shape[1:])
    return np.concatenate([g, pad], axis=0)


# ------------------------------------------------------------ batched kernel


def _bytes_per_element(mesh, Q):
    m, nref = mesh.m, mesh.nref
    doubles = Q * (m * mesh.d + 3 * m * m + 2) + nref * m + 4 * nref * nref + Q * m * nref
    return 8 * doubles


def resolve_batch_size(mesh, batch_size=None, memory_budget=MEMORY_BUDGET):
    """Batch length to use; raises ResourceError if an explicit request cannot fit."""
    Q = precompute(mesh.d, mesh.p).Q
    per = _bytes_per_element(mesh, Q)
    fit = max(1, memory_budget // per)
    if batch_size is None:
        return int(min(DEFAULT_BATCH_SIZE, fit, mesh.n_elements))
    if batch_size < 1:
        raise PreconditionError("batch_size must be >= 1")
    size = min(batch_size, mesh.n_elements)
    if size * per > memory_budget:
        raise ResourceError(
            f"batch of {size} elements needs ~{size * per / 1024**2:.0f} MiB, budget is "
            f"{memory_budget / 1024**2:.0f} MiB; use batch_size <= {fit}"
        )
    return int(size)


def _local_matrices(mesh, pack, g_pad, start, stop, mass=True, stiffness=True):
    E = mesh.elements[start:stop]
    X = mesh.nodes[E]
    L, C, det = element_geometry(X, pack.grad_Fq, mesh.kind)
    _check_degenerate(X, det, mesh.d, start)
    B, nref, Q = E.shape[0], mesh.nref, pack.Q
    Wdet = det * pack.W
    M_loc = A_loc = None
    # ascending quadrature order keeps per-element sums independent of the batch
    if mass:
        Mq = pack.Mq
        M_loc = np.zeros((B, nref, nref))
        for q in range(Q):
            M_loc += Wdet[:, q, None, None] * Mq[None, :, :, q]
    if stiffness:
        A_loc = np.zeros((B, nref, nref))
        for q in range(Q):
            # tangential gradients C^T grad(phi_hat): (B, m, nref)
            G = np.matmul(np.swapaxes(C[:, q], 1, 2), g_pad[:, :, q])
            A_loc += Wdet[:, q, None, None] * np.matmul(np.swapaxes(G, 1, 2), G)
    return M_loc, A_loc


def _index_pages(E):
    nref = E.shape[1]
    rows = np.repeat(E, nref, axis=1).ravel()
    cols = np.tile(E, (1, nref)).ravel()
    return rows, cols


def _batches(n, size):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def assemble_batched(mesh, batch_size=None, workers=None, memory_budget=MEMORY_BUDGET, load=None):
    """Mass and stiffness triplets for all elements, processed in batches.

    ``load`` optionally is a callable f(points: (n, m)) -> (n,) whose load
    vector is added to the output.
    """
    if workers is None:
        workers = DEFAULT_WORKERS
    pack = precompute(mesh.d, mesh.p)
    size = resolve_batch_size(mesh, batch_size, memory_budget)
    g_pad = _padded_grads(pack, mesh.m)
    nE, nref = mesh.n_elements, mesh.nref
    M_vals = np.empty(nE * nref * nref)
    A_vals = np.empty(nE * nref * nref)

    def work(span):
        s, e = span
        M_loc, A_loc = _local_matrices(mesh, pack, g_pad, s, e)
        sl = slice(s * nref * nref, e * nref * nref)
        M_vals[sl] = M_loc.ravel()
        A_vals[sl] = A_loc.ravel()

    spans = _batches(nE, size)
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)
    rows, cols = _index_pages(mesh.elements)
    out = AssemblyOutput(rows, cols, M_vals, A_vals, mesh.n_nodes)
    if load is not None:
        out.b = assemble_load(mesh, load, batch_size=size)
    return out


def assemble_p1_fast(mesh):
    """Quadrature-free assembly for linear elements (constant element maps)."""
    if mesh.p != 1:
        raise PreconditionError(f"p1 fast path needs a linear mesh, got p={mesh.p}")
    pack = precompute(mesh.d, 1)
    d = mesh.d
    X = mesh.nodes[mesh.elements]
    # gradients are constant: evaluate the map once per element
    g = pack.grad_Fq[:, :, :1]
    L, C, det = element_geometry(X, g, mesh.kind)
    _check_degenerate(X, det, d, 0)
    C, det = C[:, 0], det[:, 0]
    K = np.matmul(C, np.swapaxes(C, 1, 2))[:, :d, :d] * det[:, None, None]
    M_vals = det[:, None, None] * pack.M_ref[None]
    A_vals = np.einsum("bmn,mnkj->bkj", K, pack.A_ref_mn)
    rows, cols = _index_pages(mesh.elements)
    return AssemblyOutput(rows, cols, M_vals.ravel(), A_vals.ravel(), mesh.n_nodes)


# -------------------------------------------------------------- load vector


def quadrature_points(mesh, start=0, stop=None):
    """Physical quadrature points F_E(xi_i), shape (B, Q, m)."""
    pack = precompute(mesh.d, mesh.p)
    X = mesh.nodes[mesh.elements[start:stop]]
    return np.einsum("bjm,jq->bqm", X, pack.Fq)


def _eval_field(f, pts, start):
    B, Q, m = pts.shape
    vals = np.asarray(f(pts.reshape(-1, m)), dtype=float)
    if vals.shape == ():
        vals = np.full(B * Q, float(vals))
    vals = vals.reshape(B, Q)
    bad = ~np.isfinite(vals).all(axis=1)
    if bad.any():
        raise EvaluationError(np.flatnonzero(bad) + start)
    return vals


def assemble_load(mesh, f, mode="quadrature", batch_size=None, M=None):
    """Load vector b_j = int f phi_j over the discrete domain.

    ``mode="quadrature"`` evaluates f at the mapped quadrature nodes;
    ``mode="nodal"`` returns M @ f(nodes) (the interpolated right-hand side).
    """
    if mode == "nodal":
        if M is None:
            M = assemble_batched(mesh, batch_size=batch_size).M()
        fn = np.asarray(f(mesh.nodes), dtype=float)
        if fn.shape == ():
            fn = np.full(mesh.n_nodes, float(fn))
        if not np.isfinite(fn).all():
            raise EvaluationError([], "non-finite nodal values of f")
        return M @ fn
    if mode != "quadrature":
        raise PreconditionError(f"unknown load mode {mode!r}")
    pack = precompute(mesh.d, mesh.p)
    size = resolve_batch_size(mesh, batch_size)
    b = np.zeros(mesh.n_nodes)
    for s, e in _batches(mesh.n_elements, size):
        E = mesh.elements[s:e]
        X = mesh.nodes[E]
        _, _, det = element_geometry(X, pack.grad_Fq, mesh.kind)
        _check_degenerate(X, det, mesh.d, s)
        vals = _eval_field(f, np.einsum("bjm,jq->bqm", X, pack.Fq), s)
        loc = (vals * det * pack.W) @ pack.Fq.T  # (B, nref)
        b += np.bincount(E.ravel(), weights=loc.ravel(), minlength=mesh.n_nodes)
    return b


# ------------------------------------------------------------ naive oracle


def assemble_naive(mesh):
    """Per-element, per-quadrature-point loop assembler.

    Local matrices are collected in lists and turned into triplets only at
    the end, so the global sparse structure is built once.
    """
    pack = precompute(mesh.d, mesh.p)
    d, m, nref = mesh.d, mesh.m, mesh.nref
    Fq, grad, W = pack.Fq, pack.grad_Fq, pack.W
    local_M, local_A, index_rows, index_cols = [], [], [], []
    for e in range(mesh.n_elements):
        nodes = mesh.elements[e]
        X = mesh.nodes[nodes]  # (nref, m)
        Me = np.zeros((nref, nref))
        Ae = np.zeros((nref, nref))
        h = max(np.linalg.norm(X[a] - X[0]) for a in range(1, d + 1))
        for q in range(pack.Q):
            T = X.T @ grad[:, :, q].T  # (m, d) tangent columns
            if mesh.kind == "surface":
                if d == 2:
                    n = np.cross(T[:, 0], T[:, 1])
                else:
                    n = np.array([-T[1, 0], T[0, 0]])
                L = np.column_stack([T, n])
                det = np.linalg.norm(n)
            else:
                L = T
                det = abs(np.linalg.det(L))
            if not det > DEGENERATE_RTOL * h**d:
                raise DegenerateElementError([e])
            C = np.linalg.inv(L)
            wdet = W[q] * det
            phi = Fq[:, q]
            Me += wdet * np.outer(phi, phi)
            g = np.zeros((m, nref))
            g[:d] = grad[:, :, q]
            G = C.T @ g
            Ae += wdet * (G.T @ G)
        local_M.append(Me)
        local_A.append(Ae)
        index_rows.append(np.repeat(nodes, nref))
        index_cols.append(np.tile(nodes, nref))
    return AssemblyOutput(
        np.concatenate(index_rows),
        np.concatenate(index_cols),
        np.concatenate([a.ravel() for a in local_M]),
        np.concatenate([a.ravel() for a in local_A]),
        mesh.n_nodes,
    )


def assemble(mesh, backend="batched", **kw):
    if backend == "batched":
        return assemble_batched(mesh, **kw)
    if backend == "naive":
        return assemble_naive(mesh)
    if backend == "p1fast":
        return assemble_p1_fast(mesh)
    raise PreconditionError(f"unknown assembly backend {backend!r}")
