"""Lagrange reference elements on the unit simplex and their precomputed tables.

Node ordering: corners first, then edge midpoints. Edge order is
(1,2) for d=1; (1,2), (2,3), (3,1) for d=2; and
(1,2), (2,3), (3,1), (1,4), (2,4), (3,4) for d=3.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial

import numpy as np

from .errors import ReferenceDomainError, UnsupportedElementError
from .quadrature import QuadratureRule, quadrature_rule

SUPPORTED = {(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)}

EDGES = {
    1: ((0, 1),),
    2: ((0, 1), (1, 2), (2, 0)),
    3: ((0, 1), (1, 2), (2, 0), (0, 3), (1, 3), (2, 3)),
}

_DOMAIN_TOL = 1e-12


def _check(d, p):
    if (d, p) not in SUPPORTED:
        raise UnsupportedElementError(f"no Lagrange element for d={d}, p={p}")


def nref(d, p):
    _check(d, p)
    return comb(p + d, d)


def reference_measure(d):
    return 1.0 / factorial(d)


def reference_nodes(d, p):
    """Reference node coordinates, shape (nref, d)."""
    _check(d, p)
    corners = np.vstack([np.zeros(d), np.eye(d)])
    if p == 1:
        return corners
    mids = np.array([(corners[a] + corners[b]) / 2 for a, b in EDGES[d]])
    return np.vstack([corners, mids])


def _as_points(d, xi):
    pts = np.asarray(xi, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != d:
        raise ReferenceDomainError(f"expected points with {d} coordinates, got shape {np.shape(xi)}")
    lam0 = 1.0 - pts.sum(axis=1)
    if (pts < -_DOMAIN_TOL).any() or (lam0 < -_DOMAIN_TOL).any():
        raise ReferenceDomainError("point outside the closed reference simplex")
    return pts, single


def _barycentric(pts):
    # (d+1, Q)
    return np.vstack([1.0 - pts.sum(axis=1), pts.T])


def _barycentric_grad(d):
    # (d+1, d): gradient of each barycentric coordinate
    return np.vstack([-np.ones(d), np.eye(d)])


def basis_eval(d, p, xi):
    """Evaluate all reference basis functions.

    ``xi`` is a single point of shape (d,) or a stack of shape (Q, d).
    Returns shape (nref,) or (nref, Q) accordingly.
    """
    _check(d, p)
    pts, single = _as_points(d, xi)
    lam = _barycentric(pts)
    if p == 1:
        out = lam
    else:
        vert = lam * (2.0 * lam - 1.0)
        edge = np.array([4.0 * lam[a] * lam[b] for a, b in EDGES[d]])
        out = np.vstack([vert, edge])
    return out[:, 0] if single else out


def basis_grad(d, p, xi):
    """Gradients of the reference basis, shape (d, nref) or (d, nref, Q)."""
    _check(d, p)
    pts, single = _as_points(d, xi)
    lam = _barycentric(pts)
    G = _barycentric_grad(d)
    Q = pts.shape[0]
    if p == 1:
        out = np.repeat(G.T[:, :, None], Q, axis=2)
    else:
        vert = (4.0 * lam - 1.0)[None, :, :] * G.T[:, :, None]
        edge = np.stack(
            [4.0 * (lam[a][None, :] * G[b][:, None] + lam[b][None, :] * G[a][:, None]) for a, b in EDGES[d]],
            axis=1,
        )
        out = np.concatenate([vert, edge], axis=1)
    return out[:, :, 0] if single else out


@dataclass(frozen=True)
class ReferenceElement:
    d: int
    p: int
    nref: int = field(init=False)
    node_coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nref", nref(self.d, self.p))
        object.__setattr__(self, "node_coords", _frozen(reference_nodes(self.d, self.p)))

    def eval(self, xi):
        return basis_eval(self.d, self.p, xi)

    def grad(self, xi):
        return basis_grad(self.d, self.p, xi)


@dataclass(frozen=True)
class ReferencePack:
    """Element-independent tables consumed by the assemblers.

    Fq[j, i] is basis j at quadrature node i, grad_Fq[m, j, i] its m-th partial,
    Mq[k, j, i] = Fq[k, i] * Fq[j, i] and W[i] the weights. For p=1 the exact
    reference mass matrix and stiffness building blocks are also filled in.
    """

    element: ReferenceElement
    rule: QuadratureRule
    Fq: np.ndarray
    grad_Fq: np.ndarray
    Mq: np.ndarray
    W: np.ndarray
    M_ref: np.ndarray | None = None
    A_ref_mn: np.ndarray | None = None

    @property
    def d(self):
        return self.element.d

    @property
    def p(self):
        return self.element.p

    @property
    def nref(self):
        return self.element.nref

    @property
    def Q(self):
        return self.W.shape[0]


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _exact_p1_tables(d):
    """Exact mass matrix and d x d stiffness blocks for linear elements."""
    n = d + 1
    vol = Fraction(1, factorial(d))
    M = np.empty((n, n))
    for k in range(n):
        for j in range(n):
            alpha_fact = 2 if k == j else 1
            M[k, j] = float(Fraction(alpha_fact * factorial(d), factorial(d + 2)) * vol)
    G = _barycentric_grad(d)
    A = np.einsum("km,jn->mnkj", G, G) * float(vol)
    return M, A


@lru_cache(maxsize=None)
def precompute(d, p):
    _check(d, p)
    element = ReferenceElement(d, p)
    rule = quadrature_rule(d)
    Fq = basis_eval(d, p, rule.nodes)
    grad_Fq = basis_grad(d, p, rule.nodes)
    Mq = np.einsum("ki,ji->kji", Fq, Fq)
    M_ref = A_ref = None
    if p == 1:
        M_ref, A_ref = _exact_p1_tables(d)
        M_ref, A_ref = _frozen(M_ref), _frozen(A_ref)
    return ReferencePack(
        element=element,
        rule=rule,
        Fq=_frozen(Fq),
        grad_Fq=_frozen(grad_Fq),
        Mq=_frozen(Mq),
        W=_frozen(rule.weights),
        M_ref=M_ref,
        A_ref_mn=A_ref,
    )
