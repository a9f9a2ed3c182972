"""Quadrature rules on the unit simplex.

Interval [0, 1]: 6-point Gauss-Legendre (exact to degree 11, covers the required 10).
Triangle: Dunavant's 16-point rule, exact to degree 8.
Tetrahedron: a fully symmetric 38-point rule with positive weights and
interior nodes, exact to degree 7.

Weights sum to the reference measure (1, 1/2, 1/6).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .errors import UnsupportedElementError

# Dunavant degree 8 on the triangle; weights normalised to unit area.
# (weight, barycentric orbit generator)
_DUNAVANT8 = (
    (0.1443156076777871682511, ("S3",)),
    (0.0950916342672846247939, ("S21", 0.4592925882927231560288)),
    (0.1032173705347182502818, ("S21", 0.1705693077517602066223)),
    (0.03245849762319808031093, ("S21", 0.05054722831703097545842)),
    (0.02723031417443499426484, ("S111", 0.008394777409957605337214, 0.2631128296346381134218)),
)

# Degree 7 on the tetrahedron, 38 points; absolute weights (sum 1/6).
_TET7 = (
    (0.01069552385631129939044, ("S31", 0.2976211572396194719578)),
    (0.005197039693107836025413, ("S31", 0.1010378215097144645145)),
    (0.005518805859909758884214, ("S22", 0.05208131482704073087499)),
    (0.005084747460394882696012, ("S211", 0.207495282997554704447, 0.554379036159928265488)),
    (0.0007472173153994149454876, ("S211", 0.002238905551464066958037, 0.1555193521251556023028)),
)

DEGREE = {1: 10, 2: 8, 3: 7}


@dataclass(frozen=True)
class QuadratureRule:
    d: int
    degree: int
    nodes: np.ndarray  # (Q, d)
    weights: np.ndarray  # (Q,)

    @property
    def Q(self):
        return self.weights.shape[0]

    def integrate(self, f):
        """Apply the rule to a callable taking an (Q, d) array of points."""
        return float(np.dot(self.weights, f(self.nodes)))


def _unique_perms(t):
    return sorted(set(itertools.permutations(t)))


def _expand(table, nbary):
    nodes, weights = [], []
    for w, gen in table:
        kind, *par = gen
        if kind in ("S3", "S4"):
            pts = [(1.0 / nbary,) * nbary]
        elif kind == "S21":
            a = par[0]
            pts = _unique_perms((a, a, 1 - 2 * a))
        elif kind == "S111":
            a, b = par
            pts = _unique_perms((a, b, 1 - a - b))
        elif kind == "S31":
            a = par[0]
            pts = _unique_perms((a, a, a, 1 - 3 * a))
        elif kind == "S22":
            a = par[0]
            pts = _unique_perms((a, a, 0.5 - a, 0.5 - a))
        elif kind == "S211":
            a, c = par
            pts = _unique_perms((a, a, c, 1 - 2 * a - c))
        else:  # pragma: no cover
            raise ValueError(kind)
        for bary in pts:
            # drop the first barycentric coordinate; the rest are Cartesian
            nodes.append(bary[1:])
            weights.append(w)
    return np.array(nodes), np.array(weights)


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def quadrature_rule(d):
    if d == 1:
        x, w = np.polynomial.legendre.leggauss(6)
        nodes, weights = (x[:, None] + 1.0) / 2.0, w / 2.0
    elif d == 2:
        nodes, weights = _expand(_DUNAVANT8, 3)
        weights = weights / 2.0
    elif d == 3:
        nodes, weights = _expand(_TET7, 4)
    else:
        raise UnsupportedElementError(f"no quadrature rule for dimension {d}")
    return QuadratureRule(d=d, degree=DEGREE[d], nodes=_frozen(nodes), weights=_frozen(weights))


def monomial_integral(exponents):
    """Exact integral of prod x_i^a_i over the unit simplex: prod(a_i!) / (sum(a) + d)!"""
    num = 1
    for a in exponents:
        num *= factorial(a)
    return num / factorial(sum(exponents) + len(exponents))
