"""Mesh tables, the ellmesh text format, and structural validation."""
from __future__ import annotations

import io
import os
from collections import defaultdict, deque
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import MeshParseError, MeshValidationError
from .reference import EDGES, SUPPORTED

KINDS = ("bulk", "surface")
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Mesh:
    """Node coordinates plus element connectivity (0-based internally).

    ``nodes`` is |N| x m with m the ambient dimension; ``elements`` is
    |E| x nref with the corner nodes listed before the edge nodes.
    ``boundary`` optionally lists boundary node indices of a bulk mesh.
    """

    kind: str
    d: int
    p: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MeshValidationError(f"unknown mesh kind {self.kind!r}")
        if (self.d, self.p) not in SUPPORTED or (self.kind == "surface" and self.d == 3) or (
            self.kind == "bulk" and self.d == 1
        ):
            raise MeshValidationError(f"unsupported element: {self.kind} d={self.d} p={self.p}")
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != self.m:
            raise MeshValidationError(f"nodes must be |N| x {self.m}, got {nodes.shape}")
        if elements.ndim != 2 or elements.shape[1] != self.nref:
            raise MeshValidationError(f"elements must be |E| x {self.nref}, got {elements.shape}")
        if elements.shape[0] == 0:
            raise MeshValidationError("mesh has no elements")
        if elements.min() < 0 or elements.max() >= nodes.shape[0]:
            raise MeshValidationError("element connectivity references a missing node")
        nodes.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        if self.boundary is not None:
            b = np.ascontiguousarray(self.boundary, dtype=np.int64)
            if b.size and (b.min() < 0 or b.max() >= nodes.shape[0]):
                raise MeshValidationError("boundary index out of range")
            b.setflags(write=False)
            object.__setattr__(self, "boundary", b)

    @property
    def m(self):
        return self.d if self.kind == "bulk" else self.d + 1

    @property
    def nref(self):
        return comb(self.p + self.d, self.d)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def corners(self):
        return self.elements[:, : self.d + 1]

    def with_nodes(self, nodes):
        """Same connectivity, new coordinates (used by moving-mesh flows)."""
        return Mesh(self.kind, self.d, self.p, nodes, self.elements, self.boundary)

    def h(self):
        """Maximum Euclidean distance between corner nodes of any element."""
        X = self.nodes[self.corners]
        h = 0.0
        for a in range(self.d + 1):
            for b in range(a + 1, self.d + 1):
                h = max(h, float(np.linalg.norm(X[:, a] - X[:, b], axis=1).max()))
        return h

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        same_b = (self.boundary is None and other.boundary is None) or (
            self.boundary is not None
            and other.boundary is not None
            and np.array_equal(self.boundary, other.boundary)
        )
        return (
            (self.kind, self.d, self.p) == (other.kind, other.d, other.p)
            and np.array_equal(self.elements, other.elements)
            and np.array_equal(self.nodes, other.nodes)
            and same_b
        )

    __hash__ = None


# ---------------------------------------------------------------- file format


def write_mesh(mesh, path):
    """Write ``mesh`` in ellmesh format (1-based indices, 17 significant digits)."""
    out = io.StringIO()
    out.write(f"ellmesh {FORMAT_VERSION}\n")
    out.write(f"kind {mesh.kind}\n")
    out.write(f"dim {mesh.d}  order {mesh.p}  ambient {mesh.m}\n")
    out.write(f"nodes {mesh.n_nodes}\n")
    np.savetxt(out, mesh.nodes, fmt="%.17g")
    out.write(f"elements {mesh.n_elements}\n")
    np.savetxt(out, mesh.elements + 1, fmt="%d")
    if mesh.boundary is not None:
        out.write(f"boundary {mesh.boundary.size}\n")
        np.savetxt(out, mesh.boundary.reshape(-1, 1) + 1, fmt="%d")
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        fh.write(out.getvalue())


class _Lines:
    def __init__(self, text):
        self.lines = [
            (i + 1, ln.split("#", 1)[0].split()) for i, ln in enumerate(text.splitlines())
        ]
        self.lines = [(n, toks) for n, toks in self.lines if toks]
        self.pos = 0

    def next(self, what):
        if self.pos >= len(self.lines):
            last = self.lines[-1][0] if self.lines else 0
            raise MeshParseError(f"unexpected end of file, expected {what}", last + 1)
        item = self.lines[self.pos]
        self.pos += 1
        return item

    def done(self):
        return self.pos >= len(self.lines)


def _keyword(lines, key):
    lineno, toks = lines.next(f"'{key}' header")
    if toks[0] != key or len(toks) != 2:
        raise MeshParseError(f"expected '{key} <value>', got {' '.join(toks)!r}", lineno)
    return lineno, toks[1]


def _count(lines, key):
    lineno, val = _keyword(lines, key)
    try:
        n = int(val)
    except ValueError:
        raise MeshParseError(f"invalid {key} count {val!r}", lineno) from None
    if n < 0:
        raise MeshParseError(f"negative {key} count", lineno)
    return n


def _table(lines, n, ncols, conv, what):
    rows = []
    for _ in range(n):
        lineno, toks = lines.next(f"{what} row")
        if len(toks) != ncols:
            raise MeshParseError(f"{what} row needs {ncols} columns, got {len(toks)}", lineno)
        try:
            rows.append([conv(t) for t in toks])
        except ValueError:
            raise MeshParseError(f"invalid {what} entry in {' '.join(toks)!r}", lineno) from None
        rows[-1].append(lineno)
    return rows


def read_mesh(path):
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_mesh(fh.read())


def parse_mesh(text):
    lines = _Lines(text)
    lineno, version = _keyword(lines, "ellmesh")
    if version != str(FORMAT_VERSION):
        raise MeshParseError(f"unsupported ellmesh version {version}", lineno)
    lineno, kind = _keyword(lines, "kind")
    if kind not in KINDS:
        raise MeshParseError(f"unknown kind {kind!r}", lineno)
    lineno, toks = lines.next("dim/order/ambient header")
    if len(toks) != 6 or toks[0::2] != ["dim", "order", "ambient"]:
        raise MeshParseError("expected 'dim <d> order <p> ambient <m>'", lineno)
    try:
        d, p, m = (int(t) for t in toks[1::2])
    except ValueError:
        raise MeshParseError("dim/order/ambient must be integers", lineno) from None
    if (d, p) not in SUPPORTED:
        raise MeshParseError(f"unsupported dim {d} order {p}", lineno)
    expect_m = d if kind == "bulk" else d + 1
    if m != expect_m:
        raise MeshParseError(f"ambient dimension {m} inconsistent with {kind} d={d}", lineno)
    nref = comb(p + d, d)

    nn = _count(lines, "nodes")
    node_rows = _table(lines, nn, m, float, "node")
    ne_line = lines.lines[lines.pos][0] if not lines.done() else None
    ne = _count(lines, "elements")
    if ne == 0:
        raise MeshParseError("elements section is empty", ne_line)
    elem_rows = _table(lines, ne, nref, int, "element")
    for row in elem_rows:
        idx, ln = row[:-1], row[-1]
        if min(idx) < 1 or max(idx) > nn:
            raise MeshParseError(f"element index out of bounds 1..{nn}", ln)

    boundary = None
    if not lines.done():
        if kind != "bulk":
            raise MeshParseError("boundary section only allowed for bulk meshes", lines.lines[lines.pos][0])
        nb = _count(lines, "boundary")
        b_rows = _table(lines, nb, 1, int, "boundary")
        for row in b_rows:
            if not 1 <= row[0] <= nn:
                raise MeshParseError(f"boundary index out of bounds 1..{nn}", row[1])
        boundary = np.array([r[0] for r in b_rows], dtype=np.int64) - 1
        if not lines.done():
            raise MeshParseError("trailing content after boundary section", lines.lines[lines.pos][0])

    nodes = np.array([r[:-1] for r in node_rows], dtype=float).reshape(nn, m)
    elements = np.array([r[:-1] for r in elem_rows], dtype=np.int64) - 1
    return Mesh(kind, d, p, nodes, elements, boundary)


# ----------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    severity: str  # "error" | "warning"
    code: str
    message: str
    elements: tuple = field(default=())


def _facets(d):
    """Local corner-index tuples of the facets of a d-simplex."""
    n = d + 1
    return [tuple(i for i in range(n) if i != skip) for skip in range(n)]


def boundary_facets(mesh):
    """Corner facets (sorted node tuples) that belong to exactly one element."""
    corners = mesh.corners
    facets = np.concatenate([np.sort(corners[:, list(f)], axis=1) for f in _facets(mesh.d)])
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return uniq[counts == 1]


def _orientation_report(mesh):
    """Consistency of element orientation for codimension-1 surface meshes."""
    out = []
    corners = mesh.corners
    # Build oriented facet incidences: facet (sorted) -> list of (element, sign)
    inc = defaultdict(list)
    if mesh.d == 1:
        for e, (a, b) in enumerate(corners.tolist()):
            inc[(a,)].append((e, +1))
            inc[(b,)].append((e, -1))
    else:
        for e, (a, b, c) in enumerate(corners.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                inc[key].append((e, +1 if u < v else -1))

    adj = defaultdict(list)
    for key, lst in inc.items():
        if len(lst) > 2:
            out.append(
                Violation("error", "non-manifold", f"facet {key} shared by {len(lst)} elements", tuple(e for e, _ in lst))
            )
            continue
        if len(lst) == 2:
            (e1, s1), (e2, s2) = lst
            # consistent orientation means opposite traversal: s1 == -s2
            same = s1 == s2
            adj[e1].append((e2, same))
            adj[e2].append((e1, same))

    flip = np.full(mesh.n_elements, -1, dtype=np.int64)
    contradictions = []
    for start in range(mesh.n_elements):
        if flip[start] >= 0:
            continue
        flip[start] = 0
        comp = [start]
        queue = deque([start])
        while queue:
            e = queue.popleft()
            for nb, same in adj[e]:
                want = flip[e] ^ int(same)
                if flip[nb] < 0:
                    flip[nb] = want
                    comp.append(nb)
                    queue.append(nb)
                elif flip[nb] != want:
                    contradictions.append((e, nb))
        comp = np.array(comp)
        flipped = comp[flip[comp] == 1]
        if 0 < flipped.size:
            minority = flipped if 2 * flipped.size <= comp.size else comp[flip[comp] == 0]
            out.append(
                Violation(
                    "error",
                    "orientation",
                    f"{minority.size} element(s) oriented against their neighbours",
                    tuple(int(e) for e in np.sort(minority)),
                )
            )
    if contradictions:
        els = sorted({e for pair in contradictions for e in pair})
        out.append(Violation("error", "non-orientable", "no consistent orientation exists", tuple(els)))
    return out


def validate(mesh):
    """Check the mesh invariants and return a list of violations (empty when clean)."""
    from .assembly import element_geometry_all  # local import: assembly depends on mesh

    report = []
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[mesh.elements.ravel()] = True
    if not used.all():
        unused = np.flatnonzero(~used)
        report.append(Violation("error", "unused-node", f"{unused.size} node(s) not referenced by any element: {unused[:10].tolist()}"))

    rows_sorted = np.sort(mesh.elements, axis=1)
    repeated = (np.diff(rows_sorted, axis=1) == 0).any(axis=1)
    if repeated.any():
        report.append(
            Violation("error", "repeated-node", "element lists a node more than once", tuple(np.flatnonzero(repeated).tolist()))
        )
    _, inv, counts = np.unique(rows_sorted, axis=0, return_inverse=True, return_counts=True)
    inv = np.asarray(inv).ravel()
    dup = np.flatnonzero(counts[inv] > 1)
    if dup.size:
        report.append(Violation("warning", "duplicate-element", "elements with identical node sets", tuple(dup.tolist())))

    if mesh.p == 2:
        # edge nodes must be shared consistently: one node per undirected corner edge
        pairs = np.concatenate([np.sort(mesh.elements[:, [a, b]], axis=1) for a, b in EDGES[mesh.d]])
        mids = np.concatenate([mesh.elements[:, mesh.d + 1 + k] for k in range(len(EDGES[mesh.d]))])
        table = {}
        bad = set()
        ne = mesh.n_elements
        for i, (key, mid) in enumerate(zip(map(tuple, pairs.tolist()), mids.tolist())):
            if table.setdefault(key, mid) != mid:
                bad.add(i % ne)
        if bad:
            report.append(Violation("error", "edge-node-mismatch", "neighbouring elements disagree on an edge node", tuple(sorted(bad))))

    if mesh.kind == "surface":
        report.extend(_orientation_report(mesh))

    if not repeated.any():
        try:
            _, _, det, signed = element_geometry_all(mesh, signed=True)
        except Exception as exc:  # geometry failure is reported, never raised
            report.append(Violation("error", "geometry", str(exc)))
        else:
            bad = np.flatnonzero((det <= 0).any(axis=1) | (signed <= 0).any(axis=1) | ~np.isfinite(det).all(axis=1))
            if bad.size:
                report.append(
                    Violation("error", "non-positive-measure", "element measure not positive at some quadrature node", tuple(bad.tolist()))
                )
    return report
