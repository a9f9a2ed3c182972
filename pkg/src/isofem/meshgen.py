"""Analytic mesh generators, P1 -> P2 preprocessing and closest-point lifting."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import LiftError, PreconditionError, ResourceError
from .mesh import Mesh, boundary_facets
from .reference import EDGES

LIFT_TOL = 1e-12
LIFT_MAX_ITER = 100
MAX_GENERATED_NODES = 20_000_000


# ------------------------------------------------------------ implicit surfaces


@dataclass(frozen=True)
class ImplicitSurface:
    """Zero level set of ``distance``; ``gradient`` is optional (finite differences otherwise)."""

    distance: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    fd_step: float = 1e-6

    def grad(self, x):
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        h = self.fd_step
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = h
            g[:, k] = (self.distance(x + e) - self.distance(x - e)) / (2 * h)
        return g


def sphere_surface(radius=1.0, center=None):
    c = None if center is None else np.asarray(center, dtype=float)

    def dist(x):
        y = x if c is None else x - c
        return np.linalg.norm(y, axis=1) - radius

    def grad(x):
        y = x if c is None else x - c
        return y / np.linalg.norm(y, axis=1, keepdims=True)

    return ImplicitSurface(dist, grad)


def torus_surface(R=1.0, r=0.4):
    """Torus around the z-axis; d(x) = sqrt((rho - R)^2 + z^2) - r."""

    def dist(x):
        rho = np.hypot(x[:, 0], x[:, 1])
        return np.hypot(rho - R, x[:, 2]) - r

    return ImplicitSurface(dist)


def lift_nodes(x, surface, tol=LIFT_TOL, max_iter=LIFT_MAX_ITER):
    """Project points onto ``surface`` by damped gradient steps.

    Each point is moved by y <- y - s * d(y) grad d / |grad d|^2 until
    |d(y)| <= tol; the step s halves whenever the residual grows.
    Raises LiftError listing the points that failed.
    """
    y = np.array(x, dtype=float, copy=True)
    if y.ndim != 2:
        raise PreconditionError("lift_nodes expects a (k, m) coordinate array")
    if y.shape[0] == 0:
        return y
    res = np.asarray(surface.distance(y), dtype=float)
    step = np.ones(y.shape[0])
    active = np.abs(res) > tol
    for _ in range(max_iter):
        if not active.any():
            break
        ya = y[active]
        ra = res[active]
        g = surface.grad(ya)
        gg = np.einsum("ij,ij->i", g, g)
        gg[gg == 0] = np.inf
        trial = ya - (step[active] * ra / gg)[:, None] * g
        r_new = np.asarray(surface.distance(trial), dtype=float)
        better = np.abs(r_new) < np.abs(ra)
        idx = np.flatnonzero(active)
        acc = idx[better]
        y[acc] = trial[better]
        res[acc] = r_new[better]
        step[idx[~better]] *= 0.5
        step[acc] = np.minimum(1.0, 2.0 * step[acc])
        active = (np.abs(res) > tol) & (step > 1e-12)
    failed = np.flatnonzero(~(np.abs(res) <= tol))
    if failed.size:
        raise LiftError(failed, np.abs(res[failed]))
    return y


# ----------------------------------------------------------------- sphere


def _icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _unique_edges(elements, d):
    """Unique undirected corner edges and, per element, the index of each local edge."""
    local = EDGES[d]
    pairs = np.stack([np.sort(elements[:, [a, b]], axis=1) for a, b in local], axis=1)  # (E, ne, 2)
    flat = pairs.reshape(-1, 2)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    return uniq, np.asarray(inv).reshape(pairs.shape[:2])


def _subdivide_triangles(nodes, tris):
    edges, eidx = _unique_edges(tris, 2)
    mid = (nodes[edges[:, 0]] + nodes[edges[:, 1]]) / 2.0
    n0 = nodes.shape[0]
    m = eidx + n0  # (E, 3): midpoints of (0,1), (1,2), (2,0)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    new = np.concatenate(
        [
            np.stack([a, m[:, 0], m[:, 2]], axis=1),
            np.stack([m[:, 0], b, m[:, 1]], axis=1),
            np.stack([m[:, 2], m[:, 1], c], axis=1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
        ]
    )
    return np.vstack([nodes, mid]), new


def generate_sphere(refinements, p=1, radius=1.0):
    """Icosphere with 20 * 4**refinements outward-oriented triangles, all nodes on the sphere."""
    if refinements < 0:
        raise PreconditionError("refinements must be >= 0")
    if 12 * 4**refinements > MAX_GENERATED_NODES:
        raise ResourceError(f"icosphere with {refinements} refinements exceeds the node budget")
    nodes, tris = _icosahedron()
    for _ in range(refinements):
        nodes, tris = _subdivide_triangles(nodes, tris)
        nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
    mesh = Mesh("surface", 2, 1, nodes * radius, tris)
    if p == 2:
        mesh, _ = mesh_preprocess(mesh, 2, lift=sphere_surface(radius))
    elif p != 1:
        raise PreconditionError(f"unsupported order {p}")
    return mesh


# ------------------------------------------------------------------- circle


def generate_circle(nseg, p=1, radius=1.0):
    """Closed polygon with ``nseg`` anticlockwise segments on the circle."""
    if nseg < 3:
        raise PreconditionError("a circle needs at least 3 segments")
    t = 2 * np.pi * np.arange(nseg) / nseg
    nodes = radius * np.column_stack([np.cos(t), np.sin(t)])
    segs = np.column_stack([np.arange(nseg), (np.arange(nseg) + 1) % nseg])
    mesh = Mesh("surface", 1, 1, nodes, segs)
    if p == 2:
        mesh, _ = mesh_preprocess(mesh, 2, lift=sphere_surface(radius))
    elif p != 1:
        raise PreconditionError(f"unsupported order {p}")
    return mesh


# ---------------------------------------------------------------- disk/ball


def _squircle_map(x):
    """Map the cube [-1,1]^m onto the unit ball, scaling each ray by |x|_inf / |x|_2."""
    r2 = np.linalg.norm(x, axis=1)
    rinf = np.abs(x).max(axis=1)
    scale = np.divide(rinf, r2, out=np.ones_like(r2), where=r2 > 0)
    return x * scale[:, None]


def _grid_size(h, m):
    if not h > 0:
        raise PreconditionError("mesh size h must be positive")
    # even cell count keeps the origin on a grid line, so mirrored cells conform
    n = 2 * max(1, int(np.ceil(1.0 / h)))
    if (n + 1) ** m > MAX_GENERATED_NODES:
        raise ResourceError(f"h={h} needs {(n + 1) ** m} nodes, over the budget of {MAX_GENERATED_NODES}")
    return n


def _orient_positive(nodes, elems):
    """Swap the first two corners wherever the simplex volume is negative."""
    X = nodes[elems]
    J = X[:, 1:] - X[:, :1]
    neg = np.linalg.det(J) < 0
    elems = elems.copy()
    elems[neg, 0], elems[neg, 1] = elems[neg, 1].copy(), elems[neg, 0].copy()
    return elems


def _cube_mesh(n, m):
    """Structured simplicial mesh of [-1,1]^m with n cells per side.

    In every cell the splitting diagonal runs from the corner nearest the
    origin to the opposite corner, so no simplex has all corners on the
    outer boundary.
    """
    g = np.linspace(-1.0, 1.0, n + 1)
    grids = np.meshgrid(*([g] * m), indexing="ij")
    nodes = np.column_stack([gr.ravel() for gr in grids])
    strides = np.array([(n + 1) ** (m - 1 - k) for k in range(m)])
    cells = np.array(list(itertools.product(range(n), repeat=m)))  # (nc, m) lower corner
    centre = cells + 0.5 - n / 2.0
    flipdir = centre < 0  # along these axes the inner corner is the upper one
    elems = []
    for perm in itertools.permutations(range(m)):
        path = [np.zeros_like(cells)]
        for ax in perm:
            step = path[-1].copy()
            step[:, ax] = 1
            path.append(step)
        verts = []
        for off in path:
            off = np.where(flipdir, 1 - off, off)
            verts.append((cells + off) @ strides)
        elems.append(np.stack(verts, axis=1))
    elems = np.concatenate(elems)
    return nodes, elems


def _ball_mesh(h, m):
    n = _grid_size(h, m)
    nodes, elems = _cube_mesh(n, m)
    boundary = np.flatnonzero(np.isclose(np.abs(nodes).max(axis=1), 1.0))
    nodes = _squircle_map(nodes)
    elems = _orient_positive(nodes, elems)
    return Mesh("bulk", m, 1, nodes, elems, boundary)


def generate_disk(h):
    """P1 triangulation of the unit disk with boundary nodes on the circle."""
    return _ball_mesh(h, 2)


def generate_ball(h):
    """P1 tetrahedral mesh of the unit ball with boundary nodes on the sphere."""
    return _ball_mesh(h, 3)


def generate_square(n, p=1):
    """Structured P1 triangulation of [-1,1]^2 (flat, straight-edged domain)."""
    nodes, elems = _cube_mesh(n, 2)
    boundary = np.flatnonzero(np.isclose(np.abs(nodes).max(axis=1), 1.0))
    mesh = Mesh("bulk", 2, 1, nodes, _orient_positive(nodes, elems), boundary)
    if p == 2:
        mesh, _ = mesh_preprocess(mesh, 2)
    return mesh


def generate_cube(n, p=1):
    """Structured P1 tetrahedral mesh of [-1,1]^3 with 6 n^3 elements."""
    if 3 * (n + 1) ** 3 > MAX_GENERATED_NODES:
        raise ResourceError(f"cube with n={n} exceeds the node budget")
    nodes, elems = _cube_mesh(n, 3)
    boundary = np.flatnonzero(np.isclose(np.abs(nodes).max(axis=1), 1.0))
    mesh = Mesh("bulk", 3, 1, nodes, _orient_positive(nodes, elems), boundary)
    if p == 2:
        mesh, _ = mesh_preprocess(mesh, 2)
    return mesh


def generate_torus(n_major, n_minor, R=1.0, r=0.4, p=1):
    """Parametric torus triangulation with outward orientation."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    U, V = np.meshgrid(u, v, indexing="ij")
    nodes = np.column_stack(
        [((R + r * np.cos(V)) * np.cos(U)).ravel(), ((R + r * np.cos(V)) * np.sin(U)).ravel(), (r * np.sin(V)).ravel()]
    )
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    mesh = Mesh("surface", 2, 1, nodes, tris)
    if p == 2:
        mesh, _ = mesh_preprocess(mesh, 2, lift=torus_surface(R, r))
    return mesh


def half_disk_example():
    """The two-element P2 half-disk bulk mesh (nodes on the unit circle normalised)."""
    s = np.sqrt(2.0) / 2.0
    nodes = np.array(
        [[-1, 0], [0, 0], [0, 1], [-0.5, 0], [0, 0.5], [-s, s], [1, 0], [0.5, 0], [s, s]], dtype=float
    )
    elements = np.array([[1, 2, 3, 4, 5, 6], [2, 7, 3, 8, 9, 5]]) - 1
    return Mesh("bulk", 2, 2, nodes, elements, boundary=np.array([0, 2, 5, 6, 8, 3, 1, 7]))


# ------------------------------------------------------------ preprocessing

_PLOT_SPLIT = {
    1: [(0, 2), (2, 1)],
    2: [(0, 3, 5), (3, 1, 4), (5, 4, 2), (3, 4, 5)],
    # corners then edges 4:(0,1) 5:(1,2) 6:(2,0) 7:(0,3) 8:(1,3) 9:(2,3)
    3: [(0, 4, 6, 7), (4, 1, 5, 8), (6, 5, 2, 9), (7, 8, 9, 3), (4, 5, 6, 8), (4, 6, 7, 8), (6, 5, 9, 8), (6, 9, 7, 8)],
}


def plot_elements(mesh):
    """Split every P2 element into 2**d linear simplices for plotting."""
    if mesh.p != 2:
        return mesh.elements.copy()
    split = np.array(_PLOT_SPLIT[mesh.d])
    out = mesh.elements[:, split].reshape(-1, mesh.d + 1)
    if mesh.kind == "bulk":
        out = _orient_positive(mesh.nodes, out)
    return out


def mesh_preprocess(mesh, p=2, lift=None):
    """Promote a P1 mesh to P2 by inserting one shared node per unique edge.

    New nodes start at edge midpoints and, when ``lift`` is given, are projected
    onto the implicit surface: every new node for surface meshes, only nodes on
    boundary edges for bulk meshes. Returns (P2 mesh, plot connectivity).
    """
    if mesh.p != 1:
        raise PreconditionError(f"mesh_preprocess expects a P1 mesh, got p={mesh.p}")
    if p == 1:
        return mesh, mesh.elements.copy()
    if p != 2:
        raise PreconditionError(f"target order {p} is not supported (only 2)")
    d = mesh.d
    edges, eidx = _unique_edges(mesh.elements, d)
    n0 = mesh.n_nodes
    mid = (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]]) / 2.0
    boundary = None if mesh.boundary is None else mesh.boundary.copy()
    if mesh.kind == "bulk":
        bfac = boundary_facets(mesh)
        bedges = set()
        for f in bfac.tolist():
            for a, b in itertools.combinations(sorted(f), 2):
                bedges.add((a, b))
        on_bnd = np.array([(int(a), int(b)) in bedges for a, b in edges], dtype=bool)
        if lift is not None and on_bnd.any():
            mid[on_bnd] = lift_nodes(mid[on_bnd], lift)
        if boundary is not None:
            boundary = np.concatenate([boundary, n0 + np.flatnonzero(on_bnd)])
    elif lift is not None:
        mid = lift_nodes(mid, lift)
    nodes = np.vstack([mesh.nodes, mid])
    elements = np.hstack([mesh.elements, eidx + n0])
    p2 = Mesh(mesh.kind, d, 2, nodes, elements, boundary)
    return p2, plot_elements(p2)
