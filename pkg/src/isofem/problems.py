"""Elliptic model problems, discrete error norms and convergence studies."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .assembly import assemble_batched, assemble_load, element_geometry, _padded_grads
from .errors import PreconditionError, SolverError
from .mesh import boundary_facets
from .reference import precompute
from .sparsela import add_scaled, apply_dirichlet, cg_solve, cg_solve_meanfree


@dataclass
class NodalField:
    values: np.ndarray
    mesh: object
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise PreconditionError(f"field has {self.values.shape} values for {self.mesh.n_nodes} nodes")


def _timed_assembly(mesh, batch_size=None):
    t0 = time.perf_counter()
    out = assemble_batched(mesh, batch_size=batch_size)
    M, A = out.M(), out.A()
    return M, A, time.perf_counter() - t0


def solve_surface_poisson(mesh, f, tol=1e-10, load_mode="quadrature", batch_size=None):
    """Mean-free solution of the Laplace-Beltrami problem -Delta u = f on a closed surface."""
    if mesh.kind != "surface":
        raise PreconditionError("surface Poisson needs a surface mesh")
    if boundary_facets(mesh).size:
        raise PreconditionError("surface mesh is not closed")
    M, A, t_asm = _timed_assembly(mesh, batch_size)
    t0 = time.perf_counter()
    b = assemble_load(mesh, f, mode=load_mode, M=M)
    t_asm += time.perf_counter() - t0
    t0 = time.perf_counter()
    u, info = cg_solve_meanfree(A, b, M, tol=tol)
    t_solve = time.perf_counter() - t0
    return NodalField(
        u, mesh, {"t_assembly": t_asm, "t_solve": t_solve, "iterations": info.iterations, "residual": info.residual, "M": M, "A": A}
    )


def solve_bulk_reaction_diffusion(mesh, f, mu, g=0.0, tol=1e-10, load_mode="quadrature", batch_size=None):
    """Solve -Delta u + mu u = f with Dirichlet data g (constant or callable) on the boundary nodes."""
    if mesh.kind != "bulk":
        raise PreconditionError("reaction-diffusion driver needs a bulk mesh")
    if mesh.boundary is None:
        raise PreconditionError("bulk mesh has no boundary node list")
    if mu < 0:
        raise PreconditionError("mu must be non-negative")
    M, A, t_asm = _timed_assembly(mesh, batch_size)
    t0 = time.perf_counter()
    b = assemble_load(mesh, f, mode=load_mode, M=M)
    t_asm += time.perf_counter() - t0
    t0 = time.perf_counter()
    K = add_scaled(A, M, mu)
    gv = g(mesh.nodes[mesh.boundary]) if callable(g) else g
    K_d, b_d = apply_dirichlet(K, b, mesh.boundary, gv)
    u, info = cg_solve(K_d, b_d, tol=tol)
    if not info.converged:
        raise SolverError(f"CG did not converge: residual {info.residual:.3e}", info)
    t_solve = time.perf_counter() - t0
    return NodalField(
        u, mesh, {"t_assembly": t_asm, "t_solve": t_solve, "iterations": info.iterations, "residual": info.residual, "M": M, "A": A}
    )


# -------------------------------------------------------------------- errors


def compute_errors(u_h, u_exact, M=None, A=None):
    """Discrete errors of e = u_h - I_h u_exact: (sqrt(e^T M e), sqrt(e^T A e))."""
    mesh = u_h.mesh
    if M is None or A is None:
        out = assemble_batched(mesh)
        M, A = out.M(), out.A()
    e = u_h.values - np.asarray(u_exact(mesh.nodes), dtype=float)
    l2 = float(np.sqrt(max(e @ (M @ e), 0.0)))
    h1 = float(np.sqrt(max(e @ (A @ e), 0.0)))
    return l2, h1


def compute_errors_quadrature(u_h, u_exact, grad_exact):
    """Errors ||u - u_h|| and ||grad_Gamma_h (u - u_h)|| by quadrature on the discrete domain.

    ``u_exact`` and ``grad_exact`` are evaluated at mapped quadrature points;
    for surfaces they should be extensions constant along the normal, and the
    exact gradient is projected onto each element's tangent space.
    """
    mesh = u_h.mesh
    pack = precompute(mesh.d, mesh.p)
    E = mesh.elements
    X = mesh.nodes[E]
    L, C, det = element_geometry(X, pack.grad_Fq, mesh.kind)
    u_loc = u_h.values[E]  # (B, nref)
    pts = np.einsum("bjm,jq->bqm", X, pack.Fq)
    B, Q, m = pts.shape
    uh_q = u_loc @ pack.Fq  # (B, Q)
    g_pad = _padded_grads(pack, m)
    # grad u_h = C^T (g_pad u_loc)
    ref_grad = np.einsum("mjq,bj->bqm", g_pad, u_loc)
    grad_uh = np.einsum("bqlm,bql->bqm", C, ref_grad)
    flat = pts.reshape(-1, m)
    u_q = np.asarray(u_exact(flat), dtype=float).reshape(B, Q)
    gu = np.asarray(grad_exact(flat), dtype=float).reshape(B, Q, m)
    if mesh.kind == "surface":
        nu = L[..., -1]
        nu = nu / np.linalg.norm(nu, axis=-1, keepdims=True)
        gu = gu - np.einsum("bqm,bqm->bq", gu, nu)[..., None] * nu
    w = det * pack.W
    l2 = math.sqrt(float(np.sum(w * (u_q - uh_q) ** 2)))
    h1 = math.sqrt(float(np.sum(w * np.sum((gu - grad_uh) ** 2, axis=-1))))
    return l2, h1


# --------------------------------------------------------------- problems


@dataclass(frozen=True)
class ModelProblem:
    """A manufactured-solution problem: data, exact solution and its gradient."""

    name: str
    kind: str  # "surface" | "bulk"
    f: Callable
    u: Callable
    grad_u: Callable
    mu: float = 0.0

    def solve(self, mesh, **kw):
        if self.kind == "surface":
            return solve_surface_poisson(mesh, self.f, **kw)
        return solve_bulk_reaction_diffusion(mesh, self.f, self.mu, **kw)


def _sphere_x1x2():
    # extensions constant along normals of the unit sphere
    def u(x):
        r2 = np.einsum("ij,ij->i", x, x)
        return x[:, 0] * x[:, 1] / r2

    def f(x):
        return 6.0 * u(x)

    def grad_u(x):
        r2 = np.einsum("ij,ij->i", x, x)
        g = np.zeros_like(x)
        g[:, 0] = x[:, 1]
        g[:, 1] = x[:, 0]
        g /= r2[:, None]
        return g - (2.0 * x[:, 0] * x[:, 1] / r2**2)[:, None] * x

    return ModelProblem("sphere-x1x2", "surface", f, u, grad_u)


def _disk_radial(mu=10.0):
    def u(x):
        return 1.0 - np.einsum("ij,ij->i", x, x) ** 2

    def f(x):
        r2 = np.einsum("ij,ij->i", x, x)
        return 16.0 * r2 + mu * (1.0 - r2**2)

    def grad_u(x):
        r2 = np.einsum("ij,ij->i", x, x)
        return -4.0 * r2[:, None] * x

    return ModelProblem("disk-radial", "bulk", f, u, grad_u, mu=mu)


PROBLEMS = {"sphere-x1x2": _sphere_x1x2, "disk-radial": _disk_radial}


def get_problem(name, **kw):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise PreconditionError(f"unknown problem {name!r}; known: {', '.join(sorted(PROBLEMS))}") from None
    return factory(**kw)


# --------------------------------------------------------- convergence study


@dataclass
class ConvergenceRow:
    h: float
    dofs: int
    err_L2: float
    err_H1: float
    eoc_L2: float = float("nan")
    eoc_H1: float = float("nan")
    t_assembly: float = 0.0
    t_solve: float = 0.0


CSV_COLUMNS = ("h", "dofs", "err_L2", "err_H1", "eoc_L2", "eoc_H1", "t_assembly_s", "t_solve_s")


ROUNDOFF_RTOL = 1e-11  # errors below this fraction of the solution norm carry no rate


def eoc(e_prev, e_cur, h_prev, h_cur, floor=0.0):
    """Experimental order; NaN when either error is zero or below ``floor``."""
    if not (e_prev > floor and e_cur > floor) or h_prev == h_cur:
        return float("nan")
    return math.log(e_prev / e_cur) / math.log(h_prev / h_cur)


def convergence_study(problem, meshes, error_mode="quadrature", solve_kw=None):
    """Solve ``problem`` on each mesh and tabulate errors and EOCs.

    ``error_mode`` is "quadrature" (errors against the exact solution at
    quadrature points) or "interpolant" (discrete norms of u_h - I_h u).
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise PreconditionError("a convergence study needs at least two meshes")
    rows = []
    for mesh in meshes:
        sol = problem.solve(mesh, **(solve_kw or {}))
        if error_mode == "quadrature":
            l2, h1 = compute_errors_quadrature(sol, problem.u, problem.grad_u)
        elif error_mode == "interpolant":
            l2, h1 = compute_errors(sol, problem.u, sol.info["M"], sol.info["A"])
        else:
            raise PreconditionError(f"unknown error mode {error_mode!r}")
        u = sol.values
        floor = ROUNDOFF_RTOL * float(np.sqrt(u @ (sol.info["M"] @ u)))
        row = ConvergenceRow(mesh.h(), mesh.n_nodes, l2, h1, t_assembly=sol.info["t_assembly"], t_solve=sol.info["t_solve"])
        if rows:
            prev = rows[-1]
            floor = max(floor, prev_floor)
            row.eoc_L2 = eoc(prev.err_L2, l2, prev.h, row.h, floor)
            row.eoc_H1 = eoc(prev.err_H1, h1, prev.h, row.h, floor)
        rows.append(row)
        prev_floor = floor
    return rows


def write_convergence_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([repr(getattr(r, f.name)) if isinstance(getattr(r, f.name), float) else getattr(r, f.name) for f in fields(r)])
