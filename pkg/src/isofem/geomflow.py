"""Mean curvature flow: Dziuk's scheme and the normal/curvature (KLL) scheme.

Both re-assemble mass and stiffness matrices on the current surface in every
step. Nodal vector fields are stored as (N, 3) arrays; the KLL unknown
u = (n; H) is an (N, 4) array whose columns are n1, n2, n3, H.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import _padded_grads, assemble_batched, element_geometry
from .errors import DegenerateElementError, PreconditionError, SolverError
from .mesh import boundary_facets, write_mesh
from .reference import basis_grad, precompute
from .sparsela import add_scaled, cg_solve

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "t", "assembly_s", "solve_s", "area", "mean_radius", "normal_drift")


@dataclass(frozen=True)
class BdfScheme:
    """Linearly implicit BDF weights.

    ``delta[j]`` multiplies x^{n-j} in the discrete time derivative and
    ``gamma[j]`` multiplies x^{n-1-j} in the extrapolation.
    """

    q: int
    delta: tuple
    gamma: tuple

    @classmethod
    def of_order(cls, q):
        if q == 1:
            return cls(1, (1.0, -1.0), (1.0,))
        if q == 2:
            return cls(2, (1.5, -2.0, 0.5), (2.0, -1.0))
        raise PreconditionError(f"BDF order {q} not supported (1 or 2)")


# ------------------------------------------------------------------ helpers


def _solve(K, rhs, x0, tol):
    x, info = cg_solve(K, rhs, tol=tol, x0=x0)
    if not info.converged:
        raise SolverError(f"CG did not converge (residual {info.residual:.3e})", info)
    return x


def _scatter(E, loc, n):
    """Sum element contributions loc (B, nref, c) into an (n, c) nodal array."""
    c = loc.shape[-1]
    idx = E.ravel()
    flat = loc.reshape(-1, c)
    return np.column_stack([np.bincount(idx, weights=flat[:, k], minlength=n) for k in range(c)])


def surface_area(M):
    return float(M.sum())


# ------------------------------------------------------------------- Dziuk


def dziuk_step(mesh, tau, tol=1e-10):
    """One linearly implicit step (M + tau A) x^n = M x^{n-1}; returns (x^n, timings)."""
    t0 = time.perf_counter()
    out = assemble_batched(mesh)
    M, A = out.M(), out.A()
    t_asm = time.perf_counter() - t0
    t0 = time.perf_counter()
    x = mesh.nodes
    if tau == 0:
        return x.copy(), {"assembly_s": t_asm, "solve_s": 0.0, "M": M}
    K = add_scaled(M, A, tau)
    rhs = M @ x
    x_new = np.column_stack([_solve(K, rhs[:, k], x[:, k], tol) for k in range(x.shape[1])])
    return x_new, {"assembly_s": t_asm, "solve_s": time.perf_counter() - t0, "M": M}


# ----------------------------------------------------------- KLL nonlinear


def kll_nonlinear_rhs(mesh, u):
    """Nonlinear term f = (f1; f2) on the surface described by ``mesh``.

    With alpha^2 = |grad_Gamma_h n_h|^2 (Frobenius norm of the tangential
    Jacobian of the interpolated normal field), the local vectors are
    sum_i w_i det_i alpha_i^2 u_h(xi_i) phi_k(xi_i) for all four components.
    Returns an (N, 4) array.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_nodes, 4):
        raise PreconditionError(f"u must have shape ({mesh.n_nodes}, 4), got {u.shape}")
    pack = precompute(mesh.d, mesh.p)
    E = mesh.elements
    X = mesh.nodes[E]
    _, C, det = element_geometry(X, pack.grad_Fq, mesh.kind)
    g_pad = _padded_grads(pack, mesh.m)
    u_loc = u[E]  # (B, nref, 4)
    ref_jac = np.einsum("mjq,bjk->bqmk", g_pad, u_loc[:, :, :3])
    tan_jac = np.einsum("bqlm,bqlk->bqmk", C, ref_jac)
    alpha2 = np.einsum("bqmk,bqmk->bq", tan_jac, tan_jac)
    u_q = np.einsum("jq,bjc->bqc", pack.Fq, u_loc)
    integrand = (det * pack.W * alpha2)[..., None] * u_q
    f_loc = np.einsum("bqc,jq->bjc", integrand, pack.Fq)
    return _scatter(E, f_loc, mesh.n_nodes)


def kll_nonlinear_rhs_naive(mesh, u):
    """Per-element, per-quadrature-point loop version of :func:`kll_nonlinear_rhs`."""
    u = np.asarray(u, dtype=float)
    pack = precompute(mesh.d, mesh.p)
    d, m = mesh.d, mesh.m
    f = np.zeros((mesh.n_nodes, 4))
    for e in range(mesh.n_elements):
        nodes = mesh.elements[e]
        X = mesh.nodes[nodes]
        ue = u[nodes]
        fe = np.zeros((len(nodes), 4))
        for q in range(pack.Q):
            T = X.T @ pack.grad_Fq[:, :, q].T
            nrm = np.cross(T[:, 0], T[:, 1]) if d == 2 else np.array([-T[1, 0], T[0, 0]])
            L = np.column_stack([T, nrm])
            C = np.linalg.inv(L)
            g = np.zeros((m, len(nodes)))
            g[:d] = pack.grad_Fq[:, :, q]
            J = C.T @ (g @ ue[:, :3])
            a2 = np.sum(J * J)
            phi = pack.Fq[:, q]
            fe += pack.W[q] * np.linalg.norm(nrm) * a2 * np.outer(phi, phi @ ue)
        f[nodes] += fe
    return f


def pack_u(u):
    """(N, 4) -> flat 4N vector ordered component-major (entry j + k N)."""
    return np.asarray(u).T.ravel()


def unpack_u(flat):
    flat = np.asarray(flat)
    return flat.reshape(4, -1).T


# -------------------------------------------------------------- KLL step


@dataclass
class FlowState:
    x: np.ndarray
    n: np.ndarray | None = None
    H: np.ndarray | None = None
    v: np.ndarray | None = None
    t: float = 0.0

    @property
    def u(self):
        return np.column_stack([self.n, self.H])


def kll_step(mesh, xs, us, tau, scheme, tol=1e-10):
    """Advance the KLL system by one step.

    ``xs`` and ``us`` hold the last q states, oldest first, as (N, 3) and
    (N, 4) arrays; ``mesh`` supplies the connectivity. Returns
    (x^n, u^n, v^n, timings).
    """
    q = scheme.q
    if len(xs) < q or len(us) < q:
        raise PreconditionError(f"BDF{q} needs {q} previous states, got {min(len(xs), len(us))}")
    past_x = xs[::-1][:q]  # x^{n-1}, x^{n-2}, ...
    past_u = us[::-1][:q]
    x_ext = sum(g * x for g, x in zip(scheme.gamma, past_x))
    u_ext = sum(g * u for g, u in zip(scheme.gamma, past_u))
    m_ext = mesh.with_nodes(x_ext)

    t0 = time.perf_counter()
    out = assemble_batched(m_ext)
    M, A = out.M(), out.A()
    f = kll_nonlinear_rhs(m_ext, u_ext)
    t_asm = time.perf_counter() - t0

    t0 = time.perf_counter()
    d0 = scheme.delta[0]
    K = add_scaled(A, M, d0 / tau)
    hist = sum(dj * u for dj, u in zip(scheme.delta[1:], past_u))
    rhs = -(M @ hist) / tau + f
    u_new = np.column_stack([_solve(K, rhs[:, k], u_ext[:, k], tol) for k in range(4)])
    v = -u_new[:, 3:4] * u_new[:, :3]
    x_hist = sum(dj * x for dj, x in zip(scheme.delta[1:], past_x))
    x_new = (tau * v - x_hist) / d0
    return x_new, u_new, v, {"assembly_s": t_asm, "solve_s": time.perf_counter() - t0, "M": M}


# ------------------------------------------------------------ initial data


def sphere_exact_state(mesh, t=0.0, radius=1.0):
    """Exact shrinking-sphere data at time t: R(t) = sqrt(R0^2 - 4t), n = x/|x|, H = 2/R."""
    R = np.sqrt(radius**2 - 4.0 * t)
    x0 = mesh.nodes
    n = x0 / np.linalg.norm(x0, axis=1, keepdims=True)
    H = np.full(mesh.n_nodes, 2.0 / R)
    x = x0.copy() if t == 0 else x0 * (R / radius)
    return FlowState(x, n, H, -H[:, None] * n, t)


def _local_normals(mesh):
    """Unit element normals at each local node position, (E, nref, 3)."""
    pack_nodes = precompute(mesh.d, mesh.p).element.node_coords
    g = basis_grad(mesh.d, mesh.p, pack_nodes)  # (d, nref, nref_pts)
    L, _, _ = element_geometry(mesh.nodes[mesh.elements], g, mesh.kind)
    n = L[..., -1]
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _corner_angles(mesh):
    X = mesh.nodes[mesh.corners]
    ang = np.empty(mesh.corners.shape)
    for a in range(3):
        u = X[:, (a + 1) % 3] - X[:, a]
        w = X[:, (a + 2) % 3] - X[:, a]
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang[:, a] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return ang


def discrete_initial_state(mesh, tol=1e-12):
    """Nodal normals by angle-weighted averaging and H from the weak identity -Delta x = H n."""
    if mesh.d != 2 or mesh.kind != "surface":
        raise PreconditionError("KLL initial data needs a 2D surface mesh")
    n_loc = _local_normals(mesh)
    weights = np.full(mesh.elements.shape, np.pi)
    weights[:, :3] = _corner_angles(mesh)
    acc = _scatter(mesh.elements, n_loc * weights[..., None], mesh.n_nodes)
    n = acc / np.linalg.norm(acc, axis=1, keepdims=True)
    out = assemble_batched(mesh)
    M, A = out.M(), out.A()
    rhs = A @ mesh.nodes
    w = np.column_stack([_solve(M, rhs[:, k], None, tol) for k in range(3)])  # nodal H n
    H = np.einsum("ij,ij->i", w, n)
    return FlowState(mesh.nodes.copy(), n, H, -H[:, None] * n, 0.0)


# ----------------------------------------------------------------- driver


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (t, x) pairs
    log: list = field(default_factory=list)  # dict rows with LOG_COLUMNS
    final: FlowState | None = None
    stopped_early: bool = False
    reason: str = ""

    def assembly_fraction(self):
        asm = sum(r["assembly_s"] for r in self.log)
        tot = asm + sum(r["solve_s"] for r in self.log)
        return asm / tot if tot > 0 else float("nan")

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.log:
                w.writerow({k: row[k] for k in LOG_COLUMNS})


def _diagnostics(x, M, n=None):
    c = x.mean(axis=0)
    radius = float(np.linalg.norm(x - c, axis=1).mean())
    drift = float(np.abs(np.linalg.norm(n, axis=1) - 1.0).max()) if n is not None else float("nan")
    return surface_area(M), radius, drift


def _is_sphere(mesh, tol=1e-10):
    r = np.linalg.norm(mesh.nodes, axis=1)
    return np.abs(r - r.mean()).max() <= tol * r.mean()


def flow_driver(
    mesh,
    algorithm="kll",
    tau=0.002,
    T=1.0,
    bdf=2,
    initial="auto",
    snap_every=0,
    out_dir=None,
    tol=1e-10,
):
    """Run mean curvature flow to time T and record per-step diagnostics.

    ``initial`` selects KLL start data: "sphere" (exact), "discrete", or
    "auto" (exact if every node lies on a common origin-centred sphere).
    Snapshots are kept every ``snap_every`` steps (and written as ellmesh
    files when ``out_dir`` is given). A degenerating mesh or failing solver
    ends the run early with the partial trajectory.
    """
    if mesh.kind != "surface" or mesh.d != 2:
        raise PreconditionError("mean curvature flow needs a 2D surface mesh")
    if boundary_facets(mesh).size:
        raise PreconditionError("surface mesh is not closed")
    if tau <= 0 and T > 0:
        raise PreconditionError("time step must be positive")
    nsteps = 0 if T <= 0 else int(round(T / tau))
    traj = Trajectory()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def snapshot(step, t, x):
        traj.snapshots.append((t, x.copy()))
        if out_dir is not None:
            write_mesh(mesh.with_nodes(x), os.path.join(out_dir, f"snapshot_{step:06d}.ellmesh"))

    def record(step, t, timings, x, n=None):
        area, radius, drift = _diagnostics(x, timings["M"], n)
        traj.times.append(t)
        traj.log.append(
            {"step": step, "t": t, "assembly_s": timings["assembly_s"], "solve_s": timings["solve_s"],
             "area": area, "mean_radius": radius, "normal_drift": drift}
        )

    M0 = assemble_batched(mesh).M()
    if algorithm == "dziuk":
        x = mesh.nodes.copy()
        record(0, 0.0, {"assembly_s": 0.0, "solve_s": 0.0, "M": M0}, x)
        snapshot(0, 0.0, x)
        for step in range(1, nsteps + 1):
            try:
                x, timings = dziuk_step(mesh.with_nodes(x), tau, tol)
                M = assemble_batched(mesh.with_nodes(x)).M()
            except (DegenerateElementError, SolverError) as exc:
                traj.stopped_early, traj.reason = True, f"step {step}: {exc}"
                log.warning("flow stopped: %s", traj.reason)
                break
            timings["M"] = M
            record(step, step * tau, timings, x)
            if snap_every and step % snap_every == 0:
                snapshot(step, step * tau, x)
        traj.final = FlowState(x, t=traj.times[-1])
        return traj

    if algorithm != "kll":
        raise PreconditionError(f"unknown flow algorithm {algorithm!r}")
    scheme = BdfScheme.of_order(bdf)
    if initial == "auto":
        initial = "sphere" if _is_sphere(mesh) else "discrete"
    if initial == "sphere":
        R0 = float(np.linalg.norm(mesh.nodes, axis=1).mean())
        states = [sphere_exact_state(mesh, 0.0, R0)]
    elif initial == "discrete":
        states = [discrete_initial_state(mesh)]
    else:
        raise PreconditionError(f"unknown initial data {initial!r}")
    s0 = states[0]
    record(0, 0.0, {"assembly_s": 0.0, "solve_s": 0.0, "M": M0}, s0.x, s0.n)
    snapshot(0, 0.0, s0.x)

    step = 1
    if scheme.q == 2 and nsteps >= 1:
        if initial == "sphere":
            st = sphere_exact_state(mesh, tau, R0)
            M = assemble_batched(mesh.with_nodes(st.x)).M()
            timings = {"assembly_s": 0.0, "solve_s": 0.0}
        else:
            x1, u1, v1, timings = kll_step(mesh, [s0.x], [s0.u], tau, BdfScheme.of_order(1), tol)
            st = FlowState(x1, u1[:, :3], u1[:, 3], v1, tau)
            M = assemble_batched(mesh.with_nodes(x1)).M()
        states.append(st)
        timings["M"] = M
        record(1, tau, timings, st.x, st.n)
        step = 2

    for step in range(step, nsteps + 1):
        xs = [s.x for s in states[-scheme.q:]]
        us = [s.u for s in states[-scheme.q:]]
        try:
            x, u, v, timings = kll_step(mesh, xs, us, tau, scheme, tol)
            timings["M"] = assemble_batched(mesh.with_nodes(x)).M()
        except (DegenerateElementError, SolverError) as exc:
            traj.stopped_early, traj.reason = True, f"step {step}: {exc}"
            log.warning("flow stopped: %s", traj.reason)
            break
        st = FlowState(x, u[:, :3], u[:, 3], v, step * tau)
        states = states[-scheme.q:] + [st]
        record(step, st.t, timings, x, st.n)
        if snap_every and step % snap_every == 0:
            snapshot(step, st.t, x)
    traj.final = states[-1]
    return traj
