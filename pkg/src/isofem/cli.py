"""Command-line interface: mesh tooling, elliptic solves, flows and benchmarks.

Exit codes: 0 ok, 2 usage, 3 bad input data, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import ast
import csv
import logging
import math
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import assembly, geomflow, meshgen, problems
from .errors import (
    DegenerateElementError,
    EvaluationError,
    IsofemError,
    LiftError,
    MeshValidationError,
    ResourceError,
    SolverError,
)
from .mesh import read_mesh, validate, write_mesh

log = logging.getLogger("isofem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------- expressions

_ALLOWED_NAMES = {"x": 0, "y": 1, "z": 2, "x1": 0, "x2": 1, "x3": 2}


def parse_polynomial(expr):
    """Compile a polynomial in x, y, z (or x1, x2, x3) into f(points) -> values.

    Only numbers, the coordinate names, +, -, * and ** with a non-negative
    integer literal exponent are accepted.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise UsageError(f"cannot parse expression {expr!r}: {exc.msg}") from None

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            v = float(node.value)
            return lambda x: np.full(x.shape[0], v)
        if isinstance(node, ast.Name) and node.id in _ALLOWED_NAMES:
            k = _ALLOWED_NAMES[node.id]

            def coord(x):
                if k >= x.shape[1]:
                    raise EvaluationError(f"coordinate {node.id} undefined in {x.shape[1]}D")
                return x[:, k]

            return coord
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            f = build(node.operand)
            return (lambda x: -f(x)) if isinstance(node.op, ast.USub) else f
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Pow):
                e = node.right
                if not (isinstance(e, ast.Constant) and isinstance(e.value, int) and e.value >= 0):
                    raise UsageError("exponents must be non-negative integer literals")
                f, n = build(node.left), e.value
                return lambda x: f(x) ** n
            a, b = build(node.left), build(node.right)
            if isinstance(node.op, ast.Add):
                return lambda x: a(x) + b(x)
            if isinstance(node.op, ast.Sub):
                return lambda x: a(x) - b(x)
            if isinstance(node.op, ast.Mult):
                return lambda x: a(x) * b(x)
        raise UsageError(f"unsupported construct in expression {expr!r}: {ast.dump(node)[:40]}")

    return build(tree)


# ---------------------------------------------------------------- mesh cmds


def _surface_by_name(name, radius=1.0, R=1.0, r=0.4):
    if name == "sphere":
        return meshgen.sphere_surface(radius)
    if name == "torus":
        return meshgen.torus_surface(R, r)
    raise UsageError(f"unknown lift surface {name!r} (sphere, torus)")


def cmd_mesh_gen(args):
    kind = args.shape
    if kind == "sphere":
        mesh = meshgen.generate_sphere(args.refine, p=args.order, radius=args.radius)
    elif kind == "circle":
        mesh = meshgen.generate_circle(args.n, p=args.order, radius=args.radius)
    elif kind in ("disk", "ball"):
        mesh = (meshgen.generate_disk if kind == "disk" else meshgen.generate_ball)(args.h)
        if args.order == 2:
            mesh, _ = meshgen.mesh_preprocess(mesh, 2, lift=meshgen.sphere_surface(1.0))
    elif kind == "square":
        mesh = meshgen.generate_square(args.n, p=args.order)
    elif kind == "cube":
        mesh = meshgen.generate_cube(args.n, p=args.order)
    elif kind == "torus":
        mesh = meshgen.generate_torus(args.n, args.n_minor or max(3, args.n // 2), R=args.R, r=args.r, p=args.order)
    elif kind == "half-disk":
        mesh = meshgen.half_disk_example()
    else:  # argparse restricts choices
        raise UsageError(f"unknown shape {kind!r}")
    write_mesh(mesh, args.output)
    print(f"wrote {args.output}: {mesh.n_elements} elements, {mesh.n_nodes} nodes")
    return EXIT_OK


def cmd_mesh_preprocess(args):
    mesh = read_mesh(args.mesh)
    lift = None if args.lift == "none" else _surface_by_name(args.lift, args.radius)
    out, _ = meshgen.mesh_preprocess(mesh, args.order, lift=lift)
    path = args.output or _derived_path(args.mesh, f"_p{args.order}")
    write_mesh(out, path)
    print(f"wrote {path}: {out.n_elements} elements, {out.n_nodes} nodes")
    return EXIT_OK


def cmd_mesh_lift(args):
    mesh = read_mesh(args.mesh)
    surf = _surface_by_name(args.surface, args.radius)
    x = mesh.nodes.copy()
    if mesh.kind == "surface":
        x = meshgen.lift_nodes(x, surf)
    else:
        if mesh.boundary is None:
            raise MeshValidationError("bulk mesh has no boundary node list to lift")
        x[mesh.boundary] = meshgen.lift_nodes(x[mesh.boundary], surf)
    path = args.output or args.mesh
    write_mesh(mesh.with_nodes(x), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_mesh_validate(args):
    mesh = read_mesh(args.mesh)
    issues = validate(mesh)
    for v in issues:
        print(f"{v.severity}: {v.code}: {v.message}")
    errors = [v for v in issues if v.severity == "error"]
    if not issues:
        print("ok")
    return EXIT_DATA if errors else EXIT_OK


def _derived_path(path, suffix):
    stem, ext = os.path.splitext(path)
    return f"{stem}{suffix}{ext or '.ellmesh'}"


# --------------------------------------------------------------- solve cmds


def _problem_from_args(args, kind):
    if args.problem is not None:
        if args.problem not in problems.PROBLEMS:
            raise UsageError(f"unknown problem {args.problem!r}; known: {', '.join(sorted(problems.PROBLEMS))}")
        kw = {"mu": args.mu} if (kind == "bulk" and args.mu is not None) else {}
        prob = problems.get_problem(args.problem, **kw)
        if prob.kind != kind:
            raise UsageError(f"problem {args.problem!r} is a {prob.kind} problem")
        return prob
    if args.f is None:
        raise UsageError("give --problem or --f")
    f = parse_polynomial(args.f)
    mu = 0.0 if args.mu is None else args.mu
    return problems.ModelProblem("user", kind, f, None, None, mu)


def _write_field(path, mesh, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + ["x", "y", "z"][: mesh.m] + ["u"])
        for j in range(mesh.n_nodes):
            w.writerow([j + 1] + [repr(float(c)) for c in mesh.nodes[j]] + [repr(float(values[j]))])


def _cmd_solve(args, kind):
    prob = _problem_from_args(args, kind)
    meshes = [read_mesh(p) for p in args.meshes]
    g = getattr(args, "g", 0.0)
    solve_kw = {"tol": args.tol}
    if kind == "bulk":
        solve_kw["g"] = g if prob.u is None else prob.u
    if len(meshes) > 1 and prob.u is not None:
        rows = problems.convergence_study(prob, meshes, error_mode=args.error_mode, solve_kw=solve_kw)
        path = args.convergence or "convergence.csv"
        problems.write_convergence_csv(rows, path)
        for r in rows:
            print(f"h={r.h:.4g} dofs={r.dofs} L2={r.err_L2:.3e} H1={r.err_H1:.3e} eoc_L2={r.eoc_L2:.2f} eoc_H1={r.eoc_H1:.2f}")
        print(f"wrote {path}")
    for mesh, path in zip(meshes, args.meshes):
        sol = prob.solve(mesh, **solve_kw)
        out = args.output if (args.output and len(meshes) == 1) else _derived_path(path, "_solution").replace(".ellmesh", ".csv")
        _write_field(out, mesh, sol.values)
        msg = f"{path}: {sol.info['iterations']} CG iterations"
        if prob.u is not None and len(meshes) == 1:
            l2, h1 = problems.compute_errors_quadrature(sol, prob.u, prob.grad_u)
            msg += f", L2 error {l2:.3e}, H1 error {h1:.3e}"
        print(msg + f"; wrote {out}")
    return EXIT_OK


def cmd_solve_surface(args):
    return _cmd_solve(args, "surface")


def cmd_solve_bulk(args):
    return _cmd_solve(args, "bulk")


# ----------------------------------------------------------------- flow cmd


def cmd_flow(args):
    mesh = read_mesh(args.mesh)
    out_dir = args.out
    traj = geomflow.flow_driver(
        mesh, algorithm=args.algorithm, tau=args.tau, T=args.T, bdf=args.bdf, initial=args.initial,
        snap_every=args.snap_every, out_dir=out_dir,
    )
    os.makedirs(out_dir, exist_ok=True)
    if not traj.snapshots or traj.snapshots[-1][0] != traj.times[-1]:
        write_mesh(mesh.with_nodes(traj.final.x), os.path.join(out_dir, f"snapshot_{traj.log[-1]['step']:06d}.ellmesh"))
    path = os.path.join(out_dir, "timing.csv")
    cols = geomflow.LOG_COLUMNS + ("assembly_fraction",)
    asm = tot = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in traj.log:
            asm += row["assembly_s"]
            tot += row["assembly_s"] + row["solve_s"]
            frac = asm / tot if tot > 0 else float("nan")
            w.writerow([row[c] for c in geomflow.LOG_COLUMNS] + [frac])
    last = traj.log[-1]
    print(
        f"{args.algorithm}: {last['step']} steps to t={last['t']:.6g}, area {last['area']:.6g}, "
        f"mean radius {last['mean_radius']:.6g}, assembly fraction {traj.assembly_fraction():.3f}"
    )
    print(f"wrote {path}")
    if traj.stopped_early:
        print(f"stopped early: {traj.reason}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRecord:
    backend: str
    kind: str
    d: int
    p: int
    n_elements: int
    dofs: int
    t_assembly_s: float
    t_min_s: float
    t_max_s: float
    repeats: int
    batch_size: int


BENCH_COLUMNS = tuple(BenchRecord.__dataclass_fields__)


def time_assembly(mesh, backend, repeats=3, batch_size=None):
    """Median, min and max wall time of assembly plus finalize after one warm-up run."""
    if repeats < 3:
        raise UsageError("--repeats must be at least 3")
    if backend == "p1fast" and mesh.p != 1:
        raise UsageError("p1fast backend needs a P1 mesh")
    kw = {"batch_size": batch_size} if backend == "batched" else {}

    def run():
        out = assembly.assemble(mesh, backend, **kw)
        out.M()
        out.A()

    run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    used = assembly.resolve_batch_size(mesh, batch_size) if backend == "batched" else mesh.n_elements
    return BenchRecord(
        backend, mesh.kind, mesh.d, mesh.p, mesh.n_elements, mesh.n_nodes,
        statistics.median(times), min(times), max(times), repeats, used,
    )


def dimension_meshes(n_elements, p):
    """One mesh per (kind, d) cell with roughly ``n_elements`` elements."""
    n2 = max(2, round(math.sqrt(n_elements / 2)))
    n3 = max(2, round((n_elements / 6) ** (1 / 3)))
    n3 += n3 % 2
    return [
        meshgen.generate_circle(max(3, n_elements), p=p),
        meshgen.generate_torus(n2, n2, p=p),
        meshgen.generate_square(n2 + n2 % 2, p=p),
        meshgen.generate_cube(n3, p=p),
    ]


def write_bench_csv(records, path):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        if new:
            w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def cmd_bench(args):
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    for b in backends:
        if b not in ("naive", "batched", "p1fast"):
            raise UsageError(f"unknown backend {b!r}")
    if args.dims:
        meshes = dimension_meshes(args.dims, args.order)
    elif args.meshes:
        meshes = [read_mesh(p) for p in args.meshes]
    else:
        lo, _, hi = args.sphere_levels.partition(":")
        levels = range(int(lo), int(hi or lo) + 1)
        meshes = [meshgen.generate_sphere(r, p=args.order) for r in levels]
    records = []
    for mesh in meshes:
        for b in backends:
            if b == "p1fast" and mesh.p != 1:
                continue
            rec = time_assembly(mesh, b, args.repeats, args.batch_size)
            records.append(rec)
            print(
                f"{rec.backend:8s} {rec.kind:8s} d={rec.d} p={rec.p} |E|={rec.n_elements:8d} "
                f"median {rec.t_assembly_s:.4f}s (min {rec.t_min_s:.4f}, max {rec.t_max_s:.4f})"
            )
    write_bench_csv(records, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="isofem", description="Isoparametric finite elements on bulk domains and surfaces.")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for batched assembly")
    ap.add_argument("--seed", type=int, default=0, help="seed for any randomized step")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    # mesh
    mesh = sub.add_parser("mesh", help="mesh generation and tooling").add_subparsers(dest="mesh_cmd", required=True)
    g = mesh.add_parser("gen", help="generate a mesh")
    g.add_argument("shape", choices=["sphere", "circle", "disk", "ball", "square", "cube", "torus", "half-disk"])
    g.add_argument("--refine", type=int, default=2)
    g.add_argument("--order", type=int, default=1, choices=[1, 2])
    g.add_argument("--h", type=float, default=0.25)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--n-minor", type=int, default=None)
    g.add_argument("--radius", type=float, default=1.0)
    g.add_argument("--R", type=float, default=1.0)
    g.add_argument("--r", type=float, default=0.4)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_mesh_gen)
    g = mesh.add_parser("preprocess", help="promote a P1 mesh to P2")
    g.add_argument("mesh")
    g.add_argument("--order", type=int, default=2, choices=[1, 2])
    g.add_argument("--lift", default="none", choices=["none", "sphere", "torus"])
    g.add_argument("--radius", type=float, default=1.0)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_mesh_preprocess)
    g = mesh.add_parser("lift", help="project nodes onto an implicit surface")
    g.add_argument("mesh")
    g.add_argument("--surface", default="sphere", choices=["sphere", "torus"])
    g.add_argument("--radius", type=float, default=1.0)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_mesh_lift)
    g = mesh.add_parser("validate", help="report mesh violations")
    g.add_argument("mesh")
    g.set_defaults(func=cmd_mesh_validate)

    # solve
    solve = sub.add_parser("solve", help="elliptic model problems").add_subparsers(dest="solve_cmd", required=True)
    for name, func, kind in (("poisson-surface", cmd_solve_surface, "surface"), ("poisson-bulk", cmd_solve_bulk, "bulk")):
        g = solve.add_parser(name)
        g.add_argument("meshes", nargs="+", help="one mesh, or a refinement sequence for a convergence study")
        g.add_argument("--problem", help=f"built-in problem id ({', '.join(sorted(problems.PROBLEMS))})")
        g.add_argument("--f", help="polynomial right-hand side in x, y, z")
        g.add_argument("--mu", type=float, default=None)
        if kind == "bulk":
            g.add_argument("--g", type=float, default=0.0, help="constant Dirichlet value for --f runs")
        g.add_argument("--tol", type=float, default=1e-10)
        g.add_argument("--error-mode", default="quadrature", choices=["quadrature", "interpolant"])
        g.add_argument("--convergence", help="convergence CSV path")
        g.add_argument("-o", "--output", help="solution CSV path (single mesh)")
        g.set_defaults(func=func)

    # flow
    flow = sub.add_parser("flow", help="mean curvature flow")
    flow.add_argument("algorithm", choices=["dziuk", "kll"])
    flow.add_argument("mesh")
    flow.add_argument("--tau", type=float, default=0.002)
    flow.add_argument("--T", type=float, default=1.0)
    flow.add_argument("--bdf", type=int, default=2, choices=[1, 2])
    flow.add_argument("--initial", default="auto", choices=["auto", "sphere", "discrete"])
    flow.add_argument("--snap-every", type=int, default=0)
    flow.add_argument("--out", default="flow_out")
    flow.set_defaults(func=cmd_flow)

    # bench
    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="bench_cmd", required=True)
    g = bench.add_parser("assembly", help="time matrix assembly")
    g.add_argument("meshes", nargs="*")
    g.add_argument("--sphere-levels", default="2:5", help="icosphere refinement range lo:hi when no meshes are given")
    g.add_argument("--order", type=int, default=2, choices=[1, 2])
    g.add_argument("--dims", type=int, default=0, metavar="N", help="sweep (kind, d) cells at about N elements")
    g.add_argument("--backends", default="batched")
    g.add_argument("--repeats", type=int, default=3)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("-o", "--output", default="bench.csv")
    g.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    assembly.DEFAULT_WORKERS = args.threads
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ResourceError as exc:
        print(f"error: {exc}; try a smaller --batch-size", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, LiftError, DegenerateElementError, EvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IsofemError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
