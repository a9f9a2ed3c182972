import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from isofem.assembly import assemble_batched, assemble_load
from isofem.errors import PreconditionError
from isofem.meshgen import generate_disk, generate_sphere, generate_square, half_disk_example
from isofem.problems import (
    CSV_COLUMNS,
    NodalField,
    compute_errors,
    compute_errors_quadrature,
    convergence_study,
    eoc,
    get_problem,
    solve_bulk_reaction_diffusion,
    solve_surface_poisson,
    write_convergence_csv,
)


@pytest.fixture(scope="module")
def sphere_problem():
    return get_problem("sphere-x1x2")


# ------------------------------------------------------------ surface Poisson


def test_sphere_x1x2_p2_small_error(sphere_problem):
    m = generate_sphere(3, p=2)
    sol = solve_surface_poisson(m, sphere_problem.f)
    exact = m.nodes[:, 0] * m.nodes[:, 1]
    assert np.abs(sol.values - exact).max() < 1e-3
    l2, h1 = compute_errors_quadrature(sol, sphere_problem.u, sphere_problem.grad_u)
    assert l2 < 2e-4 and h1 < 1e-2


def test_surface_zero_load_gives_zero():
    sol = solve_surface_poisson(generate_sphere(2), lambda x: np.zeros(len(x)))
    assert not sol.values.any()


def test_surface_solution_invariants(sphere_problem):
    m = generate_sphere(3)
    sol = solve_surface_poisson(m, sphere_problem.f)
    M, A = sol.info["M"], sol.info["A"]
    u = sol.values
    assert abs(np.ones(m.n_nodes) @ (M @ u)) <= 1e-10 * np.linalg.norm(u)
    b = assemble_load(m, sphere_problem.f)
    c = M @ np.ones(m.n_nodes)
    b = b - b.sum() / c.sum() * c
    assert np.linalg.norm(A @ u - b) <= 1e-10 * np.linalg.norm(b) * (1 + 1e-6)
    assert sol.info["t_assembly"] > 0 and sol.info["iterations"] > 0


def test_surface_errors_frame_invariant(sphere_problem):
    m = generate_sphere(2, p=2)
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    rot = m.with_nodes(m.nodes @ R.T)
    p = sphere_problem

    def pull(fn):
        return lambda y: fn(y @ R)

    def grad_rot(y):
        return p.grad_u(y @ R) @ R.T

    e0 = compute_errors_quadrature(solve_surface_poisson(m, p.f), p.u, p.grad_u)
    e1 = compute_errors_quadrature(solve_surface_poisson(rot, pull(p.f)), pull(p.u), grad_rot)
    np.testing.assert_allclose(e1, e0, rtol=1e-9, atol=1e-12)


def test_surface_rejects_open_and_bulk_meshes(sphere_problem):
    with pytest.raises(PreconditionError):
        solve_surface_poisson(generate_disk(0.5), sphere_problem.f)
    m = generate_sphere(1)
    open_surface = type(m)("surface", 2, 1, m.nodes, m.elements[:-1])
    with pytest.raises(PreconditionError):
        solve_surface_poisson(open_surface, sphere_problem.f)


# --------------------------------------------------------- bulk reaction-diffusion


def test_disk_radial_solution():
    p = get_problem("disk-radial")
    assert p.mu == 10.0
    m = generate_disk(1 / 16)
    sol = p.solve(m)
    assert np.abs(sol.values - p.u(m.nodes)).max() < 0.02


def test_bulk_zero_load_with_reaction():
    sol = solve_bulk_reaction_diffusion(generate_disk(0.25), lambda x: np.zeros(len(x)), mu=3.0)
    assert np.abs(sol.values).max() == 0.0


def test_bulk_constant_boundary_harmonic():
    m = generate_square(6, p=2)
    sol = solve_bulk_reaction_diffusion(m, lambda x: np.zeros(len(x)), mu=0.0, g=2.5)
    np.testing.assert_allclose(sol.values, 2.5, rtol=1e-9)


def test_bulk_affine_solution_reproduced():
    m = generate_square(4)

    def u(x):
        return 1 + 2 * x[:, 0] - 3 * x[:, 1]

    sol = solve_bulk_reaction_diffusion(m, lambda x: np.zeros(len(x)), mu=0.0, g=u)
    np.testing.assert_allclose(sol.values, u(m.nodes), atol=1e-9)
    l2, h1 = compute_errors_quadrature(sol, u, lambda x: np.tile([2.0, -3.0], (len(x), 1)))
    assert l2 < 1e-9 and h1 < 1e-9


def test_bulk_preconditions():
    f = lambda x: np.ones(len(x))
    m = half_disk_example()
    with pytest.raises(PreconditionError):
        solve_bulk_reaction_diffusion(m, f, mu=-1)
    with pytest.raises(PreconditionError):
        solve_bulk_reaction_diffusion(type(m)("bulk", 2, 2, m.nodes, m.elements), f, mu=1)
    with pytest.raises(PreconditionError):
        solve_bulk_reaction_diffusion(generate_sphere(0), f, mu=1)


# ----------------------------------------------------------------- errors


def test_errors_of_interpolant_are_zero():
    m = generate_sphere(1, p=2)
    u = lambda x: x[:, 0] ** 2 - x[:, 2]
    assert compute_errors(NodalField(u(m.nodes), m), u) == (0.0, 0.0)


def test_constant_error_on_closed_surface():
    m = generate_sphere(2)
    c = 0.3
    l2, h1 = compute_errors(NodalField(np.full(m.n_nodes, c), m), lambda x: np.zeros(len(x)))
    area = assemble_batched(m).M().sum()
    assert h1 < 1e-7
    assert l2 == pytest.approx(c * np.sqrt(area), rel=1e-13)


def test_single_node_perturbation_dense_oracle():
    m = generate_sphere(0, p=2)
    out = assemble_batched(m)
    Md, Ad = out.M().toarray(), out.A().toarray()
    u = lambda x: x[:, 0]
    vals = u(m.nodes).copy()
    vals[5] += 1e-3
    l2, h1 = compute_errors(NodalField(vals, m), u)
    e = np.zeros(m.n_nodes)
    e[5] = 1e-3
    assert l2 == pytest.approx(np.sqrt(e @ Md @ e), rel=1e-13)
    assert h1 == pytest.approx(np.sqrt(e @ Ad @ e), rel=1e-13)


def test_nodal_field_shape_check():
    with pytest.raises(PreconditionError):
        NodalField(np.zeros(3), generate_sphere(0))


# ------------------------------------------------------------ convergence


def test_eoc_helper():
    assert eoc(1.0, 0.25, 0.2, 0.1) == pytest.approx(2.0)
    assert np.isnan(eoc(0.0, 0.0, 0.2, 0.1))
    assert np.isnan(eoc(1e-3, 0.0, 0.2, 0.1))
    assert np.isnan(eoc(1e-3, 1e-14, 0.2, 0.1, floor=1e-12))


def test_sphere_p2_convergence_orders(sphere_problem):
    rows = convergence_study(sphere_problem, [generate_sphere(r, p=2) for r in range(1, 5)])
    assert 2.7 <= rows[-1].eoc_L2 <= 3.3
    assert 1.7 <= rows[-1].eoc_H1 <= 2.3
    errs = [r.err_L2 for r in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_disk_p1_convergence_orders():
    p = get_problem("disk-radial")
    rows = convergence_study(p, [generate_disk(h) for h in (0.25, 0.125, 0.0625, 0.03125)])
    for r in rows[1:]:
        assert 1.8 <= r.eoc_L2 <= 2.2
        assert 0.8 <= r.eoc_H1 <= 1.2


def test_interpolant_mode_available(sphere_problem):
    rows = convergence_study(sphere_problem, [generate_sphere(r, p=1) for r in (2, 3)], error_mode="interpolant")
    assert rows[-1].err_L2 < rows[0].err_L2
    with pytest.raises(PreconditionError):
        convergence_study(sphere_problem, [generate_sphere(1), generate_sphere(2)], error_mode="bogus")


def test_exact_solution_in_space_flags_eoc():
    m1, m2 = generate_square(2), generate_square(4)
    u = lambda x: 2 * x[:, 0] + x[:, 1]
    from isofem.problems import ModelProblem

    prob = ModelProblem("affine", "bulk", lambda x: np.zeros(len(x)), u, lambda x: np.tile([2.0, 1.0], (len(x), 1)))
    rows = convergence_study(prob, [m1, m2], solve_kw={"g": u})
    assert rows[-1].err_L2 < 1e-10 and rows[-1].err_H1 < 1e-10
    # round-off level errors give meaningless orders; they must not look like a rate
    assert np.isnan(rows[-1].eoc_L2) and np.isnan(rows[-1].eoc_H1)


def test_convergence_needs_two_meshes(sphere_problem):
    with pytest.raises(PreconditionError):
        convergence_study(sphere_problem, [generate_sphere(1)])


def test_write_convergence_csv(tmp_path, sphere_problem):
    rows = convergence_study(sphere_problem, [generate_sphere(r) for r in (1, 2)])
    path = tmp_path / "c.csv"
    write_convergence_csv(rows, path)
    with open(path) as fh:
        data = list(csv.reader(fh))
    assert tuple(data[0]) == CSV_COLUMNS
    assert len(data) == 3 and float(data[2][2]) == rows[1].err_L2


def test_unknown_problem():
    with pytest.raises(PreconditionError):
        get_problem("nope")
