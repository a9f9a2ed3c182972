"""Batched isoparametric finite elements on bulk domains and embedded surfaces."""
from .assembly import assemble, assemble_batched, assemble_load, assemble_naive, assemble_p1_fast
from .errors import *  # noqa: F401,F403
from .geomflow import BdfScheme, FlowState, Trajectory, dziuk_step, flow_driver, kll_nonlinear_rhs, kll_step
from .mesh import Mesh, parse_mesh, read_mesh, validate, write_mesh
from .meshgen import (
    generate_ball,
    generate_circle,
    generate_cube,
    generate_disk,
    generate_sphere,
    generate_square,
    generate_torus,
    lift_nodes,
    mesh_preprocess,
)
from .problems import compute_errors, compute_errors_quadrature, convergence_study, get_problem
from .quadrature import quadrature_rule
from .reference import ReferenceElement, basis_eval, basis_grad, precompute
from .sparsela import Triplets, cg_solve, cg_solve_meanfree, finalize

__version__ = "0.1.0"
