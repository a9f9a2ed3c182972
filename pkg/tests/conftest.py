"""Shared mesh corpus: at least one mesh per supported (kind, d, p) cell."""
import numpy as np
import pytest

from isofem.mesh import Mesh
from isofem.meshgen import (
    generate_ball,
    generate_circle,
    generate_cube,
    generate_disk,
    generate_sphere,
    generate_square,
    generate_torus,
    half_disk_example,
    mesh_preprocess,
    sphere_surface,
)


def _jiggle(mesh, amount, seed):
    """Perturb interior-ish nodes slightly while keeping elements valid."""
    rng = np.random.default_rng(seed)
    x = mesh.nodes + amount * rng.standard_normal(mesh.nodes.shape)
    if mesh.boundary is not None:
        x[mesh.boundary] = mesh.nodes[mesh.boundary]
    return mesh.with_nodes(x)


def build_corpus():
    ball = generate_ball(0.5)
    disk = generate_disk(0.5)
    return {
        "circle-p1": generate_circle(12),
        "circle-p2": generate_circle(7, p=2, radius=1.5),
        "sphere-p1": generate_sphere(1),
        "sphere-p2": generate_sphere(1, p=2),
        "sphere-p2-jiggled": _jiggle(generate_sphere(1, p=2), 0.01, 3),
        "torus-p1": generate_torus(8, 5),
        "torus-p2": generate_torus(6, 4, p=2),
        "disk-p1": disk,
        "disk-p2": mesh_preprocess(disk, 2, lift=sphere_surface(1.0))[0],
        "half-disk-p2": half_disk_example(),
        "square-p1-jiggled": _jiggle(generate_square(4), 0.03, 5),
        "square-p2": generate_square(3, p=2),
        "ball-p1": ball,
        "ball-p2": mesh_preprocess(ball, 2, lift=sphere_surface(1.0))[0],
        "cube-p1": generate_cube(2),
        "cube-p2-jiggled": _jiggle(generate_cube(2, p=2), 0.02, 7),
    }


CORPUS = build_corpus()
CELLS = {(m.kind, m.d, m.p) for m in CORPUS.values()}


@pytest.fixture(params=sorted(CORPUS), ids=sorted(CORPUS))
def corpus_mesh(request):
    return CORPUS[request.param]


def one_element_mesh(kind, d, p, nodes=None):
    from isofem.reference import reference_nodes

    ref = reference_nodes(d, p)
    m = d + (kind == "surface")
    if nodes is None:
        nodes = np.zeros((ref.shape[0], m))
        nodes[:, :d] = ref
    return Mesh(kind, d, p, nodes, np.arange(ref.shape[0])[None])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
