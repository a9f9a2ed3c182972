import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from isofem.assembly import assemble_batched
from isofem.errors import DimensionError, SolverError, SparseIndexError
from isofem.meshgen import generate_sphere
from isofem.sparsela import (
    Triplets,
    add_scaled,
    apply_dirichlet,
    cg_solve,
    cg_solve_meanfree,
    diag,
    finalize,
    read_matrix_market,
    spmv,
    write_matrix_market,
)


def dense_accumulate(rows, cols, vals, n):
    D = np.zeros((n, n))
    for r, c, v in zip(rows, cols, vals):
        D[r, c] += v
    return D


def random_spd(n, rng):
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


# ------------------------------------------------------------------ finalize


def test_duplicate_summation():
    A = finalize(Triplets([1, 1], [1, 1], [2.0, 3.0], 3))
    assert A.nnz == 1 and A[1, 1] == 5.0


def test_empty_triplets():
    A = finalize(Triplets([], [], [], 4))
    assert A.shape == (4, 4) and A.nnz == 0
    np.testing.assert_array_equal(A.indptr, np.zeros(5))


def test_finalize_matches_dense_oracle():
    rng = np.random.default_rng(0)
    r, c = rng.integers(0, 10, (2, 60))
    v = rng.standard_normal(60)
    A = finalize(Triplets(r, c, v, 10))
    np.testing.assert_allclose(A.toarray(), dense_accumulate(r, c, v, 10), rtol=1e-14, atol=1e-15)


def test_csr_invariants():
    rng = np.random.default_rng(1)
    r, c = rng.integers(0, 30, (2, 400))
    A = finalize(Triplets(r, c, rng.standard_normal(400), 30))
    assert (np.diff(A.indptr) >= 0).all()
    for i in range(30):
        cols = A.indices[A.indptr[i] : A.indptr[i + 1]]
        assert (np.diff(cols) > 0).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 12), k=st.integers(0, 80))
def test_finalize_permutation_invariant(seed, n, k):
    rng = np.random.default_rng(seed)
    r, c = rng.integers(0, n, (2, k))
    v = rng.standard_normal(k) * 10.0 ** rng.integers(-8, 8, k)
    A = finalize(Triplets(r, c, v, n))
    perm = rng.permutation(k)
    B = finalize(Triplets(r[perm], c[perm], v[perm], n))
    np.testing.assert_array_equal(A.indptr, B.indptr)
    np.testing.assert_array_equal(A.indices, B.indices)
    np.testing.assert_array_equal(A.data, B.data)  # bitwise


@pytest.mark.parametrize("group", [3, 64, 65, 300])
def test_finalize_large_duplicate_groups(group):
    # groups above MAX_PADDED_GROUP take the lexsort path
    rng = np.random.default_rng(group)
    r = np.r_[np.zeros(group, int), rng.integers(0, 5, 40)]
    c = np.r_[np.ones(group, int), rng.integers(0, 5, 40)]
    v = rng.standard_normal(r.size)
    A = finalize(Triplets(r, c, v, 5))
    np.testing.assert_allclose(A.toarray(), dense_accumulate(r, c, v, 5), rtol=1e-13, atol=1e-13)
    perm = rng.permutation(r.size)
    B = finalize(Triplets(r[perm], c[perm], v[perm], 5))
    np.testing.assert_array_equal(A.data, B.data)


def test_finalize_nonfinite_values_kept():
    A = finalize(Triplets([0, 0, 1, 1, 2], [0, 0, 1, 1, 2], [np.inf, 1.0, np.nan, 2.0, 3.0], 3))
    assert A[0, 0] == np.inf and np.isnan(A[1, 1]) and A[2, 2] == 3.0


def test_finalize_index_out_of_range():
    with pytest.raises(SparseIndexError):
        finalize(Triplets([0, 3], [0, 0], [1.0, 1.0], 3))
    with pytest.raises(SparseIndexError):
        finalize(Triplets([-1], [0], [1.0], 3))


def test_triplet_length_mismatch():
    with pytest.raises(DimensionError):
        Triplets([0, 1], [0], [1.0, 2.0], 2)


# ------------------------------------------------------------ basic algebra


def test_spmv_identity_and_dense_oracle():
    x = np.arange(5.0)
    np.testing.assert_array_equal(spmv(sp.identity(5, format="csr"), x), x)
    rng = np.random.default_rng(3)
    D = rng.standard_normal((20, 20)) * (rng.random((20, 20)) < 0.3)
    y = rng.standard_normal(20)
    np.testing.assert_allclose(spmv(sp.csr_matrix(D), y), D @ y, rtol=1e-14, atol=1e-14)
    with pytest.raises(DimensionError):
        spmv(sp.csr_matrix(D), np.ones(3))


def test_add_scaled_and_diag():
    rng = np.random.default_rng(4)
    A = sp.csr_matrix(rng.standard_normal((6, 6)))
    Z = add_scaled(A, A, -1.0)
    assert Z.nnz == 0
    np.testing.assert_array_equal(diag(A), A.toarray().diagonal())
    with pytest.raises(DimensionError):
        add_scaled(A, sp.identity(3, format="csr"), 1.0)


def test_matrix_market_round_trip(tmp_path):
    M = assemble_batched(generate_sphere(1)).M()
    write_matrix_market(M, tmp_path / "m.mtx")
    B = read_matrix_market(tmp_path / "m.mtx")
    np.testing.assert_array_equal(B.toarray(), M.toarray())


# ------------------------------------------------------------------------ CG


def test_cg_identity_one_iteration():
    b = np.random.default_rng(5).standard_normal(7)
    x, info = cg_solve(sp.identity(7, format="csr"), b)
    np.testing.assert_allclose(x, b)
    assert info.iterations == 1 and info.converged


@pytest.mark.parametrize("precond", ["jacobi", "none"])
def test_cg_random_spd_vs_dense_solve(precond):
    rng = np.random.default_rng(6)
    D = random_spd(50, rng)
    b = rng.standard_normal(50)
    x, info = cg_solve(sp.csr_matrix(D), b, precond=precond)
    x_ref = np.linalg.solve(D, b)
    assert np.linalg.norm(x - x_ref) <= 1e-8 * np.linalg.norm(x_ref)
    assert info.residual <= 1e-10


def test_cg_energy_error_decreases_monotonically():
    rng = np.random.default_rng(7)
    D = random_spd(40, rng)
    b = rng.standard_normal(40)
    x_ref = np.linalg.solve(D, b)
    energies = []
    cg_solve(sp.csr_matrix(D), b, precond="none", callback=lambda x: energies.append((x - x_ref) @ D @ (x - x_ref)))
    assert all(b_ <= a_ * (1 + 1e-12) for a_, b_ in zip(energies, energies[1:]))


def test_cg_on_sphere_implicit_euler_matrix():
    out = assemble_batched(generate_sphere(3))
    K = add_scaled(out.M(), out.A(), 0.01)
    b = out.M() @ np.ones(K.shape[0])
    x, info = cg_solve(K, b)
    assert info.converged
    assert np.linalg.norm(K @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_cg_breakdown_on_indefinite():
    A = sp.csr_matrix(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(SolverError):
        cg_solve(A, np.ones(3), precond="none")


def test_cg_reports_max_iter():
    rng = np.random.default_rng(8)
    D = random_spd(30, rng)
    _, info = cg_solve(sp.csr_matrix(D), np.ones(30), max_iter=2, precond="none")
    assert not info.converged and info.iterations == 2


def test_cg_zero_rhs():
    x, info = cg_solve(sp.identity(4, format="csr"), np.zeros(4))
    assert info.converged and not x.any()


# ---------------------------------------------------------------- mean-free


@pytest.fixture(scope="module")
def sphere_MA():
    out = assemble_batched(generate_sphere(3))
    return out.M(), out.A()


def test_meanfree_zero_rhs(sphere_MA):
    M, A = sphere_MA
    x, _ = cg_solve_meanfree(A, np.zeros(A.shape[0]), M)
    assert not x.any()


def test_meanfree_solution_properties(sphere_MA):
    M, A = sphere_MA
    rng = np.random.default_rng(9)
    b = M @ rng.standard_normal(A.shape[0])
    c = M @ np.ones(A.shape[0])
    means = []
    x, info = cg_solve_meanfree(A, b, M, callback=lambda it: means.append(abs(c @ it) / (np.linalg.norm(it) * c.sum())))
    assert abs(c @ x) <= 1e-10 * np.linalg.norm(x)
    assert max(means) <= 1e-12
    b_proj = b - b.sum() / c.sum() * c
    assert np.linalg.norm(A @ x - b_proj) <= 1e-9 * np.linalg.norm(b_proj)


def test_meanfree_nodal_sum_constraint(sphere_MA):
    M, A = sphere_MA
    b = M @ np.random.default_rng(10).standard_normal(A.shape[0])
    b -= b.mean()  # compatible load: both constraints leave it unchanged
    x, _ = cg_solve_meanfree(A, b, constraint=np.ones(A.shape[0]))
    assert abs(x.sum()) <= 1e-10 * np.linalg.norm(x)
    y, _ = cg_solve_meanfree(A, b, M)
    # the two constraints select solutions differing by a constant
    diff = x - y
    assert np.ptp(diff) <= 1e-8 * np.linalg.norm(x)


def test_meanfree_needs_constraint(sphere_MA):
    _, A = sphere_MA
    with pytest.raises(DimensionError):
        cg_solve_meanfree(A, np.ones(A.shape[0]))


def test_meanfree_non_convergence_raises(sphere_MA):
    M, A = sphere_MA
    b = M @ np.random.default_rng(12).standard_normal(A.shape[0])
    with pytest.raises(SolverError):
        cg_solve_meanfree(A, b, M, max_iter=2)


# ----------------------------------------------------------------- Dirichlet


def test_dirichlet_hand_computed_3x3():
    A = sp.csr_matrix(np.array([[4.0, -1, 0], [-1, 4, -1], [0, -1, 4]]))
    b = np.array([1.0, 2.0, 3.0])
    A2, b2 = apply_dirichlet(A, b, [0], [2.0])
    # row/col 0 eliminated: b1 -= A10 * 2 = 2 + 2 = 4
    np.testing.assert_array_equal(A2.toarray(), [[1, 0, 0], [0, 4, -1], [0, -1, 4]])
    np.testing.assert_array_equal(b2, [2.0, 4.0, 3.0])
    x = np.linalg.solve(A2.toarray(), b2)
    # interior equations see the boundary value
    np.testing.assert_allclose(A.toarray()[1:] @ x, b[1:])
    assert x[0] == 2.0


def test_dirichlet_all_constrained():
    rng = np.random.default_rng(13)
    A = sp.csr_matrix(random_spd(6, rng))
    A2, b2 = apply_dirichlet(A, rng.standard_normal(6), np.arange(6), 1.5)
    x, _ = cg_solve(A2, b2)
    np.testing.assert_allclose(x, 1.5, rtol=1e-12)


def test_dirichlet_homogeneous_keeps_uncoupled_rhs():
    A = sp.csr_matrix(np.array([[2.0, -1, 0, 0], [-1, 2, 0, 0], [0, 0, 2, -1], [0, 0, -1, 2]]))
    b = np.arange(1.0, 5.0)
    A2, b2 = apply_dirichlet(A, b, [0], 0.0)
    np.testing.assert_array_equal(b2[2:], b[2:])
    assert (A2 != A2.T).nnz == 0


def test_dirichlet_index_out_of_range():
    with pytest.raises(SparseIndexError):
        apply_dirichlet(sp.identity(3, format="csr"), np.ones(3), [3], 0.0)
