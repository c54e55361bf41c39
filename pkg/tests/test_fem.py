import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from p1flow.errors import InvalidArgument, PatternViolation
from p1flow.fem import (BlockPattern, SparseSystem, build_dofmap, quadrature,
                        scatter_add)
from p1flow.mesh import gen_pipe, gen_rect


def test_dofmap_counts():
    mesh = gen_rect(1, 1)
    dm = build_dofmap(mesh)
    assert dm.total_dofs == 12
    assert dm.dof(2, 2) == 8
    assert build_dofmap(gen_pipe(1, 1, 1.0, 1.0)).total_dofs == \
        4 * gen_pipe(1, 1, 1.0, 1.0).n_nodes


def test_dofmap_bijection():
    dm = build_dofmap(gen_rect(3, 2))
    all_dofs = np.concatenate([dm.dof(np.arange(dm.n_nodes), f)
                               for f in range(dm.n_fields)])
    assert sorted(all_dofs.tolist()) == list(range(dm.total_dofs))
    p, v = dm.split(np.arange(dm.total_dofs, dtype=float))
    np.testing.assert_array_equal(dm.join(p, v), np.arange(dm.total_dofs))


def test_quadrature_examples():
    q = quadrature(2, 1)
    assert len(q.weights) == 1 and q.weights[0] == pytest.approx(0.5)
    q = quadrature(2, 2)
    x = q.points[:, 1]
    assert np.dot(q.weights, x ** 2) == pytest.approx(1 / 12, rel=1e-14)
    q = quadrature(3, 2)
    np.testing.assert_allclose(q.weights, 1 / 24)


def test_quadrature_rejects():
    with pytest.raises(InvalidArgument):
        quadrature(2, 4)
    with pytest.raises(InvalidArgument):
        quadrature(1, 1)


def _monomial_integral(exps):
    # integral of prod lambda_i^a_i over the reference simplex
    dim = len(exps) - 1
    num = math.prod(math.factorial(a) for a in exps)
    return num / math.factorial(sum(exps) + dim)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("degree", [1, 2, 3])
def test_quadrature_exactness(dim, degree):
    q = quadrature(dim, degree)
    assert q.weights.sum() == pytest.approx(1 / math.factorial(dim), rel=1e-14)
    from itertools import product
    for exps in product(range(degree + 1), repeat=dim + 1):
        if sum(exps) > degree:
            continue
        got = np.dot(q.weights, np.prod(q.points ** np.array(exps), axis=1))
        assert got == pytest.approx(_monomial_integral(exps), rel=1e-12)


def _empty_system(mesh):
    pat = BlockPattern(mesh.cells, mesh.n_nodes, 1 + mesh.dim)
    return pat, SparseSystem(pat.zeros(), np.zeros(pat.shape[0]))


def test_scatter_zero_and_additivity():
    mesh = gen_rect(1, 1)  # two cells sharing the diagonal
    dm = build_dofmap(mesh)
    pat, system = _empty_system(mesh)
    n = 9
    scatter_add(system, dm.cell_dofs(mesh.cells[0]), np.zeros((n, n)),
                np.zeros(n))
    assert system.matrix.nnz == pat.zeros().nnz
    assert abs(system.matrix).sum() == 0
    for c in range(2):
        scatter_add(system, dm.cell_dofs(mesh.cells[c]), np.ones((n, n)),
                    np.ones(n))
    shared = set(mesh.cells[0]) & set(mesh.cells[1])
    a, b = sorted(shared)
    assert system.matrix[dm.dof(a, 0), dm.dof(b, 1)] == 2.0
    assert system.rhs[dm.dof(a, 0)] == 2.0


def test_scatter_identity_counts_incidence():
    mesh = gen_rect(2, 2)
    dm = build_dofmap(mesh)
    _, system = _empty_system(mesh)
    n = 9
    for cell in mesh.cells:
        scatter_add(system, dm.cell_dofs(cell), np.eye(n), np.zeros(n))
    counts = np.bincount(mesh.cells.ravel(), minlength=mesh.n_nodes)
    diag = system.matrix.diagonal().reshape(mesh.n_nodes, 3)
    np.testing.assert_array_equal(diag, np.repeat(counts[:, None], 3, axis=1))


def test_scatter_pattern_violation():
    mesh = gen_rect(2, 1)
    dm = build_dofmap(mesh)
    _, system = _empty_system(mesh)
    # nodes 0 and 2 never share a cell
    dofs = np.concatenate([dm.cell_dofs([0]), dm.cell_dofs([2])])
    with pytest.raises(PatternViolation):
        scatter_add(system, dofs, np.ones((6, 6)), np.zeros(6))


def test_pattern_symmetric_blocks():
    mesh = gen_rect(3, 3)
    pat = BlockPattern(mesh.cells, mesh.n_nodes, 3)
    A = pat.zeros()
    A.data[:] = 1.0
    assert (A != A.T).nnz == 0
    adj = np.zeros((mesh.n_nodes, mesh.n_nodes), dtype=bool)
    for cell in mesh.cells:
        adj[np.ix_(cell, cell)] = True
    block = A.toarray()[::3, ::3] != 0
    np.testing.assert_array_equal(block, adj)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_assembly_order_independent(seed):
    mesh = gen_rect(3, 2)
    rng = np.random.default_rng(seed)
    pat = BlockPattern(mesh.cells, mesh.n_nodes, 3)
    local = rng.standard_normal((mesh.n_cells, 9, 9))
    A = pat.assemble_matrix(local)
    perm = rng.permutation(mesh.n_cells)
    pat2 = BlockPattern(mesh.cells[perm], mesh.n_nodes, 3)
    B = pat2.assemble_matrix(local[perm])
    diff = (A - B)
    assert abs(diff).max() <= 1e-14 * abs(A).max()


def test_interpolated_linear_is_exact():
    mesh = gen_rect(4, 3, 2.0, 1.5)
    f = lambda x: 1.5 - 2.0 * x[..., 0] + 0.75 * x[..., 1]
    nodal = f(mesh.nodes)
    q = quadrature(2, 3)
    bary = q.points
    pts = np.einsum("qa,caj->cqj", bary, mesh.nodes[mesh.cells])
    vals = np.einsum("qa,ca->cq", bary, nodal[mesh.cells])
    np.testing.assert_allclose(vals, f(pts), rtol=1e-13, atol=1e-13)


def test_sparse_system_copy_independent():
    s = SparseSystem(sp.identity(3, format="csr"), np.ones(3))
    c = s.copy()
    c.rhs[0] = 5
    c.matrix.data[0] = 7
    assert s.rhs[0] == 1 and s.matrix[0, 0] == 1
