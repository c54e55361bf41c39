"""Equal-order P1 machinery: DOF layout, quadrature, sparse assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, PatternViolation

__all__ = ["DofMap", "build_dofmap", "QuadratureRule", "quadrature",
           "SparseSystem", "BlockPattern", "scatter_add"]


@dataclass(frozen=True)
class DofMap:
    """Interleaved layout: node ``a`` owns DOFs ``(p, v_1, ..., v_dim)``."""

    n_nodes: int
    dim: int

    @property
    def n_fields(self):
        return 1 + self.dim

    @property
    def total_dofs(self):
        return self.n_nodes * self.n_fields

    def dof(self, node, field):
        if not 0 <= field < self.n_fields:
            raise InvalidArgument(f"field {field} out of range")
        return np.asarray(node) * self.n_fields + field

    def pressure_dofs(self):
        return np.arange(self.n_nodes) * self.n_fields

    def velocity_dofs(self, component):
        return np.arange(self.n_nodes) * self.n_fields + 1 + component

    def cell_dofs(self, cells):
        """(nc, (dim+1)*(1+dim)) global DOFs in node-major local order."""
        cells = np.asarray(cells)
        nf = self.n_fields
        return (cells[..., :, None] * nf + np.arange(nf)).reshape(
            *cells.shape[:-1], -1)

    def split(self, values):
        """View a state vector as ``(p, v)`` with shapes (n,) and (n, dim)."""
        blocks = np.asarray(values).reshape(self.n_nodes, self.n_fields)
        return blocks[:, 0], blocks[:, 1:]

    def join(self, p, v):
        out = np.empty((self.n_nodes, self.n_fields))
        out[:, 0] = p
        out[:, 1:] = v
        return out.ravel()


def build_dofmap(mesh):
    return DofMap(mesh.n_nodes, mesh.dim)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, dim+1) barycentric coordinates
    weights: np.ndarray  # (nq,), sum = reference measure 1/dim!
    degree: int

    @property
    def dim(self):
        return self.points.shape[1] - 1


def _perms(base):
    """Distinct permutations of a barycentric tuple, in a fixed order."""
    from itertools import permutations
    seen = []
    for p in permutations(base):
        if p not in seen:
            seen.append(p)
    return seen


def _triangle(degree):
    if degree == 1:
        pts, w = [(1 / 3, 1 / 3, 1 / 3)], [1.0]
    elif degree == 2:
        pts = _perms((2 / 3, 1 / 6, 1 / 6))
        w = [1 / 3] * 3
    else:  # Strang-Fix 4-point rule
        pts = [(1 / 3, 1 / 3, 1 / 3)] + _perms((0.6, 0.2, 0.2))
        w = [-27 / 48] + [25 / 48] * 3
    return np.array(pts), np.array(w) / 2


def _tetrahedron(degree):
    if degree == 1:
        pts, w = [(0.25,) * 4], [1.0]
    elif degree == 2:
        a = (5 + 3 * math.sqrt(5)) / 20
        b = (5 - math.sqrt(5)) / 20
        pts = _perms((a, b, b, b))
        w = [0.25] * 4
    else:  # 5-point rule with negative centroid weight
        pts = [(0.25,) * 4] + _perms((0.5, 1 / 6, 1 / 6, 1 / 6))
        w = [-0.8] + [0.45] * 4
    return np.array(pts), np.array(w) / 6


def quadrature(dim, degree):
    """Symmetric simplex rule exact for polynomials up to ``degree``.

    Triangle: 1, 3, 4 points; tetrahedron: 1, 4, 5 points.
    """
    if dim not in (2, 3):
        raise InvalidArgument(f"dim must be 2 or 3, got {dim}")
    if degree not in (1, 2, 3):
        raise InvalidArgument(f"unsupported quadrature degree {degree}")
    pts, w = (_triangle if dim == 2 else _tetrahedron)(degree)
    return QuadratureRule(points=pts, weights=w, degree=degree)


@dataclass
class SparseSystem:
    """Jacobian (CSR) and right-hand side of one linearised step."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    def copy(self):
        return SparseSystem(self.matrix.copy(), self.rhs.copy())


class BlockPattern:
    """Node-adjacency sparsity with dense ``(1+dim)^2`` blocks.

    Built once per mesh. Cell contributions are summed into the pattern in
    an order that depends only on the cell's node set, so the assembled
    values do not depend on how cells are numbered.
    """

    def __init__(self, cells, n_nodes, n_fields):
        cells = np.asarray(cells)
        nc, nl = cells.shape
        self.n_nodes = n_nodes
        self.n_fields = n_fields
        self.n_cells = nc
        self.nl = nl
        rows = np.repeat(cells, nl, axis=1).ravel()
        cols = np.tile(cells, (1, nl)).ravel()
        keys = rows * n_nodes + cols
        uniq, slot = np.unique(keys, return_inverse=True)
        brow = uniq // n_nodes
        self.block_cols = (uniq % n_nodes).astype(np.int32)
        self.block_indptr = np.searchsorted(
            brow, np.arange(n_nodes + 1)).astype(np.int64)
        self.n_blocks = len(uniq)

        # deterministic summation order: by slot, then by canonical cell rank
        canon = np.sort(cells, axis=1)
        rank = np.empty(nc, dtype=np.int64)
        rank[np.lexsort(canon.T[::-1])] = np.arange(nc)
        contrib_rank = np.repeat(rank, nl * nl)
        self._order = np.lexsort((contrib_rank, slot))
        sorted_slots = slot[self._order]
        self._starts = np.flatnonzero(
            np.r_[True, sorted_slots[1:] != sorted_slots[:-1]])
        node_of = cells.ravel()
        self._vorder = np.lexsort((np.repeat(rank, nl), node_of))
        sorted_nodes = node_of[self._vorder]
        self._vstarts = np.flatnonzero(
            np.r_[True, sorted_nodes[1:] != sorted_nodes[:-1]])
        self._vnodes = sorted_nodes[self._vstarts]

        self._csr_template = self._expand_structure()

    def _expand_structure(self):
        """CSR index arrays of the scalar matrix and block->CSR data map."""
        nf = self.n_fields
        bsr = sp.bsr_matrix(
            (np.arange(1, self.n_blocks * nf * nf + 1, dtype=float).reshape(
                self.n_blocks, nf, nf),
             self.block_cols, self.block_indptr),
            shape=(self.n_nodes * nf, self.n_nodes * nf))
        csr = bsr.tocsr()
        csr.sort_indices()
        # data holds 1-based positions in the flattened block array
        self._csr_from_block = csr.data.astype(np.int64) - 1
        indptr, indices = csr.indptr.copy(), csr.indices.copy()
        n = csr.shape[0]
        rows = np.repeat(np.arange(n), np.diff(indptr))
        self.diag_pos = np.flatnonzero(rows == indices)
        assert len(self.diag_pos) == n
        return indptr, indices

    @property
    def shape(self):
        n = self.n_nodes * self.n_fields
        return (n, n)

    def sum_blocks(self, local):
        """Reduce ``(nc, nl, nl, nf, nf)`` local blocks into block data."""
        nf = self.n_fields
        flat = np.asarray(local).reshape(-1, nf * nf)
        return np.add.reduceat(flat[self._order], self._starts, axis=0)

    def sum_nodes(self, local):
        """Reduce ``(nc, nl, nf)`` local vectors into a global vector."""
        nf = self.n_fields
        flat = np.asarray(local).reshape(-1, nf)
        out = np.zeros((self.n_nodes, nf))
        out[self._vnodes] = np.add.reduceat(flat[self._vorder], self._vstarts,
                                            axis=0)
        return out.ravel()

    def to_csr(self, block_data):
        indptr, indices = self._csr_template
        data = np.asarray(block_data).ravel()[self._csr_from_block]
        return sp.csr_matrix((data, indices.copy(), indptr.copy()),
                             shape=self.shape)

    def assemble_matrix(self, local):
        """Local matrices in node-major layout ``(nc, nl*nf, nl*nf)``."""
        nc, nl, nf = self.n_cells, self.nl, self.n_fields
        blocks = np.asarray(local).reshape(nc, nl, nf, nl, nf).transpose(
            0, 1, 3, 2, 4)
        return self.to_csr(self.sum_blocks(blocks))

    def zeros(self):
        return self.to_csr(np.zeros((self.n_blocks, self.n_fields ** 2)))


def assemble_vector(cell_dofs, local, total):
    """Sum ``(nc, nloc)`` local vectors into a global vector."""
    return np.bincount(np.asarray(cell_dofs).ravel(),
                       weights=np.asarray(local).ravel(), minlength=total)


def scatter_add(system, cell_dofs, local_matrix, local_vector):
    """Add one cell's contribution into ``system`` in place.

    The sparsity pattern is never extended; an entry outside it raises
    :class:`PatternViolation`.
    """
    cell_dofs = np.asarray(cell_dofs, dtype=np.int64)
    local_matrix = np.asarray(local_matrix, dtype=float)
    local_vector = np.asarray(local_vector, dtype=float)
    n = len(cell_dofs)
    if local_matrix.shape != (n, n) or local_vector.shape != (n,):
        raise InvalidArgument("local block shapes do not match cell_dofs")
    mat = system.matrix
    total = mat.shape[0]
    if cell_dofs.min() < 0 or cell_dofs.max() >= total:
        raise PatternViolation("DOF index outside the system")
    for i, row in enumerate(cell_dofs):
        lo, hi = mat.indptr[row], mat.indptr[row + 1]
        cols = mat.indices[lo:hi]
        pos = np.searchsorted(cols, cell_dofs)
        ok = (pos < len(cols)) & (cols[np.minimum(pos, len(cols) - 1)]
                                  == cell_dofs)
        if not np.all(ok):
            raise PatternViolation(f"entry ({row}, "
                                   f"{int(cell_dofs[~ok][0])}) not in pattern")
        mat.data[lo + pos] += local_matrix[i]
    np.add.at(system.rhs, cell_dofs, local_vector)
    return system
