"""Monolithic Newton solve, Dirichlet constraints and time marching."""
from __future__ import annotations

import logging
import math
import os
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConflictingBC, InvalidArgument, LinearSolveFailure,
                     NonConvergence, SingularSystem)
from .fem import BlockPattern, SparseSystem, build_dofmap, quadrature
from .weakform import FieldState, body_force_at, cell_kernels

log = logging.getLogger(__name__)

__all__ = ["Discretization", "discretize", "BoundaryCondition", "Ramp",
           "SolverConfig", "NewtonReport", "DirichletSet", "apply_dirichlet",
           "linear_solve", "newton_solve", "time_march", "MarchResult",
           "zero_state", "no_slip"]

THREADS_ENV = "P1FLOW_THREADS"


def _thread_count():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


class Discretization:
    """Mesh-bound assembly data: DOF map, sparsity, geometry, quadrature."""

    def __init__(self, mesh, quad_degree=3):
        self.mesh = mesh
        self.dofmap = build_dofmap(mesh)
        self.quad = quadrature(mesh.dim, quad_degree)
        self.pattern = BlockPattern(mesh.cells, mesh.n_nodes,
                                    self.dofmap.n_fields)
        self.vol = np.asarray(mesh.volumes)
        self.grads = mesh.grad_phi
        self._qpts = None
        self._row_of_data = None

    @property
    def quad_points(self):
        """(nc, nq, dim) physical quadrature points."""
        if self._qpts is None:
            x = self.mesh.nodes[self.mesh.cells]
            self._qpts = np.einsum("qa,cai->cqi", self.quad.points, x)
        return self._qpts

    @property
    def row_of_data(self):
        if self._row_of_data is None:
            indptr, _ = self.pattern._csr_template
            self._row_of_data = np.repeat(np.arange(len(indptr) - 1),
                                          np.diff(indptr))
        return self._row_of_data

    def local_values(self, values):
        nf = self.dofmap.n_fields
        return np.asarray(values).reshape(-1, nf)[self.mesh.cells]

    def assemble(self, P, P0, params, dt, t, jacobian=True):
        """Global residual and (optionally) Jacobian at state ``P``."""
        Pe = self.local_values(P)
        P0e = self.local_values(P0)
        gq = None
        if params.g is not None:
            gq = body_force_at(params.g, self.quad_points, t)
        nthreads = _thread_count()
        nc = self.mesh.n_cells
        if nthreads == 1 or nc < 4096:
            res, jac = cell_kernels(self.vol, self.grads, Pe, P0e, params, dt,
                                    self.quad, gq=gq, jacobian=jacobian)
        else:
            bounds = np.linspace(0, nc, nthreads + 1).astype(int)

            def work(k):
                s = slice(bounds[k], bounds[k + 1])
                return cell_kernels(self.vol[s], self.grads[s], Pe[s], P0e[s],
                                    params, dt, self.quad,
                                    gq=None if gq is None else gq[s],
                                    jacobian=jacobian)

            with ThreadPoolExecutor(nthreads) as pool:
                parts = list(pool.map(work, range(nthreads)))
            res = np.concatenate([r for r, _ in parts])
            jac = (np.concatenate([j for _, j in parts]) if jacobian
                   else None)
        F = self.pattern.sum_nodes(res)
        if not jacobian:
            return F, None
        blocks = jac.transpose(0, 1, 3, 2, 4)
        J = self.pattern.to_csr(self.pattern.sum_blocks(blocks))
        return F, J


_DISC_CACHE = weakref.WeakKeyDictionary()


def discretize(mesh):
    """Cached :class:`Discretization` for ``mesh``."""
    disc = _DISC_CACHE.get(mesh)
    if disc is None:
        disc = Discretization(mesh)
        _DISC_CACHE[mesh] = disc
    return disc


def zero_state(mesh, t=0.0):
    return FieldState(np.zeros(mesh.n_nodes * (1 + mesh.dim)), t)


# ------------------------------------------------------------------ BCs

@dataclass(frozen=True)
class Ramp:
    """Linear ramp from 0 at t=0 to 1 at ``t_ramp``, then held."""

    t_ramp: float

    def __post_init__(self):
        if not self.t_ramp > 0:
            raise InvalidArgument("t_ramp must be positive")

    def factor(self, t):
        return min(max(t / self.t_ramp, 0.0), 1.0)


@dataclass(frozen=True)
class BoundaryCondition:
    """Dirichlet value on every node of a tagged boundary region.

    ``kind`` is ``"velocity"`` (with ``component``) or ``"pressure"``.
    ``value`` is a number or a callable ``value(x, t)`` on ``(n, dim)``
    point arrays. Where conditions meet (corner nodes), the one with the
    higher ``priority`` wins; equal priorities must agree.
    """

    tag: Union[int, str]
    kind: str
    value: Union[float, Callable] = 0.0
    component: Optional[int] = None
    ramped: bool = False
    priority: int = 0

    def __post_init__(self):
        if self.kind not in ("velocity", "pressure"):
            raise InvalidArgument(f"unknown BC kind {self.kind!r}")
        if self.kind == "velocity" and self.component is None:
            raise InvalidArgument("velocity BC needs a component")
        if self.kind == "pressure" and self.component is not None:
            raise InvalidArgument("pressure BC takes no component")

    @property
    def field(self):
        return 0 if self.kind == "pressure" else 1 + self.component

    def evaluate(self, x, t):
        if callable(self.value):
            out = np.asarray(self.value(x, t), dtype=float)
            return np.broadcast_to(out, x.shape[:1]).copy()
        return np.full(len(x), float(self.value))


def no_slip(tag, dim, priority=0):
    """Zero velocity on every component of ``tag``."""
    return [BoundaryCondition(tag, "velocity", 0.0, component=k,
                              priority=priority) for k in range(dim)]


@dataclass
class SolverConfig:
    dt: float
    t_end: float
    newton_tol: Optional[float] = None  # default 1e-8 * sqrt(total_dofs)
    newton_max_iter: int = 25
    linear_solver: str = "lu"
    linear_tol: float = 1e-10
    linear_maxiter: int = 1000
    ramp: Optional[Ramp] = None
    pressure_gauge: Union[str, int, None] = "auto"

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument("dt must be positive")
        if not self.t_end >= 0:
            raise InvalidArgument("t_end must be non-negative")
        if self.newton_tol is not None and not self.newton_tol > 0:
            raise InvalidArgument("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise InvalidArgument("newton_max_iter must be >= 1")
        if self.linear_solver not in ("lu", "superlu", "pardiso", "gmres"):
            raise InvalidArgument(f"unknown linear solver "
                                  f"{self.linear_solver!r}")

    def tolerance(self, total_dofs):
        if self.newton_tol is not None:
            return self.newton_tol
        return 1e-8 * math.sqrt(total_dofs)


def _gauge_node(mesh, gauge):
    if isinstance(gauge, (int, np.integer)) and not isinstance(gauge, bool):
        if not 0 <= gauge < mesh.n_nodes:
            raise InvalidArgument(f"gauge node {gauge} out of range")
        return int(gauge)
    corner = mesh.nodes.min(axis=0)
    return int(np.argmin(np.linalg.norm(mesh.nodes - corner, axis=1)))


class DirichletSet:
    """Constrained DOFs of a problem and their prescribed values.

    The pressure gauge (a single pressure DOF pinned to zero) is added when
    no pressure condition exists and ``gauge`` is not ``None``.
    """

    def __init__(self, mesh, bcs, ramp=None, gauge="auto"):
        self.mesh = mesh
        self.ramp = ramp
        nf = 1 + mesh.dim
        seen = set()
        entries = []
        for bc in bcs:
            try:
                tid = mesh.tag_id(bc.tag)
            except KeyError:
                raise InvalidArgument(f"BC refers to unknown region "
                                      f"{bc.tag!r}") from None
            if bc.kind == "velocity" and not 0 <= bc.component < mesh.dim:
                raise InvalidArgument(f"velocity component {bc.component} "
                                      f"invalid in {mesh.dim}D")
            key = (tid, bc.field)
            if key in seen:
                raise ConflictingBC(f"two conditions on region {bc.tag!r}, "
                                    f"field {bc.field}")
            seen.add(key)
            nodes = mesh.tag_nodes(tid)
            entries.append((bc, nodes, nodes * nf + bc.field))
        self.has_pressure = any(bc.kind == "pressure" for bc in bcs)
        self.gauge_node = None
        if not self.has_pressure:
            if gauge is None or gauge == "none":
                raise SingularSystem(
                    "only velocity conditions and no pressure gauge: the "
                    "pressure is determined up to a constant")
            self.gauge_node = _gauge_node(mesh, gauge)
        self._entries = entries

        all_dofs = [d for _, _, d in entries]
        prios = [np.full(len(d), bc.priority) for bc, _, d in entries]
        if self.gauge_node is not None:
            all_dofs.append(np.array([self.gauge_node * nf]))
            prios.append(np.array([np.iinfo(np.int64).min]))
        dofs = np.concatenate(all_dofs) if all_dofs else np.zeros(0, int)
        prio = np.concatenate(prios) if prios else np.zeros(0, int)
        # per DOF keep the entries of maximal priority
        order = np.lexsort((-prio, dofs))
        dofs_s, prio_s = dofs[order], prio[order]
        first = np.r_[True, dofs_s[1:] != dofs_s[:-1]]
        group = np.cumsum(first) - 1
        top = prio_s == prio_s[first][group]
        self._order = order
        self._keep = top
        self._group = group[top]
        self.dofs = dofs_s[first]

    def values(self, t):
        """Prescribed values at ``t`` for :attr:`dofs`."""
        vals = []
        scale = 0.0
        for bc, nodes, _ in self._entries:
            v = bc.evaluate(self.mesh.nodes[nodes], t)
            if bc.ramped and self.ramp is not None:
                v = v * self.ramp.factor(t)
            scale = max(scale, float(np.max(np.abs(v), initial=0.0)))
            vals.append(v)
        if self.gauge_node is not None:
            vals.append(np.zeros(1))
        allv = np.concatenate(vals) if vals else np.zeros(0)
        kept = allv[self._order][self._keep]
        out = np.zeros(len(self.dofs))
        out[self._group] = kept
        spread = np.zeros(len(self.dofs))
        np.maximum.at(spread, self._group, np.abs(kept - out[self._group]))
        tol = 1e-12 * max(scale, 1.0)
        if np.any(spread > tol):
            bad = int(self.dofs[np.argmax(spread)])
            raise ConflictingBC(f"DOF {bad} receives different prescribed "
                                f"values at t={t}")
        return out

    def apply(self, system, state_values, t, disc=None):
        """Row replacement: J row -> unit row, rhs -> prescribed - current."""
        target = self.values(t)
        mat = system.matrix
        if disc is not None:
            mask = np.isin(disc.row_of_data, self.dofs)
            mat.data[mask] = 0.0
            mat.data[disc.pattern.diag_pos[self.dofs]] = 1.0
        else:
            mat = mat.tolil()
            for d in self.dofs:
                mat.rows[d] = [d]
                mat.data[d] = [1.0]
            mat = mat.tocsr()
        rhs = system.rhs.copy()
        rhs[self.dofs] = target - np.asarray(state_values)[self.dofs]
        return SparseSystem(mat, rhs)

    def impose(self, values, t):
        out = np.array(values, dtype=float)
        out[self.dofs] = self.values(t)
        return out


def apply_dirichlet(system, dofmap, mesh, bcs, state, t, ramp=None,
                    gauge="auto"):
    """Constrain ``system`` (in increment form) by the boundary conditions."""
    dset = bcs if isinstance(bcs, DirichletSet) else DirichletSet(
        mesh, bcs, ramp=ramp, gauge=gauge)
    values = state.values if isinstance(state, FieldState) else state
    return dset.apply(system, values, t)


# --------------------------------------------------------------- linear

def _find_mkl_rt():
    import glob
    import sys
    roots = [sys.prefix, sys.base_prefix, "/usr/local", "/usr"]
    for root in roots:
        hits = sorted(glob.glob(os.path.join(root, "lib", "libmkl_rt.so*")))
        if hits:
            return hits[0]
    return None


_PARDISO = None


def _pardiso_module():
    """Import pypardiso if usable, else return ``False``."""
    global _PARDISO
    if _PARDISO is None:
        if "PYPARDISO_MKL_RT" not in os.environ:
            path = _find_mkl_rt()
            if path:
                os.environ["PYPARDISO_MKL_RT"] = path
        try:
            import pypardiso
            pypardiso.PyPardisoSolver(mtype=11)
            _PARDISO = pypardiso
        except Exception:  # missing package or MKL runtime
            _PARDISO = False
    return _PARDISO


def direct_backend():
    """Name of the sparse direct solver used for ``method='lu'``."""
    return "pardiso" if _pardiso_module() else "superlu"


def equilibrate(A):
    """Row then column max-norm scaling: returns ``(R A C, r, c)``."""
    A = sp.csr_matrix(A)
    absA = abs(A)
    rmax = absA.max(axis=1).toarray().ravel()
    if np.any(rmax == 0):
        raise SingularSystem(f"matrix row {int(np.argmin(rmax))} is zero")
    r = 1.0 / rmax
    B = sp.diags(r) @ A
    cmax = abs(B).max(axis=0).toarray().ravel()
    if np.any(cmax == 0):
        raise SingularSystem(f"matrix column {int(np.argmin(cmax))} is zero")
    c = 1.0 / cmax
    B = (B @ sp.diags(c)).tocsr()
    B.sort_indices()
    return B, r, c


def _refine(A, b, solve, tol, steps=3):
    bnorm = np.linalg.norm(b)
    x = solve(b)
    for _ in range(steps):
        r = b - A @ x
        if not np.all(np.isfinite(r)):
            raise SingularSystem("non-finite linear solution")
        if np.linalg.norm(r) <= tol * bnorm:
            break
        x = x + solve(r)
    rel = np.linalg.norm(b - A @ x) / bnorm
    if not np.isfinite(rel):
        raise SingularSystem("non-finite linear solution")
    if rel > 1e-6:
        raise SingularSystem(f"direct solve left relative residual {rel:.2e}; "
                             "matrix is numerically singular")
    if rel > tol:
        log.warning("direct solve residual %.3e above %.1e", rel, tol)
    return x


def _solve_superlu(A, b, tol):
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from None
    return _refine(A, b, lu.solve, tol)


def _solve_pardiso(A, b, tol):
    pypardiso = _pardiso_module()
    A = sp.csr_matrix(A)
    A.sort_indices()
    solver = pypardiso.PyPardisoSolver(mtype=11)
    try:
        solver.factorize(A)
        x = _refine(A, b, lambda rhs: solver.solve(A, rhs), tol)
    except pypardiso.pardiso_wrapper.PyPardisoError as exc:
        raise SingularSystem(str(exc)) from None
    finally:
        solver.free_memory(everything=True)
    return x


def linear_solve(system, method="lu", tol=1e-10, maxiter=1000):
    """Solve ``system.matrix @ x = system.rhs``.

    ``method="lu"`` picks the fastest sparse direct LU available (MKL
    PARDISO through pypardiso, else SuperLU with a minimum-degree ordering
    on ``A^T + A``). The matrix is equilibrated first and the residual
    check (relative, after up to three refinement steps) is made on the
    equilibrated system. ``"superlu"`` and ``"pardiso"`` force a backend;
    ``"gmres"`` runs ILU-preconditioned GMRES to relative tolerance ``tol``.
    """
    A = system.matrix
    b = np.asarray(system.rhs, dtype=float)
    if np.linalg.norm(b) == 0.0:
        return np.zeros_like(b)
    if method == "lu":
        method = direct_backend()
    if method in ("pardiso", "superlu"):
        # the stabilisation rows scale with dt/rho and can dwarf the others
        As, r, c = equilibrate(A)
        if method == "pardiso":
            if not _pardiso_module():
                raise LinearSolveFailure("pypardiso / MKL runtime not "
                                         "available")
            y = _solve_pardiso(As, r * b, tol)
        else:
            y = _solve_superlu(As, r * b, tol)
        return c * y
    if method == "gmres":
        A = sp.csc_matrix(A)
        try:
            ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, M=M, rtol=tol, atol=0.0, restart=200,
                             maxiter=maxiter)
        if info != 0:
            raise LinearSolveFailure(f"GMRES did not converge (info={info})")
        return x
    raise InvalidArgument(f"unknown linear solver {method!r}")


# --------------------------------------------------------------- Newton

@dataclass
class NewtonReport:
    iterations: int = 0
    increment_norms: list = field(default_factory=list)
    converged: bool = False
    residual_norm: float = float("nan")
    tolerance: float = float("nan")


def newton_solve(prev, guess, mesh, params, bcs, cfg, t, dirichlet=None):
    """One implicit step: find ``P`` with ``F(P; prev) = 0``.

    Each iteration solves ``J dP = -F`` and updates ``P += dP`` until the
    Euclidean increment norm drops to the tolerance.
    """
    disc = discretize(mesh)
    if dirichlet is None:
        dirichlet = DirichletSet(mesh, bcs, ramp=cfg.ramp,
                                 gauge=cfg.pressure_gauge)
    total = disc.dofmap.total_dofs
    tol = cfg.tolerance(total)
    P = np.array(guess.values if isinstance(guess, FieldState) else guess,
                 dtype=float)
    P0 = prev.values if isinstance(prev, FieldState) else np.asarray(prev)
    report = NewtonReport(tolerance=tol)
    for _ in range(cfg.newton_max_iter):
        F, J = disc.assemble(P, P0, params, cfg.dt, t)
        system = dirichlet.apply(SparseSystem(J, -F), P, t, disc=disc)
        dP = linear_solve(system, cfg.linear_solver, cfg.linear_tol,
                          cfg.linear_maxiter)
        P += dP
        norm = float(np.linalg.norm(dP))
        report.iterations += 1
        report.increment_norms.append(norm)
        if not np.isfinite(norm):
            break
        if norm <= tol:
            report.converged = True
            break
    if np.all(np.isfinite(P)):
        F, _ = disc.assemble(P, P0, params, cfg.dt, t, jacobian=False)
        free = np.ones(total, dtype=bool)
        free[dirichlet.dofs] = False
        report.residual_norm = float(np.linalg.norm(F[free]))
    if not report.converged:
        state = FieldState(np.nan_to_num(P), t)
        raise NonConvergence(
            f"Newton did not converge at t={t:g} after {report.iterations} "
            f"iterations (last |dP| = {report.increment_norms[-1]:.3e}, "
            f"tol {tol:.3e})", state=state, report=report)
    return FieldState(P, t), report


# ----------------------------------------------------------- time march

@dataclass
class MarchResult:
    final: FieldState
    times: list
    snapshots: list
    reports: list
    completed: bool = True
    error: Optional[Exception] = None


def time_march(mesh, params, bcs, cfg, initial=None, callback=None,
               snapshot_every=1):
    """Backward-Euler steps ``t = dt, 2 dt, .., t_end`` from rest.

    ``callback(step, state, report)`` runs after every converged step.
    Snapshots are copies of the state every ``snapshot_every`` steps (and at
    the final step); ``snapshot_every=0`` keeps only the final state. A
    Newton failure stops the march and returns the partial series with
    ``completed=False``.
    """
    dirichlet = DirichletSet(mesh, bcs, ramp=cfg.ramp,
                             gauge=cfg.pressure_gauge)
    state = initial.copy() if initial is not None else zero_state(mesh)
    n_steps = int(round(cfg.t_end / cfg.dt))
    result = MarchResult(final=state, times=[], snapshots=[], reports=[])
    for step in range(1, n_steps + 1):
        t = step * cfg.dt
        guess = FieldState(dirichlet.impose(state.values, t), t)
        try:
            new, report = newton_solve(state, guess, mesh, params, bcs, cfg,
                                       t, dirichlet=dirichlet)
        except (NonConvergence, SingularSystem, LinearSolveFailure) as exc:
            log.error("time march aborted at step %d: %s", step, exc)
            result.completed = False
            result.error = exc
            break
        state = new
        result.reports.append(report)
        result.final = state
        if (snapshot_every and step % snapshot_every == 0) or step == n_steps:
            result.times.append(t)
            result.snapshots.append(state.copy())
        if callback is not None:
            callback(step, state, report)
    return result
