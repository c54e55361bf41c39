"""Derived quantities: error norms, divergence, force coefficients, line
sampling, cavity reference tables and VTK output."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument, OutOfDomain, UnknownRegion
from .fem import quadrature
from .weakform import FieldState

__all__ = ["l2_error", "div_norm", "pressure_energy", "ForceCoefficients",
           "drag_lift", "LineSample", "locate_points", "evaluate_points",
           "sample_line", "ReferenceTable", "load_reference",
           "parse_reference", "ghia_compare", "cavity_rms", "write_vtk",
           "load_dfg", "Oscillation", "oscillation"]

_FIELD_NAMES = {"p": 0, "pressure": 0, "vx": 1, "vy": 2, "vz": 3}


def _values(state):
    return state.values if isinstance(state, FieldState) else np.asarray(
        state, dtype=float)


def _nodal(state, mesh):
    """State as an ``(n_nodes, 1 + dim)`` array."""
    vals = _values(state)
    nf = 1 + mesh.dim
    if vals.size != mesh.n_nodes * nf:
        raise InvalidArgument("state size does not match the mesh")
    return vals.reshape(mesh.n_nodes, nf)


def _field_columns(field, dim):
    """Column indices in the nodal array for a field selector."""
    if field in ("velocity", "v"):
        return list(range(1, dim + 1))
    if isinstance(field, str):
        if field not in _FIELD_NAMES or _FIELD_NAMES[field] > dim:
            raise InvalidArgument(f"unknown field {field!r}")
        return [_FIELD_NAMES[field]]
    idx = int(field)
    if not 0 <= idx <= dim:
        raise InvalidArgument(f"field index {idx} out of range")
    return [idx]


def l2_error(state, exact, mesh, which="velocity", quad_degree=3,
             mean_free=False):
    """L2 norm of ``u_h - exact`` over the mesh.

    ``exact(x)`` receives points of shape ``(..., dim)`` and returns values
    of shape ``(..., k)`` for a ``k``-component field (``(...)`` for a
    scalar field). ``mean_free`` removes the mean of the difference first,
    which is the right comparison for a pressure fixed only up to a gauge.
    """
    cols = _field_columns(which, mesh.dim)
    nodal = _nodal(state, mesh)[:, cols]
    quad = quadrature(mesh.dim, quad_degree)
    bary = quad.points
    x = np.einsum("qa,cad->cqd", bary, mesh.nodes[mesh.cells])
    uh = np.einsum("qa,cak->cqk", bary, nodal[mesh.cells])
    ue = np.asarray(exact(x), dtype=float)
    if ue.ndim == uh.ndim - 1:
        ue = ue[..., None]
    ue = np.broadcast_to(ue, uh.shape)
    jac = np.abs(mesh.volumes) * math.factorial(mesh.dim)
    diff = uh - ue
    if mean_free:
        w = jac[:, None] * quad.weights[None, :]
        diff = diff - np.einsum("cq,cqk->k", w, diff) / w.sum()
    err2 = (diff ** 2).sum(axis=-1)
    return float(np.sqrt(np.sum(jac * (err2 @ quad.weights))))


def _cell_grad(nodal_field, mesh):
    """Per-cell gradient of nodal scalars: ``(nc, dim)`` or ``(nc, k, dim)``."""
    vals = nodal_field[mesh.cells]
    if vals.ndim == 2:
        return np.einsum("ca,cad->cd", vals, mesh.grad_phi)
    return np.einsum("cak,cad->ckd", vals, mesh.grad_phi)


def div_norm(state, mesh):
    """L2 norm of the velocity divergence (constant on each P1 cell)."""
    v = _nodal(state, mesh)[:, 1:]
    grad = _cell_grad(v, mesh)
    div = np.trace(grad, axis1=1, axis2=2)
    return float(np.sqrt(np.sum(np.abs(mesh.volumes) * div ** 2)))


def pressure_energy(state, mesh):
    """Sum over cells of ``V_c |grad p|^2``."""
    p = _nodal(state, mesh)[:, 0]
    g = _cell_grad(p, mesh)
    return float(np.sum(np.abs(mesh.volumes) * (g ** 2).sum(axis=1)))


@dataclass(frozen=True)
class ForceCoefficients:
    c_D: float
    c_L: float
    time: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.c_D) and math.isfinite(self.c_L)):
            raise ArithmeticError("non-finite force coefficient")


def _indicator(mesh, obstacle_tag):
    try:
        tid = mesh.tag_id(obstacle_tag)
    except KeyError:
        raise UnknownRegion(f"no boundary region {obstacle_tag!r}") from None
    ind = np.zeros(mesh.n_nodes)
    ind[mesh.tag_nodes(tid)] = 1.0
    return ind


def _force_functional(nodal, mesh, nu, test, quad):
    """Volume integral of ``nu v_ij w_ij + v_i v_j,i w_j - p w_i,i`` for the
    P1 test field ``w`` given by nodal values ``test`` (n, dim)."""
    cells = mesh.cells
    vol = np.abs(mesh.volumes)
    gv = _cell_grad(nodal[:, 1:], mesh)        # [c, j, i] = v_j,i
    gw = _cell_grad(test, mesh)
    visc = nu * np.einsum("cji,cji->c", gv, gw) * vol
    # convective term is quadratic: use the cell quadrature rule
    bary = quad.points
    vq = np.einsum("qa,caj->cqj", bary, nodal[cells, 1:])
    wq = np.einsum("qa,caj->cqj", bary, test[cells])
    integrand = np.einsum("cqi,cji,cqj->cq", vq, gv, wq)
    conv = integrand @ quad.weights * vol * math.factorial(mesh.dim)
    pmean = nodal[cells, 0].mean(axis=1)
    divw = np.trace(gw, axis1=1, axis2=2)
    press = -pmean * divw * vol
    return float(np.sum(visc + conv + press))


def drag_lift(state, mesh, params, obstacle_tag, v_mean, ell, time=None):
    """Drag and lift coefficients from the volume form of the force.

    The test fields are nodal indicators of the obstacle nodes in the x
    (drag) and y (lift) directions, so the integral is supported on the
    cell layer touching the obstacle.
    """
    if mesh.dim != 2:
        raise InvalidArgument("drag_lift is implemented for 2D meshes")
    ind = _indicator(mesh, obstacle_tag)
    nodal = _nodal(state, mesh)
    quad = quadrature(2, 3)
    scale = -2.0 / (v_mean ** 2 * ell)
    wd = np.stack([ind, np.zeros_like(ind)], axis=1)
    wl = np.stack([np.zeros_like(ind), ind], axis=1)
    t = state.time if (time is None and isinstance(state, FieldState)) else (
        time or 0.0)
    return ForceCoefficients(
        c_D=scale * _force_functional(nodal, mesh, params.nu, wd, quad),
        c_L=scale * _force_functional(nodal, mesh, params.nu, wl, quad),
        time=float(t))


class _Locator:
    def __init__(self, mesh):
        self.mesh = mesh
        x = mesh.nodes[mesh.cells]
        self.centroids = x.mean(axis=1)
        self.tree = cKDTree(self.centroids)

    def bary(self, cells, pts):
        m = self.mesh
        x0 = m.nodes[m.cells[cells, 0]]
        g = m.grad_phi[cells]                      # (k, dim+1, dim)
        lam = np.einsum("kad,kd->ka", g, pts - x0)
        lam[:, 0] += 1.0
        return lam

    def locate(self, pts, tol=1e-10):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        cell = np.full(n, -1)
        lam = np.zeros((n, self.mesh.dim + 1))
        k = min(16, self.mesh.n_cells)
        _, cand = self.tree.query(pts, k=k)
        cand = cand.reshape(n, k)
        for j in range(k):
            todo = np.flatnonzero(cell < 0)
            if len(todo) == 0:
                break
            c = cand[todo, j]
            lj = self.bary(c, pts[todo])
            ok = lj.min(axis=1) >= -tol
            cell[todo[ok]] = c[ok]
            lam[todo[ok]] = lj[ok]
        for i in np.flatnonzero(cell < 0):
            # slow path for badly shaped neighbourhoods
            all_cells = np.arange(self.mesh.n_cells)
            li = self.bary(all_cells, np.broadcast_to(pts[i], (len(all_cells),
                                                               self.mesh.dim)))
            best = int(np.argmax(li.min(axis=1)))
            if li[best].min() >= -tol:
                cell[i], lam[i] = best, li[best]
        if np.any(cell < 0):
            bad = pts[np.flatnonzero(cell < 0)[0]]
            raise OutOfDomain(f"point {bad.tolist()} is outside the mesh")
        return cell, lam


_LOCATORS = {}


def locate_points(mesh, points):
    """Containing cell and barycentric coordinates for each point."""
    key = id(mesh)
    loc = _LOCATORS.get(key)
    if loc is None or loc.mesh is not mesh:
        loc = _Locator(mesh)
        _LOCATORS.clear()
        _LOCATORS[key] = loc
    return loc.locate(points)


def evaluate_points(state, mesh, points, field="velocity"):
    """P1 interpolation of ``field`` at arbitrary points inside the mesh."""
    cols = _field_columns(field, mesh.dim)
    cell, lam = locate_points(mesh, points)
    nodal = _nodal(state, mesh)[:, cols]
    out = np.einsum("pa,pak->pk", lam, nodal[mesh.cells[cell]])
    return out[:, 0] if len(cols) == 1 else out


@dataclass(frozen=True)
class LineSample:
    """Values sampled at equispaced points of a segment."""

    points: np.ndarray   # (n, dim)
    s: np.ndarray        # (n,) parameter in [0, 1]
    values: np.ndarray   # (n,) or (n, k)


def sample_line(state, mesh, start, end, n, field="velocity", s=None):
    """Sample ``field`` along the segment ``start -> end``.

    ``s`` overrides the default ``n`` equispaced parameters with explicit
    positions in [0, 1].
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if start.shape != (mesh.dim,) or end.shape != (mesh.dim,):
        raise InvalidArgument("segment endpoints must have mesh dimension")
    if s is None:
        if n < 1:
            raise InvalidArgument("need at least one sample")
        s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    s = np.asarray(s, dtype=float)
    pts = start + s[:, None] * (end - start)
    return LineSample(points=pts, s=s,
                      values=evaluate_points(state, mesh, pts, field))


@dataclass(frozen=True)
class ReferenceTable:
    """Normalised centreline velocities of the lid-driven cavity."""

    re: float
    quantity: str        # "u" (vertical centreline) or "v" (horizontal)
    coords: np.ndarray
    values: np.ndarray
    provenance: str

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if len(c) == 0 or len(c) != len(self.values):
            raise InvalidArgument("reference table must be non-empty and "
                                  "have matching columns")
        if c.min() < 0 or c.max() > 1:
            raise InvalidArgument("reference coordinates must lie in [0, 1]")
        if np.any(np.diff(c) <= 0):
            raise InvalidArgument("reference coordinates must increase")


def parse_reference(text):
    """Read a ``coordinate value`` table with ``# key: value`` headers."""
    meta, prov, rows = {}, [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            prov.append(body)
            key, sep, val = body.partition(":")
            if sep and " " not in key.strip():
                meta[key.strip()] = val.strip()
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidArgument(f"bad reference row: {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if "re" not in meta or "quantity" not in meta:
        raise InvalidArgument("reference table lacks 're' or 'quantity'")
    arr = np.array(rows)
    return ReferenceTable(re=float(meta["re"]), quantity=meta["quantity"],
                          coords=arr[:, 0], values=arr[:, 1],
                          provenance="\n".join(prov))


def load_reference(re, quantity):
    """Bundled cavity table for ``re`` in {100, 400, 1000}."""
    name = f"re{int(re)}_{quantity}.txt"
    res = resources.files("p1flow") / "data" / "ghia" / name
    if not res.is_file():
        raise InvalidArgument(f"no reference table for Re={re}, {quantity}")
    return parse_reference(res.read_text())


def ghia_compare(samples, table):
    """RMS deviation of sampled values from the table values.

    ``samples`` are normalised velocities at exactly ``table.coords``.
    """
    vals = samples.values if isinstance(samples, LineSample) else samples
    vals = np.asarray(vals, dtype=float)
    if vals.shape != table.values.shape:
        raise InvalidArgument("samples must align with the table coordinates")
    return float(np.sqrt(np.mean((vals - table.values) ** 2)))


def cavity_rms(state, mesh, re, lid_speed=1.0, side=1.0, origin=(0.0, 0.0)):
    """Per-line and combined RMS deviation from the bundled tables.

    Returns ``(rms_u, rms_v, rms_all)``; the combined value pools the
    residuals of both centrelines.
    """
    ox, oy = origin
    tu, tv = load_reference(re, "u"), load_reference(re, "v")
    su = sample_line(state, mesh, (ox + side / 2, oy), (ox + side / 2, oy + side),
                     0, field="vx", s=tu.coords)
    sv = sample_line(state, mesh, (ox, oy + side / 2), (ox + side, oy + side / 2),
                     0, field="vy", s=tv.coords)
    du = su.values / lid_speed - tu.values
    dv = sv.values / lid_speed - tv.values
    both = np.concatenate([du, dv])
    return (float(np.sqrt(np.mean(du ** 2))), float(np.sqrt(np.mean(dv ** 2))),
            float(np.sqrt(np.mean(both ** 2))))


def write_vtk(state, mesh, path, title="p1flow"):
    """Legacy ASCII VTK unstructured grid with pressure and velocity."""
    nodal = _nodal(state, mesh)
    n, dim = mesh.n_nodes, mesh.dim
    pts = np.zeros((n, 3))
    pts[:, :dim] = mesh.nodes
    vel = np.zeros((n, 3))
    vel[:, :dim] = nodal[:, 1:]
    nl = dim + 1
    ctype = 5 if dim == 2 else 10
    fmt = "%.17g"
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\n"
                "DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        np.savetxt(f, pts, fmt=fmt)
        f.write(f"CELLS {mesh.n_cells} {mesh.n_cells * (nl + 1)}\n")
        np.savetxt(f, np.column_stack([np.full(mesh.n_cells, nl), mesh.cells]),
                   fmt="%d")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        np.savetxt(f, np.full(mesh.n_cells, ctype), fmt="%d")
        f.write(f"POINT_DATA {n}\nSCALARS pressure double 1\n"
                "LOOKUP_TABLE default\n")
        np.savetxt(f, nodal[:, 0], fmt=fmt)
        f.write("VECTORS velocity double\n")
        np.savetxt(f, vel, fmt=fmt)
    return path


def load_dfg(name):
    """Bundled DFG benchmark bounds as ``{key: (lower, upper, reference)}``."""
    res = resources.files("p1flow") / "data" / "dfg" / f"{name}.txt"
    if not res.is_file():
        raise InvalidArgument(f"no DFG table named {name!r}")
    out = {}
    for line in res.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, lo, hi, ref = line.split()
        out[key] = (float(lo), float(hi), float(ref))
    return out


@dataclass(frozen=True)
class Oscillation:
    """Periodicity summary of a sampled signal."""

    periods: np.ndarray   # successive upward-crossing intervals
    amplitudes: np.ndarray  # half peak-to-peak per period
    mean: float


def oscillation(t, signal, t_start=0.0):
    """Periods and amplitudes from upward crossings of the signal mean.

    Only samples with ``t >= t_start`` are used. Crossing times are
    located by linear interpolation.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(signal, dtype=float)
    if t.shape != s.shape or t.ndim != 1:
        raise InvalidArgument("t and signal must be matching 1D arrays")
    keep = t >= t_start
    t, s = t[keep], s[keep]
    if len(t) < 3:
        return Oscillation(np.empty(0), np.empty(0), float("nan"))
    mean = float(s.mean())
    d = s - mean
    k = np.nonzero((d[:-1] < 0) & (d[1:] >= 0))[0]
    tc = t[k] - d[k] * (t[k + 1] - t[k]) / (d[k + 1] - d[k])
    amps = np.array([0.5 * (s[a:b + 1].max() - s[a:b + 1].min())
                     for a, b in zip(k[:-1], k[1:])])
    return Oscillation(np.diff(tc), amps, mean)
