"""Simplicial meshes with tagged boundary facets.

Meshes come either from the structured generators (:func:`gen_rect`,
:func:`gen_pipe`) or from Gmsh MSH 2.2 ASCII files (:func:`parse_msh2`).
All arrays are frozen after construction.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from .errors import (DegenerateCell, InvalidArgument, MalformedMesh,
                     UnsupportedElement, UnsupportedFormat)

__all__ = ["Mesh", "CellGeometry", "cell_geometry", "gen_rect", "gen_pipe",
           "parse_msh2", "read_msh2", "write_msh2", "boundary_faces"]

# relative tolerance below which a simplex counts as flat
_DEGENERATE_RTOL = 1e-12


def _signed_volumes(nodes, cells):
    dim = nodes.shape[1]
    x = nodes[cells]
    edges = x[:, 1:, :] - x[:, :1, :]
    return np.linalg.det(edges) / math.factorial(dim)


def _face_keys(faces, n_nodes):
    """Encode sorted face node tuples as single int64 keys."""
    faces = np.sort(faces, axis=1)
    key = np.zeros(len(faces), dtype=np.int64)
    for col in range(faces.shape[1]):
        key = key * n_nodes + faces[:, col]
    return key


def boundary_faces(cells, n_nodes):
    """Faces that belong to exactly one cell.

    Returns ``(faces, owner)`` where ``faces`` is an ``(m, dim)`` array of
    node indices and ``owner`` the index of the adjacent cell.
    """
    cells = np.asarray(cells)
    nv = cells.shape[1]
    local = [list(c) for c in combinations(range(nv), nv - 1)]
    faces = np.concatenate([cells[:, f] for f in local])
    owner = np.tile(np.arange(len(cells)), len(local))
    keys = _face_keys(faces, n_nodes)
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    if np.any(counts > 2):
        raise MalformedMesh("a face is shared by more than two cells")
    sel = first[counts == 1]
    return faces[sel], owner[sel]


@dataclass(frozen=True)
class CellGeometry:
    """Measure and constant P1 shape-function gradients of one simplex."""

    volume: float
    grad_phi: np.ndarray  # (dim+1, dim)
    coords: np.ndarray  # (dim+1, dim)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh (triangles in 2D, tetrahedra in 3D).

    Parameters
    ----------
    nodes : (n, dim) float array
    cells : (nc, dim+1) int array
    facets : (nf, dim) int array of boundary simplices
    facet_tags : (nf,) int array, one region id per facet
    tag_names : mapping from region name to region id

    Cells with negative orientation are repaired by swapping their last two
    nodes. Every boundary face has to carry exactly one tag.
    """

    nodes: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_tags: np.ndarray
    tag_names: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise MalformedMesh(f"nodes must be (n, 2|3), got {nodes.shape}")
        dim = nodes.shape[1]
        cells = np.array(self.cells, dtype=np.int64).reshape(-1, dim + 1)
        facets = np.array(self.facets, dtype=np.int64).reshape(-1, dim)
        tags = np.array(self.facet_tags, dtype=np.int64).reshape(-1)
        if len(tags) != len(facets):
            raise MalformedMesh("facet_tags length differs from facets")
        n = len(nodes)
        for name, arr in (("cells", cells), ("facets", facets)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise MalformedMesh(f"{name} reference nodes out of range")
        if len(cells) == 0:
            raise MalformedMesh("mesh has no cells")

        vol = _signed_volumes(nodes, cells)
        scale = np.ptp(nodes, axis=0).max() ** dim
        flat = np.abs(vol) <= _DEGENERATE_RTOL * scale
        if np.any(flat):
            raise DegenerateCell(
                f"{int(flat.sum())} cell(s) have zero volume, "
                f"first is cell {int(np.argmax(flat))}")
        neg = vol < 0
        if np.any(neg):
            cells[neg, -2], cells[neg, -1] = cells[neg, -1], cells[neg, -2].copy()

        bfaces, _ = boundary_faces(cells, n)
        bkeys = _face_keys(bfaces, n)
        fkeys = _face_keys(facets, n)
        ukeys, counts = np.unique(fkeys, return_counts=True)
        if np.any(counts > 1):
            raise MalformedMesh("a boundary facet is listed more than once")
        if not np.all(np.isin(fkeys, bkeys)):
            raise MalformedMesh("a tagged facet is not a boundary face of "
                                "exactly one cell")
        missing = ~np.isin(bkeys, ukeys)
        if np.any(missing):
            raise MalformedMesh(f"{int(missing.sum())} boundary face(s) carry "
                                "no tag")

        for arr in (nodes, cells, facets, tags):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "facets", facets)
        object.__setattr__(self, "facet_tags", tags)
        object.__setattr__(self, "tag_names", dict(self.tag_names))

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_cells(self):
        return len(self.cells)

    def __repr__(self):
        return (f"Mesh(dim={self.dim}, nodes={self.n_nodes}, "
                f"cells={self.n_cells}, facets={len(self.facets)}, "
                f"tags={sorted(set(self.facet_tags.tolist()))})")

    def tag_id(self, tag):
        """Resolve a region name or id to the integer id."""
        if isinstance(tag, str):
            if tag in self.tag_names:
                return self.tag_names[tag]
            raise KeyError(tag)
        tag = int(tag)
        if tag not in set(self.facet_tags.tolist()):
            raise KeyError(tag)
        return tag

    def tag_nodes(self, tag):
        """Sorted node indices lying on facets with the given tag."""
        tid = self.tag_id(tag)
        return np.unique(self.facets[self.facet_tags == tid])

    @cached_property
    def volumes(self):
        return _signed_volumes(self.nodes, self.cells)

    @cached_property
    def grad_phi(self):
        """(nc, dim+1, dim) gradients of the barycentric coordinates."""
        x = self.nodes[self.cells]
        jac = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)  # columns = edges
        # grad of lambda_k (k >= 1) is row k-1 of J^{-1}
        g_rest = np.linalg.inv(jac)
        g0 = -g_rest.sum(axis=1, keepdims=True)
        return np.concatenate([g0, g_rest], axis=1)

    @cached_property
    def h_max(self):
        """Longest edge length."""
        x = self.nodes[self.cells]
        nv = self.cells.shape[1]
        lengths = [np.linalg.norm(x[:, i] - x[:, j], axis=1)
                   for i, j in combinations(range(nv), 2)]
        return float(np.max(lengths))

    def boundary_nodes(self):
        return np.unique(self.facets)


def cell_geometry(mesh, cell):
    """Volume and P1 gradients of a single cell."""
    if not 0 <= cell < mesh.n_cells:
        raise InvalidArgument(f"cell index {cell} out of range")
    coords = mesh.nodes[mesh.cells[cell]]
    edges = (coords[1:] - coords[:1]).T
    vol = np.linalg.det(edges) / math.factorial(mesh.dim)
    scale = np.ptp(coords, axis=0).max() ** mesh.dim
    if abs(vol) <= _DEGENERATE_RTOL * max(scale, 1e-300):
        raise DegenerateCell(f"cell {cell} is degenerate")
    g_rest = np.linalg.inv(edges)
    grads = np.vstack([-g_rest.sum(axis=0), g_rest])
    return CellGeometry(volume=abs(vol), grad_phi=grads, coords=coords.copy())


def _check_counts(**counts):
    for name, value in counts.items():
        if int(value) != value or value < 1:
            raise InvalidArgument(f"{name} must be a positive integer, "
                                  f"got {value!r}")


def _check_lengths(**lengths):
    for name, value in lengths.items():
        if not value > 0:
            raise InvalidArgument(f"{name} must be positive, got {value!r}")


RECT_TAGS = {"bottom": 1, "right": 2, "top": 3, "left": 4}
PIPE_TAGS = {"inlet": 1, "outlet": 2, "wall": 3}


def gen_rect(nx, ny, Lx=1.0, Ly=1.0, tags=None, origin=(0.0, 0.0)):
    """Structured triangulation of ``[0, Lx] x [0, Ly]``.

    Each of the ``nx * ny`` quads is cut along its lower-left to upper-right
    diagonal. ``tags`` maps the side names ``bottom``, ``right``, ``top``,
    ``left`` to region ids (defaults: 1, 2, 3, 4).
    """
    _check_counts(nx=nx, ny=ny)
    _check_lengths(Lx=Lx, Ly=Ly)
    tags = {**RECT_TAGS, **(tags or {})}
    xs = origin[0] + np.linspace(0.0, Lx, nx + 1)
    ys = origin[1] + np.linspace(0.0, Ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    n00 = idx[:-1, :-1].ravel()
    n10 = idx[:-1, 1:].ravel()
    n01 = idx[1:, :-1].ravel()
    n11 = idx[1:, 1:].ravel()
    cells = np.concatenate([np.column_stack([n00, n10, n11]),
                            np.column_stack([n00, n11, n01])])

    sides = {
        "bottom": np.column_stack([idx[0, :-1], idx[0, 1:]]),
        "right": np.column_stack([idx[:-1, -1], idx[1:, -1]]),
        "top": np.column_stack([idx[-1, 1:], idx[-1, :-1]]),
        "left": np.column_stack([idx[1:, 0], idx[:-1, 0]]),
    }
    facets = np.concatenate(list(sides.values()))
    ftags = np.concatenate([np.full(len(e), tags[s]) for s, e in sides.items()])
    names = {s: tags[s] for s in sides}
    return Mesh(nodes, cells, facets, ftags, names)


def _square_to_disk(xi, eta):
    """Map the square [-1, 1]^2 onto the unit disk.

    Blends the identity (near the centre) with the concentric radial
    projection (at the rim) so interior cells stay close to squares.
    """
    r_inf = np.maximum(np.abs(xi), np.abs(eta))
    r_two = np.hypot(xi, eta)
    with np.errstate(invalid="ignore", divide="ignore"):
        shrink = np.where(r_two > 0, r_inf / r_two, 1.0)
    s = (1.0 - r_inf) + r_inf * shrink
    return xi * s, eta * s


def gen_pipe(n_axial, n_radial, L, D, tags=None):
    """Tetrahedral mesh of a circular pipe along the z axis.

    A structured ``n_radial x n_radial`` grid on the square section is mapped
    onto the disk of diameter ``D``; each quad is cut into two triangles with
    the diagonals pointing towards the square corners, and every triangular
    prism of the axial extrusion is split into three tetrahedra. Regions:
    ``inlet`` (z = 0), ``outlet`` (z = L), ``wall``.
    """
    _check_counts(n_axial=n_axial, n_radial=n_radial)
    _check_lengths(L=L, D=D)
    tags = {**PIPE_TAGS, **(tags or {})}
    m = n_radial
    s = np.linspace(-1.0, 1.0, m + 1)
    XI, ETA = np.meshgrid(s, s)
    px, py = _square_to_disk(XI.ravel(), ETA.ravel())
    sec = 0.5 * D * np.column_stack([px, py])
    n2 = len(sec)

    idx = np.arange(n2).reshape(m + 1, m + 1)
    tris = []
    for j in range(m):
        for i in range(m):
            a, b = idx[j, i], idx[j, i + 1]
            c, d = idx[j + 1, i], idx[j + 1, i + 1]
            xc = 0.5 * (s[i] + s[i + 1])
            yc = 0.5 * (s[j] + s[j + 1])
            if xc * yc > 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    tris = np.sort(np.array(tris, dtype=np.int64), axis=1)

    zs = np.linspace(0.0, L, n_axial + 1)
    nodes = np.column_stack([np.tile(sec, (n_axial + 1, 1)),
                             np.repeat(zs, n2)])

    # prism (a<b<c) bottom, (a',b',c') top -> 3 tets; each vertical quad face
    # is cut from the lower-index bottom node to the higher-index top node,
    # so neighbouring prisms agree on their shared faces.
    cells = []
    for k in range(n_axial):
        a, b, c = (tris[:, 0] + k * n2, tris[:, 1] + k * n2,
                   tris[:, 2] + k * n2)
        at, bt, ct = a + n2, b + n2, c + n2
        cells += [np.column_stack([a, b, c, ct]),
                  np.column_stack([a, b, bt, ct]),
                  np.column_stack([a, at, bt, ct])]
    cells = np.concatenate(cells)

    ring = np.concatenate([idx[0, :-1], idx[:-1, -1], idx[-1, :0:-1],
                           idx[:0:-1, 0]])
    rim = np.column_stack([ring, np.roll(ring, -1)])
    rim = np.sort(rim, axis=1)
    walls = []
    for k in range(n_axial):
        u, v = rim[:, 0] + k * n2, rim[:, 1] + k * n2
        walls += [np.column_stack([u, v, v + n2]),
                  np.column_stack([u, v + n2, u + n2])]
    walls = np.concatenate(walls)
    inlet = tris
    outlet = tris + n_axial * n2
    facets = np.concatenate([inlet, outlet, walls])
    ftags = np.concatenate([np.full(len(inlet), tags["inlet"]),
                            np.full(len(outlet), tags["outlet"]),
                            np.full(len(walls), tags["wall"])])
    names = {k: tags[k] for k in ("inlet", "outlet", "wall")}
    return Mesh(nodes, cells, facets, ftags, names)


# ---------------------------------------------------------------- MSH 2.2

_NODES_PER_TYPE = {1: 2, 2: 3, 4: 4, 15: 1}


def _sections(lines):
    """Yield (name, body_lines) for every $Section ... $EndSection block."""
    i, n = 0, len(lines)
    while i < n:
        line = lines[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            end = "$End" + name
            j = i + 1
            while j < n and lines[j].strip() != end:
                j += 1
            if j == n:
                raise MalformedMesh(f"section ${name} is not closed")
            yield name, lines[i + 1:j]
            i = j + 1
        else:
            i += 1


def parse_msh2(text):
    """Parse a Gmsh MSH 2.2 ASCII mesh.

    Triangles (type 2) or tetrahedra (type 4) become cells; lines (type 1)
    in 2D or triangles in 3D become boundary facets carrying their first
    (physical) tag. Point elements (type 15) are ignored, as are sections
    other than ``$MeshFormat``, ``$Nodes``, ``$Elements`` and
    ``$PhysicalNames``.
    """
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()
    sections = {}
    for name, body in _sections(lines):
        sections.setdefault(name, body)
    if "MeshFormat" not in sections:
        raise UnsupportedFormat("missing $MeshFormat section")
    head = sections["MeshFormat"][0].split() if sections["MeshFormat"] else []
    if len(head) < 3 or head[0] not in ("2.2", "2.2.0") or head[1] != "0":
        raise UnsupportedFormat(f"expected '2.2 0 8', got {' '.join(head)!r}")
    for required in ("Nodes", "Elements"):
        if required not in sections:
            raise MalformedMesh(f"missing ${required} section")

    names = {}
    for line in sections.get("PhysicalNames", [])[1:]:
        parts = line.split(maxsplit=2)
        if len(parts) == 3:
            names[parts[2].strip().strip('"')] = int(parts[1])

    body = sections["Nodes"]
    count = int(body[0])
    if len(body) - 1 < count:
        raise MalformedMesh("$Nodes section shorter than declared")
    raw = np.loadtxt(io.StringIO("\n".join(body[1:count + 1])), ndmin=2)
    node_ids = raw[:, 0].astype(np.int64)
    coords = raw[:, 1:4]
    id_to_index = {nid: k for k, nid in enumerate(node_ids.tolist())}

    body = sections["Elements"]
    count = int(body[0])
    if len(body) - 1 < count:
        raise MalformedMesh("$Elements section shorter than declared")
    by_type = {1: [], 2: [], 4: []}
    for line in body[1:count + 1]:
        parts = [int(p) for p in line.split()]
        etype, ntags = parts[1], parts[2]
        if etype not in _NODES_PER_TYPE:
            raise UnsupportedElement(f"element type {etype} is not supported")
        if etype == 15:
            continue
        tag = parts[3] if ntags > 0 else 0
        conn = parts[3 + ntags:]
        if len(conn) != _NODES_PER_TYPE[etype]:
            raise MalformedMesh(f"element {parts[0]} has {len(conn)} nodes")
        try:
            conn = [id_to_index[c] for c in conn]
        except KeyError as exc:
            raise MalformedMesh(f"element {parts[0]} references unknown "
                                f"node {exc.args[0]}") from None
        by_type[etype].append((tag, conn))

    if by_type[4]:
        dim, cell_type, facet_type = 3, 4, 2
    elif by_type[2]:
        dim, cell_type, facet_type = 2, 2, 1
    else:
        raise MalformedMesh("no triangle or tetrahedron elements found")
    if dim == 2:
        if np.any(np.abs(coords[:, 2]) > 0):
            raise UnsupportedElement("triangles with nonzero z: surface "
                                     "meshes are not supported")
        coords = coords[:, :2]
    cells = np.array([c for _, c in by_type[cell_type]], dtype=np.int64)
    if by_type[facet_type]:
        ftags = np.array([t for t, _ in by_type[facet_type]], dtype=np.int64)
        facets = np.array([c for _, c in by_type[facet_type]], dtype=np.int64)
    else:
        ftags = np.zeros(0, dtype=np.int64)
        facets = np.zeros((0, dim), dtype=np.int64)
    if dim == 3 and len(facets):
        # triangles that are not boundary faces would be 2D volume elements
        bf, _ = boundary_faces(cells, len(coords))
        inside = ~np.isin(_face_keys(facets, len(coords)),
                          _face_keys(bf, len(coords)))
        if np.any(inside):
            raise UnsupportedElement("mixed 2D/3D volume elements")

    # keep only nodes referenced by cells
    used = np.unique(cells)
    remap = np.full(len(coords), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    facets_m = remap[facets]
    if np.any(facets_m < 0):
        raise MalformedMesh("a boundary facet references a node not used by "
                            "any cell")
    return Mesh(coords[used], remap[cells], facets_m, ftags, names)


def read_msh2(path):
    with open(path, "r", encoding="ascii") as fh:
        return parse_msh2(fh.read())


def write_msh2(mesh, path_or_stream):
    """Write ``mesh`` as MSH 2.2 ASCII (facets first, then cells)."""
    out = []
    out.append("$MeshFormat\n2.2 0 8\n$EndMeshFormat")
    if mesh.tag_names:
        out.append("$PhysicalNames")
        out.append(str(len(mesh.tag_names) + 1))
        for name, tid in sorted(mesh.tag_names.items(), key=lambda kv: kv[1]):
            out.append(f'{mesh.dim - 1} {tid} "{name}"')
        out.append(f'{mesh.dim} 0 "domain"')
        out.append("$EndPhysicalNames")
    out.append("$Nodes")
    out.append(str(mesh.n_nodes))
    xyz = np.zeros((mesh.n_nodes, 3))
    xyz[:, :mesh.dim] = mesh.nodes
    out.extend(f"{k + 1} {x:.17g} {y:.17g} {z:.17g}"
               for k, (x, y, z) in enumerate(xyz))
    out.append("$EndNodes")
    out.append("$Elements")
    ftype, ctype = (1, 2) if mesh.dim == 2 else (2, 4)
    out.append(str(len(mesh.facets) + mesh.n_cells))
    eid = 1
    for tag, f in zip(mesh.facet_tags, mesh.facets):
        out.append(f"{eid} {ftype} 2 {tag} {tag} " + " ".join(str(v + 1) for v in f))
        eid += 1
    for c in mesh.cells:
        out.append(f"{eid} {ctype} 2 0 0 " + " ".join(str(v + 1) for v in c))
        eid += 1
    out.append("$EndElements")
    text = "\n".join(out) + "\n"
    if isinstance(path_or_stream, (str, os.PathLike)):
        with open(path_or_stream, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        path_or_stream.write(text)
