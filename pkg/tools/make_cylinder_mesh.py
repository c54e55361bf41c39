"""Generate the bundled channel-with-cylinder triangle mesh (MSH 2.2).

Points are placed with a graded size function, relaxed with a truss
smoother (Persson-Strang style) and triangulated with scipy's Delaunay.
Run from the repository root:

    python tools/make_cylinder_mesh.py [--h0 0.004] [--hmax 0.025] [--out PATH]
"""
import argparse
import math

import numpy as np
from scipy.spatial import Delaunay

from p1flow.mesh import Mesh, boundary_faces, write_msh2

LX, LY = 2.2, 0.41
CX, CY, R = 0.2, 0.2, 0.05
TAGS = {"inlet": 1, "outlet": 2, "walls": 3, "obstacle": 4}


def signed_distance(p):
    x, y = p[:, 0], p[:, 1]
    rect = -np.minimum.reduce([x, LX - x, y, LY - y])
    circ = np.hypot(x - CX, y - CY) - R
    return np.maximum(rect, -circ)


def size(p, h0, hmax, hwake):
    d = np.maximum(np.hypot(p[:, 0] - CX, p[:, 1] - CY) - R, 0.0)
    h = np.minimum(h0 + 0.12 * d, hmax)
    wake = (p[:, 0] > CX) & (p[:, 0] < 1.4) & (np.abs(p[:, 1] - CY) < 0.12)
    return np.where(wake, np.minimum(h, hwake), h)


def edge_points(a, b, h0, hmax, hwake):
    """Points along segment a->b with spacing following the size field."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = np.linalg.norm(b - a)
    s = [0.0]
    while True:
        p = a + (b - a) * (s[-1] / length)
        step = size(p[None], h0, hmax, hwake)[0]
        if s[-1] + 1.5 * step >= length:
            break
        s.append(s[-1] + step)
    s = np.array(s) * length / (s[-1] + (length - s[-1]))
    return a + (b - a) * (s[:, None] / length)


def triangulate(p):
    tri = Delaunay(p).simplices
    cen = p[tri].mean(axis=1)
    return tri[signed_distance(cen) < -1e-4 * R]


def build(h0, hmax, hwake, iters, seed):
    rng = np.random.default_rng(seed)
    n_circ = int(round(2 * math.pi * R / h0))
    th = np.linspace(0, 2 * math.pi, n_circ, endpoint=False)
    circle = np.column_stack([CX + R * np.cos(th), CY + R * np.sin(th)])
    corners = [(0, 0), (LX, 0), (LX, LY), (0, LY)]
    rect = np.concatenate([edge_points(corners[k], corners[(k + 1) % 4],
                                       h0, hmax, hwake) for k in range(4)])
    fixed = np.concatenate([circle, rect])

    hmin = h0
    gx, gy = np.meshgrid(np.arange(0, LX, hmin),
                         np.arange(0, LY, hmin * math.sqrt(3) / 2))
    gx[1::2] += hmin / 2
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    cand = cand[signed_distance(cand) < -0.5 * h0]
    keep = rng.random(len(cand)) < (hmin / size(cand, h0, hmax, hwake)) ** 2
    free = cand[keep]

    nfix = len(fixed)
    deps = 1e-8 * hmin
    for _ in range(iters):
        p = np.concatenate([fixed, free])
        tri = triangulate(p)
        bars = np.unique(np.sort(np.concatenate(
            [tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]]), axis=1), axis=0)
        vec = p[bars[:, 0]] - p[bars[:, 1]]
        length = np.linalg.norm(vec, axis=1)
        hbar = size(p[bars].mean(axis=1), h0, hmax, hwake)
        target = hbar * 1.2 * math.sqrt((length ** 2).sum() / (hbar ** 2).sum())
        force = np.maximum(target - length, 0) / length
        fvec = force[:, None] * vec
        total = np.zeros_like(p)
        np.add.at(total, bars[:, 0], fvec)
        np.add.at(total, bars[:, 1], -fvec)
        free = free + 0.2 * total[nfix:]
        # project escaped points back inside
        d = signed_distance(free)
        margin = 0.5 * size(free, h0, hmax, hwake)
        out = d > -margin
        if np.any(out):
            q = free[out]
            gradx = (signed_distance(q + [deps, 0]) - d[out]) / deps
            grady = (signed_distance(q + [0, deps]) - d[out]) / deps
            push = d[out] + margin[out]
            free[out] = q - np.column_stack([push * gradx, push * grady])
    # points squeezed against the fixed boundary would form slivers
    margin = 0.4 * size(free, h0, hmax, hwake)
    p = np.concatenate([fixed, free[signed_distance(free) < -margin]])
    tri = triangulate(p)
    used = np.unique(tri)
    remap = np.full(len(p), -1)
    remap[used] = np.arange(len(used))
    return p[used], remap[tri]


def tag_facets(nodes, faces):
    mid = nodes[faces].mean(axis=1)
    tol = 1e-9
    tags = np.full(len(faces), TAGS["walls"])
    tags[np.abs(mid[:, 0]) < tol] = TAGS["inlet"]
    tags[np.abs(mid[:, 0] - LX) < tol] = TAGS["outlet"]
    near = np.hypot(mid[:, 0] - CX, mid[:, 1] - CY) < R + 1e-6
    tags[near] = TAGS["obstacle"]
    wall = (np.abs(mid[:, 1]) < tol) | (np.abs(mid[:, 1] - LY) < tol)
    inner = ~(near | wall | (np.abs(mid[:, 0]) < tol)
              | (np.abs(mid[:, 0] - LX) < tol))
    if np.any(inner):
        raise RuntimeError("boundary face away from the geometric boundary")
    return tags


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--h0", type=float, default=0.004)
    ap.add_argument("--hmax", type=float, default=0.025)
    ap.add_argument("--hwake", type=float, default=0.01)
    ap.add_argument("--iters", type=int, default=80)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="src/p1flow/data/meshes/cylinder2d.msh")
    args = ap.parse_args()
    nodes, cells = build(args.h0, args.hmax, args.hwake, args.iters, args.seed)
    faces, _ = boundary_faces(cells, len(nodes))
    mesh = Mesh(nodes, cells, faces, tag_facets(nodes, faces), TAGS)
    x = nodes[mesh.cells]
    e = [np.linalg.norm(x[:, i] - x[:, j], axis=1) for i, j in ((0, 1), (1, 2), (0, 2))]
    quality = 4 * math.sqrt(3) * np.abs(mesh.volumes) / sum(l ** 2 for l in e)
    write_msh2(mesh, args.out)
    print(f"{mesh}; min quality {quality.min():.3f}, "
          f"area {np.abs(mesh.volumes).sum():.6f} "
          f"(exact {LX * LY - math.pi * R * R:.6f})")


if __name__ == "__main__":
    main()
