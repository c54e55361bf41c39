"""Command-line front end: ``run``, ``convergence`` and ``validate``.

Exit codes: 0 success, 1 invalid case, 2 Newton failure. Assembly uses
``P1FLOW_THREADS`` worker threads (default 1).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from .config import build_mesh, load_case
from .errors import (ConfigError, InvalidArgument, MalformedMesh,
                     NonConvergence, P1FlowError, SingularSystem,
                     UnknownRegion, UnsupportedElement, UnsupportedFormat)
from .oracles import (PipeSpec, pipe_steady, pipe_transient,
                      plane_poiseuille, reynolds_pipe)
from .post import (cavity_rms, div_norm, drag_lift, evaluate_points,
                   l2_error, write_vtk)
from .solver import DirichletSet, time_march

log = logging.getLogger("p1flow")

__all__ = ["main", "run_case", "convergence_study", "validate_case",
           "oracle_errors"]

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _pipe_spec(case):
    o = case.oracle
    return PipeSpec(a=o["diameter"] / 2, L=o["length"], dpdz=o["dpdz"],
                    params=case.material)


def _centre_point(case, mesh):
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    return 0.5 * (lo + hi)


def oracle_errors(case, mesh, state):
    """Errors of ``state`` against the case's reference solution.

    Returns a dict with ``l2_velocity`` and ``centerline_rel`` where these
    apply, plus oracle-specific extras.
    """
    o = case.oracle
    if o is None:
        return {}
    typ = o["type"]
    out = {}
    if typ == "plane_poiseuille":
        y0 = mesh.nodes[:, 1].min()
        H, dpdx, mu = o["H"], o["dpdx"], case.material.mu

        def exact(x):
            u = plane_poiseuille(x[..., 1] - y0, H, dpdx, mu)
            return np.stack([u, np.zeros_like(u)], axis=-1)
        c = _centre_point(case, mesh)
        vmax = float(plane_poiseuille(H / 2, H, dpdx, mu))
        uc = float(evaluate_points(state, mesh, c[None], "vx")[0])
        out["l2_velocity"] = l2_error(state, exact, mesh)
        out["centerline_velocity"] = uc
        out["centerline_exact"] = vmax
        out["centerline_rel"] = abs(uc - vmax) / abs(vmax)
    elif typ == "pipe":
        spec = _pipe_spec(case)
        t = state.time
        transient = bool(o.get("transient", False))

        def vz(r):
            return (pipe_transient(r, t, spec) if transient
                    else pipe_steady(r, spec))

        def exact(x):
            r = np.minimum(np.hypot(x[..., 0], x[..., 1]), spec.a)
            w = vz(r)
            z = np.zeros_like(w)
            return np.stack([z, z, w], axis=-1)
        axis_pt = np.array([[0.0, 0.0, spec.L / 2]])
        wc = float(evaluate_points(state, mesh, axis_pt, "vz")[0])
        we = float(vz(0.0))
        out["l2_velocity"] = l2_error(state, exact, mesh)
        out["centerline_velocity"] = wc
        out["centerline_exact"] = we
        out["centerline_rel"] = abs(wc - we) / abs(we) if we else float("nan")
        if wc > 0:
            out["reynolds"] = reynolds_pipe(wc, 2 * spec.a, case.material)
        out["reynolds_oracle"] = reynolds_pipe(spec.vmax, 2 * spec.a,
                                               case.material)
    elif typ == "ghia":
        lo = mesh.nodes.min(axis=0)
        side = o.get("side", 1.0)
        ru, rv, rall = cavity_rms(state, mesh, o["re"],
                                  lid_speed=o.get("lid_speed", 1.0),
                                  side=side, origin=tuple(lo))
        out.update(rms_u=ru, rms_v=rv, rms=rall)
    elif typ == "mms":
        ms = case.manufactured
        t = state.time
        out["l2_velocity"] = l2_error(state, lambda x: ms.velocity(x, t), mesh)
        has_p = any(bc.kind == "pressure" for bc in case.bcs)
        out["l2_pressure"] = l2_error(state, lambda x: ms.pressure(x, t),
                                      mesh, "p", mean_free=not has_p)
    return out


class _Recorder:
    """Per-step probe, force and VTK output."""

    def __init__(self, case, mesh, out_dir):
        self.case, self.mesh, self.out_dir = case, mesh, out_dir
        outs = case.outputs
        self.probes = outs.get("probes", [])
        self.forces = outs.get("forces")
        self.vtk_every = outs.get("vtk_every", 0)
        self.rows = []
        self.force_rows = []
        cols = ["time", "newton_iterations", "div_norm"]
        cols += [p["name"] for p in self.probes]
        if self.forces:
            cols += ["c_D", "c_L"]
        self.columns = cols
        self._pts = {}

    def __call__(self, step, state, report):
        row = [state.time, report.iterations, div_norm(state, self.mesh)]
        for p in self.probes:
            pt = np.asarray(p["point"], dtype=float)[None]
            row.append(float(evaluate_points(state, self.mesh, pt,
                                             p.get("field", "vx"))[0]))
        if self.forces:
            f = drag_lift(state, self.mesh, self.case.material,
                          self.forces["obstacle"], self.forces["v_mean"],
                          self.forces["ell"])
            row += [f.c_D, f.c_L]
        self.rows.append(row)
        if self.out_dir and self.vtk_every and step % self.vtk_every == 0:
            write_vtk(state, self.mesh, os.path.join(
                self.out_dir, "vtk", f"{self.case.name}_{step:06d}.vtk"))

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("# " + " ".join(self.columns) + "\n")
            for r in self.rows:
                fh.write(" ".join(f"{v:.10g}" for v in r) + "\n")

    def force_stats(self):
        if not self.forces or not self.rows:
            return None
        arr = np.array(self.rows)
        cd, cl, t = arr[:, -2], arr[:, -1], arr[:, 0]
        i, j = int(np.argmax(cd)), int(np.argmax(cl))
        return {"c_D_max": float(cd[i]), "t_c_D_max": float(t[i]),
                "c_L_max": float(cl[j]), "t_c_L_max": float(t[j]),
                "c_D_final": float(cd[-1]), "c_L_final": float(cl[-1])}


def run_case(case, out_dir=None, mesh=None):
    """March a case to ``t_end`` and collect a summary dict.

    With ``out_dir`` the probe table, summary JSON and VTK files are
    written there. Newton failure is reported in the summary
    (``status = "nonconvergence"``) after writing the partial outputs.
    """
    mesh = mesh if mesh is not None else build_mesh(case.mesh, case.base_dir)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rec = _Recorder(case, mesh, out_dir)
    t0 = time.perf_counter()
    result = time_march(mesh, case.material, case.bcs, case.solver,
                        callback=rec, snapshot_every=0)
    elapsed = time.perf_counter() - t0
    state = result.final
    reports = result.reports
    summary = {
        "name": case.name,
        "kind": case.kind,
        "status": "completed" if result.completed else "nonconvergence",
        "steps": len(reports),
        "time": state.time,
        "nodes": mesh.n_nodes,
        "cells": mesh.n_cells,
        "dofs": mesh.n_nodes * (1 + mesh.dim),
        "h_max": mesh.h_max,
        "dt": case.solver.dt,
        "newton": {
            "final_iterations": reports[-1].iterations if reports else 0,
            "final_increments": reports[-1].increment_norms if reports else [],
            "max_iterations": max((r.iterations for r in reports), default=0),
            "total_iterations": sum(r.iterations for r in reports),
            "tolerance": reports[-1].tolerance if reports else None,
        },
        "div_norm": div_norm(state, mesh),
    }
    if result.error is not None:
        summary["error"] = str(result.error)
    if reports:
        summary["errors"] = oracle_errors(case, mesh, state)
    stats = rec.force_stats()
    if stats:
        summary["forces"] = stats
    log.info("%s: %d steps in %.1f s", case.name, len(reports), elapsed)
    if out_dir:
        rec.write(os.path.join(out_dir, "probes.txt"))
        write_vtk(state, mesh, os.path.join(out_dir, "vtk",
                                            f"{case.name}_final.vtk"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    summary["_state"] = state
    summary["_probes"] = rec
    return summary


def convergence_study(case, levels, mode="space", out_dir=None):
    """Run ``levels`` refinements (mesh halving or dt halving).

    Returns rows of ``(h or dt, dofs, l2 error, centerline error)`` and a
    flag telling whether the L2 error decreases strictly.
    """
    if case.oracle is None:
        raise InvalidArgument("convergence study needs a case with an oracle")
    if mode not in ("space", "time"):
        raise InvalidArgument(f"mode must be 'space' or 'time', got {mode!r}")
    if levels < 1:
        raise InvalidArgument("need at least one level")
    rows = []
    for k in range(levels):
        if mode == "space":
            mesh = build_mesh(case.mesh, case.base_dir, refine=2 ** k)
            c = case
            param = mesh.h_max
        else:
            mesh = build_mesh(case.mesh, case.base_dir)
            c = case.with_solver(dt=case.solver.dt / 2 ** k)
            param = c.solver.dt
        s = run_case(c, None, mesh=mesh)
        if s["status"] != "completed":
            raise NonConvergence(f"level {k} failed: {s.get('error')}")
        e = s["errors"]
        key = "l2_velocity"
        rows.append({"level": k, "param": param, "dofs": s["dofs"],
                     "l2_error": e.get(key, float("nan")),
                     "centerline_error": e.get("centerline_rel",
                                               e.get("l2_pressure",
                                                     float("nan")))})
        log.info("level %d: %s", k, rows[-1])
    l2 = [r["l2_error"] for r in rows]
    monotone = all(b < a for a, b in zip(l2, l2[1:]))
    report = {"case": case.name, "mode": mode,
              "param_name": "h_max" if mode == "space" else "dt",
              "rows": rows, "monotone": monotone,
              "ratios": [a / b for a, b in zip(l2, l2[1:]) if b > 0]}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"convergence_{mode}.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return report


def validate_case(path):
    """Check a case file without solving.

    Returns ``(ok, diagnostics)``; warnings do not make a case invalid.
    """
    diags = []
    try:
        case = load_case(path)
    except ConfigError as exc:
        return False, [f"error: {p}" for p in exc.problems]
    try:
        mesh = build_mesh(case.mesh, case.base_dir)
    except FileNotFoundError as exc:
        return False, [f"error: {exc}"]
    except (MalformedMesh, UnsupportedFormat, UnsupportedElement,
            InvalidArgument, P1FlowError) as exc:
        return False, [f"error: mesh: {exc}"]
    ok = True
    for bc in case.bcs:
        try:
            mesh.tag_id(bc.tag)
        except KeyError:
            ok = False
            diags.append(f"error: bcs: unknown region {bc.tag!r} "
                         f"(mesh has {sorted(mesh.tag_names) or 'ids only'})")
    forces = case.outputs.get("forces")
    if forces:
        try:
            mesh.tag_id(forces["obstacle"])
        except KeyError:
            ok = False
            diags.append(f"error: outputs.forces.obstacle: unknown region "
                         f"{forces['obstacle']!r}")
    for p in case.outputs.get("probes", []):
        if len(p["point"]) != mesh.dim:
            ok = False
            diags.append(f"error: probe {p['name']!r} has {len(p['point'])} "
                         f"coordinates in a {mesh.dim}D case")
    if ok:
        try:
            d = DirichletSet(mesh, case.bcs, ramp=case.solver.ramp,
                             gauge=case.solver.pressure_gauge)
            d.values(case.solver.dt)
            d.values(case.solver.t_end)
        except SingularSystem as exc:
            diags.append(f"warning: SingularSystem: {exc}")
        except (P1FlowError, ValueError) as exc:
            ok = False
            diags.append(f"error: bcs: {exc}")
    diags += [f"warning: {w}" for w in case.warnings]
    if ok and not any(d.startswith("error") for d in diags):
        diags.insert(0, "OK")
    return ok, diags


def _print_summary(summary):
    clean = {k: v for k, v in summary.items() if not k.startswith("_")}
    print(json.dumps(clean, indent=2, sort_keys=True))


def _cmd_run(args):
    try:
        case = load_case(args.case)
        out = args.out or os.path.join("out", case.name)
        summary = run_case(case, out)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, UnknownRegion, MalformedMesh,
            UnsupportedFormat, UnsupportedElement) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularSystem, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_summary(summary)
    if summary["status"] != "completed":
        print(f"error: {summary.get('error')}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_convergence(args):
    try:
        case = load_case(args.case)
        report = convergence_study(case, args.levels, args.mode, args.out)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgument, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    name = report["param_name"]
    print(f"{name:>12} {'dofs':>9} {'l2_error':>12} {'centerline':>12}")
    for r in report["rows"]:
        print(f"{r['param']:12.5g} {r['dofs']:9d} {r['l2_error']:12.4e} "
              f"{r['centerline_error']:12.4e}")
    if not report["monotone"]:
        print("warning: L2 error is not strictly decreasing")
    print(json.dumps({k: report[k] for k in ("monotone", "ratios")}))
    return EXIT_OK


def _cmd_validate(args):
    ok, diags = validate_case(args.case)
    for d in diags:
        print(d)
    return EXIT_OK if ok else EXIT_CONFIG


def main(argv=None):
    ap = argparse.ArgumentParser(prog="p1flow", description=__doc__.split(
        "\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a case")
    p.add_argument("case")
    p.add_argument("--out", help="output directory (default out/<name>)")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("convergence", help="mesh or time-step study")
    p.add_argument("case")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--mode", choices=("space", "time"), default="space")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_convergence)
    p = sub.add_parser("validate", help="check a case without solving")
    p.add_argument("case")
    p.set_defaults(func=_cmd_validate)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
