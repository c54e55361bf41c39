"""JSON case files.

A case file describes one run: mesh source, material, boundary conditions,
time stepping, outputs and (optionally) the reference solution used for
error reports. Keys starting with ``_`` are comments and ignored.

BC values and body forces may be numbers or arithmetic expressions over
``x, y, z, t`` with ``pi``, ``e`` and the functions ``sin cos tan exp sqrt
abs tanh sinh cosh log``. The value ``"exact"`` selects the manufactured
solution of an ``mms`` case.
"""
from __future__ import annotations

import ast
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .errors import ConfigError, InvalidArgument
from .mesh import gen_pipe, gen_rect, read_msh2
from .solver import BoundaryCondition, Ramp, SolverConfig
from .weakform import MaterialParams, mms_forcing

__all__ = ["Expression", "CaseConfig", "load_case", "parse_case",
           "build_mesh", "bundled_case", "bundled_cases", "KINDS"]

KINDS = ("channel2d", "pipe3d", "cavity2d", "cylinder2d", "mms")

_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
          "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh,
          "cosh": np.cosh, "log": np.log}
_CONSTS = {"pi": math.pi, "e": math.e}
_VARS = ("x", "y", "z", "t")
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name,
          ast.Load, ast.Call, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow,
          ast.USub, ast.UAdd)


class Expression:
    """Restricted arithmetic expression, evaluated on point arrays."""

    def __init__(self, text):
        self.text = str(text)
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise InvalidArgument(f"cannot parse {self.text!r}: {exc.msg}") \
                from None
        for node in ast.walk(tree):
            if not isinstance(node, _NODES):
                raise InvalidArgument(f"{type(node).__name__} not allowed in "
                                      f"{self.text!r}")
            if isinstance(node, ast.Constant) and not isinstance(
                    node.value, (int, float)):
                raise InvalidArgument(f"non-numeric constant in {self.text!r}")
            if isinstance(node, ast.Call):
                if (not isinstance(node.func, ast.Name)
                        or node.func.id not in _FUNCS or node.keywords
                        or len(node.args) != 1):
                    raise InvalidArgument(f"unsupported call in {self.text!r}")
            elif isinstance(node, ast.Name) and node.id not in _FUNCS:
                if node.id not in _VARS and node.id not in _CONSTS:
                    raise InvalidArgument(f"unknown name {node.id!r} in "
                                          f"{self.text!r}")
        self.names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        self._code = compile(tree, "<case expression>", "eval")

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        env = dict(_FUNCS)
        env.update(_CONSTS)
        zero = np.zeros(x.shape[:-1])
        for k, name in enumerate(_VARS[:3]):
            env[name] = x[..., k] if k < x.shape[-1] else zero
        env["t"] = float(t)
        with np.errstate(all="ignore"):
            out = eval(self._code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), zero.shape)

    def __repr__(self):
        return f"Expression({self.text!r})"


def _value(raw, path, problems):
    if isinstance(raw, bool):
        problems.append(f"{path}: expected number or expression")
        return 0.0
    if isinstance(raw, (int, float)):
        return float(raw)
    if isinstance(raw, str):
        try:
            return Expression(raw)
        except InvalidArgument as exc:
            problems.append(f"{path}: {exc}")
            return 0.0
    problems.append(f"{path}: expected number or expression")
    return 0.0


def _bc_callable(v):
    if isinstance(v, Expression):
        return lambda x, t, _e=v: _e(x, t)
    return v


@dataclass
class CaseConfig:
    name: str
    kind: str
    mesh: dict
    material: MaterialParams
    bcs: list
    solver: SolverConfig
    outputs: dict = field(default_factory=dict)
    oracle: Optional[dict] = None
    path: Optional[str] = None
    raw: dict = field(default_factory=dict)
    manufactured: object = None
    warnings: list = field(default_factory=list)

    @property
    def base_dir(self):
        return os.path.dirname(os.path.abspath(self.path)) if self.path else "."

    def with_solver(self, **changes):
        """Copy with some solver settings replaced."""
        from dataclasses import replace
        return replace(self, solver=replace(self.solver, **changes))

    def with_material(self, **changes):
        from dataclasses import replace
        return replace(self, material=replace(self.material, **changes))

    def with_mesh(self, **changes):
        from dataclasses import replace
        return replace(self, mesh={**self.mesh, **changes})


_TOP = {"name", "kind", "description", "units", "mesh", "material", "bcs",
        "solver", "outputs", "oracle"}
_MESH = {"rect": {"generator", "nx", "ny", "lx", "ly", "origin"},
         "pipe": {"generator", "n_axial", "n_radial", "length", "diameter"}}
_SOLVER = {"dt", "t_end", "newton_tol", "newton_max_iter", "linear_solver",
           "linear_tol", "ramp", "pressure_gauge"}
_OUTPUTS = {"vtk_every", "probes", "forces", "snapshot_every"}
_ORACLES = {"plane_poiseuille": {"H", "dpdx"},
            "pipe": {"diameter", "length", "dpdz", "transient"},
            "ghia": {"re", "lid_speed", "side"},
            "mms": {"velocity", "pressure"}}


def _keys(d, allowed, path, problems):
    if not isinstance(d, dict):
        problems.append(f"{path}: expected an object")
        return False
    for k in d:
        if not k.startswith("_") and k not in allowed:
            problems.append(f"{path}.{k}: unknown key")
    return True


def _need(d, key, path, problems, kind=(int, float)):
    if key not in d:
        problems.append(f"{path}.{key}: missing")
        return None
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, kind):
        problems.append(f"{path}.{key}: wrong type {type(v).__name__}")
        return None
    return v


def _positive(d, key, path, problems, integer=False):
    v = _need(d, key, path, problems, int if integer else (int, float))
    if v is not None and not v > 0:
        problems.append(f"{path}.{key}: must be positive")
        return None
    return v


def _check_mesh(m, problems):
    if not _keys(m, set().union(*_MESH.values(), {"file"}), "mesh", problems):
        return
    if "file" in m:
        if not isinstance(m["file"], str):
            problems.append("mesh.file: expected a path string")
        return
    gen = m.get("generator")
    if gen not in _MESH:
        problems.append(f"mesh.generator: expected one of {sorted(_MESH)} "
                        "or a 'file' entry")
        return
    for k in m:
        if not k.startswith("_") and k not in _MESH[gen] and k != "file":
            problems.append(f"mesh.{k}: not a parameter of '{gen}'")
    if gen == "rect":
        for k in ("nx", "ny"):
            _positive(m, k, "mesh", problems, integer=True)
        for k in ("lx", "ly"):
            _positive(m, k, "mesh", problems)
    else:
        for k in ("n_axial", "n_radial"):
            _positive(m, k, "mesh", problems, integer=True)
        for k in ("length", "diameter"):
            _positive(m, k, "mesh", problems)


def resolve_path(path, base_dir):
    """Resolve a mesh path relative to the case file, then package data."""
    if os.path.isabs(path):
        return path
    local = os.path.normpath(os.path.join(base_dir, path))
    if os.path.exists(local):
        return local
    data = resources.files("p1flow") / "data"
    cand = os.path.normpath(os.path.join(str(data), path))
    if os.path.exists(cand):
        return cand
    stripped = path
    while stripped.startswith("../"):
        stripped = stripped[3:]
    cand = os.path.normpath(os.path.join(str(data), stripped))
    return cand if os.path.exists(cand) else local


def build_mesh(mesh_cfg, base_dir=".", refine=1):
    """Mesh from a case ``mesh`` block; generators scale their cell counts
    by ``refine``."""
    if "file" in mesh_cfg:
        if refine != 1:
            raise InvalidArgument("file meshes cannot be refined")
        path = resolve_path(mesh_cfg["file"], base_dir)
        if not os.path.exists(path):
            raise FileNotFoundError(f"mesh file not found: {mesh_cfg['file']}")
        return read_msh2(path)
    if mesh_cfg["generator"] == "rect":
        return gen_rect(int(mesh_cfg["nx"] * refine),
                        int(mesh_cfg["ny"] * refine),
                        mesh_cfg["lx"], mesh_cfg["ly"],
                        origin=tuple(mesh_cfg.get("origin", (0.0, 0.0))))
    return gen_pipe(int(mesh_cfg["n_axial"] * refine),
                    int(mesh_cfg["n_radial"] * refine),
                    mesh_cfg["length"], mesh_cfg["diameter"])


def _mesh_dim(m):
    if "file" in m:
        return None
    return 2 if m.get("generator") == "rect" else 3


_COMP = {"x": 0, "y": 1, "z": 2}


def _parse_bcs(raw, dim, manufactured, problems):
    out = []
    if not isinstance(raw, list):
        problems.append("bcs: expected a list")
        return out
    for i, b in enumerate(raw):
        path = f"bcs[{i}]"
        if not _keys(b, {"tag", "kind", "component", "value", "ramped",
                         "priority"}, path, problems):
            continue
        tag = b.get("tag")
        if not isinstance(tag, (str, int)) or isinstance(tag, bool):
            problems.append(f"{path}.tag: missing or not a name/id")
            continue
        kind = b.get("kind")
        prio = b.get("priority", 0)
        if not isinstance(prio, int) or isinstance(prio, bool):
            problems.append(f"{path}.priority: expected an integer")
            prio = 0
        ramped = bool(b.get("ramped", False))
        if kind == "no_slip":
            if dim is None:
                problems.append(f"{path}: no_slip needs a known dimension; "
                                "list components explicitly")
                continue
            out += [BoundaryCondition(tag, "velocity", 0.0, component=k,
                                      priority=prio) for k in range(dim)]
            continue
        if kind not in ("velocity", "pressure"):
            problems.append(f"{path}.kind: expected velocity, pressure or "
                            "no_slip")
            continue
        comp = None
        if kind == "velocity":
            comp = b.get("component")
            comp = _COMP.get(comp, comp)
            if not isinstance(comp, int) or isinstance(comp, bool) or not (
                    0 <= comp < (dim or 3)):
                problems.append(f"{path}.component: expected 0..{(dim or 3) - 1}"
                                " or x/y/z")
                continue
        raw_v = b.get("value", 0.0)
        if raw_v == "exact":
            if manufactured is None:
                problems.append(f"{path}.value: 'exact' needs an mms oracle")
                continue
            if kind == "velocity":
                value = (lambda x, t, _k=comp, _m=manufactured:
                         _m.velocity(x, t)[..., _k])
            else:
                value = (lambda x, t, _m=manufactured: _m.pressure(x, t))
        else:
            value = _bc_callable(_value(raw_v, f"{path}.value", problems))
        out.append(BoundaryCondition(tag, kind, value, component=comp,
                                     ramped=ramped, priority=prio))
    return out


def _parse_solver(s, problems):
    if not _keys(s, _SOLVER, "solver", problems):
        return None
    dt = _positive(s, "dt", "solver", problems)
    t_end = _positive(s, "t_end", "solver", problems)
    ramp = s.get("ramp")
    if ramp is not None:
        if isinstance(ramp, bool) or not isinstance(ramp, (int, float)) \
                or ramp <= 0:
            problems.append("solver.ramp: expected a positive ramp time or null")
            ramp = None
        else:
            ramp = Ramp(float(ramp))
    gauge = s.get("pressure_gauge", "auto")
    if gauge is not None and gauge != "auto" and not (
            isinstance(gauge, int) and not isinstance(gauge, bool)):
        problems.append("solver.pressure_gauge: expected 'auto', null or a "
                        "node index")
        gauge = "auto"
    if dt is None or t_end is None:
        return None
    if t_end < dt:
        problems.append("solver.t_end: shorter than one time step")
    elif abs(t_end / dt - round(t_end / dt)) > 1e-9 * t_end / dt:
        problems.append("solver.t_end: not a whole number of time steps")
    try:
        return SolverConfig(
            dt=float(dt), t_end=float(t_end),
            newton_tol=s.get("newton_tol"),
            newton_max_iter=int(s.get("newton_max_iter", 25)),
            linear_solver=s.get("linear_solver", "lu"),
            linear_tol=float(s.get("linear_tol", 1e-10)),
            ramp=ramp, pressure_gauge=gauge)
    except (InvalidArgument, TypeError, ValueError) as exc:
        problems.append(f"solver: {exc}")
        return None


def _parse_outputs(o, problems):
    if o is None:
        return {}
    if not _keys(o, _OUTPUTS, "outputs", problems):
        return {}
    for k in ("vtk_every", "snapshot_every"):
        if k in o and (not isinstance(o[k], int) or isinstance(o[k], bool)
                       or o[k] < 0):
            problems.append(f"outputs.{k}: expected a non-negative integer")
    for i, p in enumerate(o.get("probes", [])):
        path = f"outputs.probes[{i}]"
        if _keys(p, {"name", "point", "field"}, path, problems):
            if not isinstance(p.get("name"), str):
                problems.append(f"{path}.name: missing")
            pt = p.get("point")
            if not (isinstance(pt, list) and len(pt) in (2, 3)
                    and all(isinstance(c, (int, float)) for c in pt)):
                problems.append(f"{path}.point: expected 2 or 3 numbers")
    f = o.get("forces")
    if f is not None and _keys(f, {"obstacle", "v_mean", "ell"},
                               "outputs.forces", problems):
        if not isinstance(f.get("obstacle"), (str, int)):
            problems.append("outputs.forces.obstacle: missing")
        _positive(f, "v_mean", "outputs.forces", problems)
        _positive(f, "ell", "outputs.forces", problems)
    return dict(o)


def _parse_oracle(o, problems):
    if o is None:
        return None
    if not isinstance(o, dict) or o.get("type") not in _ORACLES:
        problems.append(f"oracle.type: expected one of {sorted(_ORACLES)}")
        return None
    _keys(o, _ORACLES[o["type"]] | {"type"}, "oracle", problems)
    typ = o["type"]
    if typ == "plane_poiseuille":
        _positive(o, "H", "oracle", problems)
        _need(o, "dpdx", "oracle", problems)
    elif typ == "pipe":
        _positive(o, "diameter", "oracle", problems)
        _positive(o, "length", "oracle", problems)
        _need(o, "dpdz", "oracle", problems)
    elif typ == "ghia":
        re = _need(o, "re", "oracle", problems)
        if re is not None and re not in (100, 400, 1000):
            problems.append("oracle.re: reference tables exist for 100, 400 "
                            "and 1000")
    elif typ == "mms":
        if not isinstance(o.get("velocity"), list):
            problems.append("oracle.velocity: expected a list of expressions")
        if not isinstance(o.get("pressure"), str):
            problems.append("oracle.pressure: expected an expression")
    return dict(o)


def _unit_warnings(case):
    out = []
    prm = case.material
    ratio = prm.lam / prm.mu
    if ratio > 1e5:
        out.append(f"lam/mu = {ratio:.3g}: very large volume viscosity may "
                   "lock the velocity")
    if prm.lam == 0:
        out.append("lam = 0: divergence is controlled only weakly")
    units = case.raw.get("units")
    if units == "g-mm-s" and prm.rho > 1e-2:
        out.append(f"rho = {prm.rho} looks like SI, case declares g-mm-s")
    if units == "SI" and prm.rho < 1e-2:
        out.append(f"rho = {prm.rho} looks like g/mm^3, case declares SI")
    return out


def parse_case(data, path=None):
    """Validate a decoded case and build solver inputs.

    Raises :class:`ConfigError` listing every problem found.
    """
    problems = []
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected an object"])
    _keys(data, _TOP, "case", problems)
    kind = data.get("kind")
    if kind not in KINDS:
        problems.append(f"case.kind: expected one of {list(KINDS)}")
    name = data.get("name") or (os.path.splitext(os.path.basename(path))[0]
                               if path else "case")
    mesh_cfg = data.get("mesh")
    if mesh_cfg is None:
        problems.append("case.mesh: missing")
        mesh_cfg = {}
    else:
        _check_mesh(mesh_cfg, problems)
    dim = _mesh_dim(mesh_cfg) or (2 if kind in ("channel2d", "cavity2d",
                                                "cylinder2d", "mms") else 3)

    oracle = _parse_oracle(data.get("oracle"), problems)
    mat = data.get("material")
    material = None
    manufactured = None
    if _keys(mat, {"rho", "mu", "lam", "g"}, "material", problems):
        rho = _positive(mat, "rho", "material", problems)
        mu = _positive(mat, "mu", "material", problems)
        lam = mat.get("lam", 0.0)
        if isinstance(lam, bool) or not isinstance(lam, (int, float)) \
                or lam < 0:
            problems.append("material.lam: expected a non-negative number")
            lam = 0.0
        g = mat.get("g")
        if rho is not None and mu is not None:
            base = MaterialParams(float(rho), float(mu), float(lam))
            if oracle is not None and oracle["type"] == "mms" and not any(
                    p.startswith("oracle.") for p in problems):
                try:
                    manufactured = mms_forcing(oracle["velocity"],
                                               oracle["pressure"], base, dim)
                except Exception as exc:  # sympy raises a zoo of types
                    problems.append(f"oracle: {exc}")
                if g is not None:
                    problems.append("material.g: an mms case derives its "
                                    "body force from the oracle")
                gval = manufactured.forcing if manufactured else None
            elif g is None:
                gval = None
            elif isinstance(g, list) and len(g) == dim:
                comps = [_value(c, f"material.g[{k}]", problems)
                         for k, c in enumerate(g)]
                if all(isinstance(c, float) for c in comps):
                    gval = tuple(comps)
                else:
                    def gval(x, t, _c=comps):
                        x = np.asarray(x, dtype=float)
                        return np.stack([np.broadcast_to(
                            c(x, t) if isinstance(c, Expression) else c,
                            x.shape[:-1]) for c in _c], axis=-1)
            else:
                problems.append(f"material.g: expected {dim} components")
                gval = None
            material = MaterialParams(base.rho, base.mu, base.lam, g=gval)
    bcs = _parse_bcs(data.get("bcs", []), dim, manufactured, problems)
    solver = None
    if "solver" not in data:
        problems.append("case.solver: missing")
    else:
        solver = _parse_solver(data["solver"], problems)
    outputs = _parse_outputs(data.get("outputs"), problems)
    if problems:
        raise ConfigError(problems)
    case = CaseConfig(name=name, kind=kind, mesh=mesh_cfg, material=material,
                      bcs=bcs, solver=solver, outputs=outputs, oracle=oracle,
                      path=path, raw=data, manufactured=manufactured)
    case.warnings = _unit_warnings(case)
    return case


def load_case(path):
    """Read and validate a JSON case file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) \
            from None
    return parse_case(data, path=path)


def bundled_cases():
    """Names of the case files shipped with the package."""
    root = resources.files("p1flow") / "data" / "cases"
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".json"))


def bundled_case(name):
    """Path of a bundled case file."""
    path = resources.files("p1flow") / "data" / "cases" / f"{name}.json"
    if not path.is_file():
        raise InvalidArgument(f"no bundled case {name!r}")
    return str(path)
