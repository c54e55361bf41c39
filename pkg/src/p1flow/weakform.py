"""Residual and Jacobian kernels of the summed three-part weak form.

Per cell, with P1 basis functions ``phi_a`` (constant gradients ``G_a``) and
backward-Euler time discretisation, the rows tested by the pressure basis
collect

    mass:         int div(v) phi_a
    momentum/G:   int [(v - v0) - dt g + dt conv + (dt/rho) grad p
                       - (dt/rho) div tau] . G_a

and the rows tested by the velocity basis (component j)

    momentum:     int [rho (v_j - v0_j)/dt - rho g_j + rho conv_j
                       + p_{,j}] phi_a + int tau_ij G_a,i

with ``conv_j = (v_i v_j)_{,i} = div(v) v_j + v_i v_{j,i}`` and
``tau = lam tr(d) I + 2 mu d``. Only the viscous stress is integrated by
parts; no boundary integrals are assembled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgument

__all__ = ["MaterialParams", "FieldState", "deviatoric_stress",
           "element_residual", "element_jacobian", "cell_kernels",
           "body_force_at", "mms_forcing", "ManufacturedSolution"]

BodyForce = Union[None, Sequence[float], Callable]


@dataclass(frozen=True)
class MaterialParams:
    """Density, shear viscosity, volume viscosity and body force.

    ``g`` may be ``None`` (no body force), a constant vector, or a callable
    ``g(x, t)`` mapping points of shape ``(..., dim)`` to ``(..., dim)``.
    """

    rho: float
    mu: float
    lam: float = 0.0
    g: BodyForce = None

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidArgument(f"rho must be positive, got {self.rho}")
        if not self.mu > 0:
            raise InvalidArgument(f"mu must be positive, got {self.mu}")
        if not self.lam >= 0:
            raise InvalidArgument(f"lam must be non-negative, got {self.lam}")

    @property
    def nu(self):
        return self.mu / self.rho


@dataclass
class FieldState:
    """Monolithic nodal vector ``(p, v_1, .., v_dim)`` per node at ``time``."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("state contains non-finite entries")

    def copy(self):
        return FieldState(self.values.copy(), self.time)


def deviatoric_stress(grad_v, params):
    """``tau = lam tr(d) I + 2 mu d`` with ``d = sym(grad_v)``."""
    grad_v = np.asarray(grad_v, dtype=float)
    d = 0.5 * (grad_v + np.swapaxes(grad_v, -1, -2))
    tr = np.trace(d, axis1=-2, axis2=-1)[..., None, None]
    eye = np.eye(grad_v.shape[-1])
    return params.lam * tr * eye + 2.0 * params.mu * d


def body_force_at(g, points, t):
    """Evaluate a body-force spec at ``points`` (..., dim)."""
    points = np.asarray(points, dtype=float)
    if g is None:
        return np.zeros_like(points)
    if callable(g):
        out = np.asarray(g(points, t), dtype=float)
        return np.broadcast_to(out, points.shape)
    return np.broadcast_to(np.asarray(g, dtype=float), points.shape)


def _stress_divergence(v, grads):
    """Cellwise ``tau_{ij,i}``.

    Needs second derivatives of the velocity basis, which vanish for
    linear elements; the term stays in the momentum/G rows so that a
    higher-order basis only has to supply its Hessians here.
    """
    return np.zeros(v.shape[:1] + v.shape[2:])


def cell_kernels(vol, grads, Pe, P0e, params, dt, quad, gq=None,
                 jacobian=True):
    """Batched local residuals and Jacobians.

    Parameters
    ----------
    vol : (nc,) cell measures
    grads : (nc, nl, dim) P1 gradients
    Pe, P0e : (nc, nl, 1+dim) current and previous local values
    gq : (nc, nq, dim) body force at the quadrature points, or None
    jacobian : also return the local Jacobians

    Returns
    -------
    res : (nc, nl, 1+dim)
    jac : (nc, nl, 1+dim, nl, 1+dim) or None
    """
    if not dt > 0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    rho, mu, lam = params.rho, params.mu, params.lam
    nc, nl, dim = grads.shape
    G = grads
    N = quad.points
    W = vol[:, None] * (quad.weights * math.factorial(dim))[None, :]

    p = Pe[..., 0]
    v = Pe[..., 1:]
    v0 = P0e[..., 1:]
    L = np.einsum("caj,cai->cji", v, G)          # L[j, i] = dv_j/dx_i
    div = np.trace(L, axis1=1, axis2=2)
    gp = np.einsum("ca,cai->ci", p, G)
    vq = np.einsum("qa,caj->cqj", N, v)
    dvq = vq - np.einsum("qa,caj->cqj", N, v0)
    conv = div[:, None, None] * vq + np.einsum("cji,cqi->cqj", L, vq)
    tau = lam * div[:, None, None] * np.eye(dim) + mu * (
        L + np.swapaxes(L, 1, 2))
    div_tau = _stress_divergence(v, G)
    if gq is None:
        gq = 0.0

    res = np.empty((nc, nl, 1 + dim))
    mom = rho * dvq / dt - rho * gq + rho * conv + gp[:, None, :]
    res[..., 1:] = (np.einsum("cq,qa,cqj->caj", W, N, mom)
                    + vol[:, None, None] * np.einsum("cij,cai->caj", tau, G))
    f3 = dvq - dt * gq + dt * conv + (dt / rho) * (gp - div_tau)[:, None, :]
    m = np.einsum("cq,qa->ca", W, N)            # int phi_a
    res[..., 0] = m * div[:, None] + np.einsum("cq,cqj,caj->ca", W, f3, G)
    if not jacobian:
        return res, None

    M = np.einsum("cq,qa,qb->cab", W, N, N)     # int phi_a phi_b
    Mv = np.einsum("cq,qa,cqj->caj", W, N, vq)  # int phi_a v_j
    Vint = np.einsum("cq,cqj->cj", W, vq)       # int v_j
    GG = np.einsum("cai,cbi->cab", G, G)
    eye = np.eye(dim)

    jac = np.zeros((nc, nl, 1 + dim, nl, 1 + dim))
    # velocity rows / velocity columns
    GbMv = np.einsum("cbi,cai->cab", G, Mv)
    diag = (rho / dt + rho * div[:, None, None]) * M + rho * GbMv
    jvv = (diag[:, :, None, :, None] * eye[None, None, :, None, :]
           + rho * np.einsum("cbk,caj->cajbk", G, Mv)
           + rho * np.einsum("cab,cjk->cajbk", M, L)
           + vol[:, None, None, None, None] * (
               lam * np.einsum("caj,cbk->cajbk", G, G)
               + mu * GG[:, :, None, :, None] * eye[None, None, :, None, :]
               + mu * np.einsum("cak,cbj->cajbk", G, G)))
    jac[:, :, 1:, :, 1:] = jvv
    # velocity rows / pressure columns
    jac[:, :, 1:, :, 0] = np.einsum("ca,cbj->cajb", m, G)
    # pressure rows / pressure columns
    jac[:, :, 0, :, 0] = (dt / rho) * vol[:, None, None] * GG
    # pressure rows / velocity columns
    GaV = np.einsum("caj,cj->ca", G, Vint)
    GbV = np.einsum("cbj,cj->cb", G, Vint)
    GaL = np.einsum("caj,cjk->cak", G, L)
    jpv = (np.einsum("ca,cbk->cabk", m, G)
           + np.einsum("cb,cak->cabk", m, G)
           + dt * (np.einsum("cbk,ca->cabk", G, GaV)
                   + np.einsum("cak,cb->cabk",
                               G, div[:, None] * m + GbV)
                   + np.einsum("cb,cak->cabk", m, GaL)))
    jac[:, :, 0, :, 1:] = jpv
    return res, jac


def _quad_points(coords, quad):
    return np.einsum("qa,...ai->...qi", quad.points, coords)


def _local(geom, quad, P_e, P0_e, params, dt, t, jacobian):
    dim = geom.grad_phi.shape[1]
    nl, nf = dim + 1, dim + 1
    Pe = np.asarray(P_e, dtype=float).reshape(1, nl, nf)
    P0e = np.asarray(P0_e, dtype=float).reshape(1, nl, nf)
    gq = None
    if params.g is not None:
        gq = body_force_at(params.g, _quad_points(geom.coords, quad), t)[None]
    return cell_kernels(np.array([geom.volume]), geom.grad_phi[None], Pe, P0e,
                        params, dt, quad, gq=gq, jacobian=jacobian)


def element_residual(geom, quad, P_e, P0_e, params, dt, t=0.0):
    """Local residual of one cell, node-major ``(p, v_1, ..)`` per node."""
    res, _ = _local(geom, quad, P_e, P0_e, params, dt, t, jacobian=False)
    return res.reshape(-1)


def element_jacobian(geom, quad, P_e, P0_e, params, dt, t=0.0):
    """Exact derivative of :func:`element_residual` w.r.t. ``P_e``."""
    _, jac = _local(geom, quad, P_e, P0_e, params, dt, t, jacobian=True)
    n = jac.shape[1] * jac.shape[2]
    return jac.reshape(n, n)


# ------------------------------------------------------- manufactured data

@dataclass
class ManufacturedSolution:
    """Callables ``v(x, t)``, ``p(x, t)``, ``g(x, t)`` on point arrays."""

    velocity: Callable
    pressure: Callable
    forcing: Callable
    dim: int


def _lambdify_vector(exprs, args):
    import sympy

    fns = [sympy.lambdify(args, e, "numpy") for e in exprs]

    def evaluate(x, t):
        x = np.asarray(x, dtype=float)
        coords = [x[..., i] for i in range(x.shape[-1])]
        out = [np.broadcast_to(np.asarray(f(*coords, t), dtype=float),
                               x.shape[:-1]) for f in fns]
        return np.stack(out, axis=-1)

    return evaluate


def mms_forcing(velocity, pressure, params, dim=None):
    """Body force making ``(velocity, pressure)`` an exact solution.

    ``velocity`` is a sequence of sympy expressions (or strings) in the
    coordinates ``x, y[, z]`` and time ``t``; ``pressure`` a scalar one.
    Returns a :class:`ManufacturedSolution` whose ``forcing`` satisfies

        g_j = dv_j/dt + (v_i v_j)_{,i} - (1/rho) (-p delta_ij + tau_ij)_{,i}
    """
    import sympy

    dim = dim or len(velocity)
    if len(velocity) != dim or dim not in (2, 3):
        raise InvalidArgument("velocity must have 2 or 3 components")
    xs = sympy.symbols("x y z")[:dim]
    t = sympy.Symbol("t")
    local = {str(s): s for s in xs} | {"t": t}
    v = [sympy.sympify(e, locals=local) for e in velocity]
    p = sympy.sympify(pressure, locals=local)
    div = sympy.simplify(sum(sympy.diff(v[i], xs[i]) for i in range(dim)))
    if div != 0:
        raise InvalidArgument(f"manufactured velocity is not divergence-free: "
                              f"div v = {div}")
    rho, mu, lam = (sympy.nsimplify(params.rho), sympy.nsimplify(params.mu),
                    sympy.nsimplify(params.lam))
    grad = sympy.Matrix(dim, dim, lambda j, i: sympy.diff(v[j], xs[i]))
    d = (grad + grad.T) / 2
    tau = lam * d.trace() * sympy.eye(dim) + 2 * mu * d
    sigma = -p * sympy.eye(dim) + tau
    g = []
    for j in range(dim):
        expr = sympy.diff(v[j], t)
        expr += sum(sympy.diff(v[i] * v[j], xs[i]) for i in range(dim))
        expr -= sum(sympy.diff(sigma[i, j], xs[i]) for i in range(dim)) / rho
        g.append(sympy.simplify(expr))
    args = (*xs, t)
    return ManufacturedSolution(
        velocity=_lambdify_vector(v, args),
        pressure=lambda x, tt, _f=_lambdify_vector([p], args): _f(x, tt)[..., 0],
        forcing=_lambdify_vector(g, args),
        dim=dim,
    )
