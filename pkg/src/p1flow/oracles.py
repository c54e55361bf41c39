"""Reference solutions for pipe and channel flow and the Bessel functions
they need.

``bessel_j`` is self-contained: power series below x = 8, Miller's
backward recurrence up to x = 25 and the Hankel asymptotic expansion
beyond. Absolute error is below 1e-10 on [0, 200].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, OutOfDomain
from .weakform import MaterialParams

__all__ = ["bessel_j", "BesselTable", "j0_roots", "PipeSpec", "pipe_steady",
           "pipe_transient", "plane_poiseuille", "reynolds_pipe",
           "pipe_dpdz_for_reynolds"]

_SERIES_MAX = 8.0
_MILLER_MAX = 25.0


def _series(n, x):
    half = 0.25 * x * x
    term = (0.5 * x) ** n / math.factorial(n)
    total = term.copy()
    for k in range(1, 60):
        term = -term * half / (k * (k + n))
        total += term
        if np.all(np.abs(term) < 1e-17 * np.maximum(np.abs(total), 1e-300)):
            break
    return total


def _miller(n, x):
    # start well above x so the recurrence is dominated by J_k
    xm = float(np.max(x))
    top = int(xm + 30 + 2 * math.sqrt(40 * xm))
    top += top % 2
    jp1 = np.zeros_like(x)
    jk = np.full_like(x, 1e-30)
    norm = np.zeros_like(x)
    j1 = None
    for k in range(top, 0, -1):
        jk, jp1 = (2.0 * k / x) * jk - jp1, jk
        # jk now holds J_{k-1}
        if k - 1 == 1:
            j1 = jk.copy()
        elif k - 1 > 0 and (k - 1) % 2 == 0:
            norm += 2.0 * jk
    norm += jk
    return (jk if n == 0 else j1) / norm


def _hankel(n, x):
    mu = 4.0 * n * n
    p = np.ones_like(x)
    q = np.zeros_like(x)
    coeff = 1.0
    for k in range(1, 30):
        coeff = coeff * (mu - (2 * k - 1) ** 2) / (k * 8.0)
        term = coeff / x ** k
        if k % 2:
            q += term * (-1) ** ((k - 1) // 2)
        else:
            p += term * (-1) ** (k // 2)
        if np.all(np.abs(term) < 1e-17):
            break
    chi = x - (0.5 * n + 0.25) * math.pi
    return np.sqrt(2.0 / (math.pi * x)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j(order, x):
    """Bessel function of the first kind, order 0 or 1, for ``x >= 0``."""
    if order not in (0, 1):
        raise InvalidArgument(f"order must be 0 or 1, got {order}")
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or not np.all(np.isfinite(xa)):
        raise InvalidArgument("bessel_j needs finite x >= 0")
    flat = np.atleast_1d(xa).ravel()
    out = np.empty_like(flat)
    lo = flat < _SERIES_MAX
    mid = ~lo & (flat <= _MILLER_MAX)
    hi = flat > _MILLER_MAX
    if lo.any():
        out[lo] = _series(order, flat[lo])
    if mid.any():
        out[mid] = _miller(order, flat[mid])
    if hi.any():
        out[hi] = _hankel(order, flat[hi])
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


@dataclass(frozen=True)
class BesselTable:
    """First positive zeros of J0 together with J1 at those zeros."""

    roots: np.ndarray
    j1_at_roots: np.ndarray

    def __len__(self):
        return len(self.roots)


def j0_roots(n, tol=1e-13):
    """First ``n`` positive zeros of J0 by bracketing and bisection."""
    if int(n) != n or n < 1:
        raise InvalidArgument(f"need a positive root count, got {n}")
    guess = (np.arange(1, int(n) + 1) - 0.25) * math.pi
    lo, hi = guess - 0.5, guess + 0.5
    flo = bessel_j(0, lo)
    if np.any(flo * bessel_j(0, hi) > 0):
        raise ArithmeticError("J0 root bracket without sign change")
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        fm = bessel_j(0, mid)
        left = flo * fm <= 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    roots = 0.5 * (lo + hi)
    return BesselTable(roots=roots, j1_at_roots=bessel_j(1, roots))


@dataclass(frozen=True)
class PipeSpec:
    """Straight circular pipe of radius ``a`` and length ``L`` driven by a
    constant axial pressure gradient ``dpdz``."""

    a: float
    L: float
    dpdz: float
    params: MaterialParams

    def __post_init__(self):
        if not (self.a > 0 and self.L > 0):
            raise InvalidArgument("pipe radius and length must be positive")

    @property
    def vmax(self):
        return -self.dpdz * self.a ** 2 / (4 * self.params.mu)

    def tau(self, t):
        """Dimensionless time ``t mu / (rho a^2)``."""
        return np.asarray(t) * self.params.mu / (self.params.rho * self.a ** 2)


def _radius(r, a):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > a * (1 + 1e-12)):
        raise OutOfDomain(f"radius outside [0, {a}]")
    return np.minimum(r, a)


def pipe_steady(r, spec):
    """Parabolic axial velocity of fully developed pipe flow."""
    r = _radius(r, spec.a)
    return spec.vmax * (1 - (r / spec.a) ** 2)


_DEFAULT_TABLE = None


def pipe_transient(r, t, spec, table=None):
    """Axial velocity of start-up flow from rest, truncated Bessel series."""
    global _DEFAULT_TABLE
    if table is None:
        if _DEFAULT_TABLE is None:
            _DEFAULT_TABLE = j0_roots(50)
        table = _DEFAULT_TABLE
    r = _radius(r, spec.a)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidArgument("time must be non-negative")
    lam = table.roots
    s = r[..., None] / spec.a
    tau = spec.tau(t)[..., None]
    terms = (8 * bessel_j(0, lam * s) / (lam ** 3 * table.j1_at_roots)
             * np.exp(-lam ** 2 * tau))
    return spec.vmax * (1 - (r / spec.a) ** 2 - terms.sum(axis=-1))


def plane_poiseuille(y, H, dpdx, mu):
    """Streamwise velocity between plates at ``y = 0`` and ``y = H``."""
    y = np.asarray(y, dtype=float)
    if np.any(y < -1e-12 * H) or np.any(y > H * (1 + 1e-12)):
        raise OutOfDomain(f"y outside [0, {H}]")
    y = np.clip(y, 0.0, H)
    return -dpdx / (2 * mu) * y * (H - y)


def reynolds_pipe(vz_max, D, params):
    """Reynolds number built on the centreline velocity and the radius."""
    if not (vz_max > 0 and D > 0):
        raise InvalidArgument("vz_max and D must be positive")
    return vz_max * D * params.rho / (2 * params.mu)


def pipe_dpdz_for_reynolds(re, D, params):
    """Axial pressure gradient giving Reynolds number ``re``."""
    vmax = re * 2 * params.mu / (D * params.rho)
    return -4 * params.mu * vmax / (D / 2) ** 2
