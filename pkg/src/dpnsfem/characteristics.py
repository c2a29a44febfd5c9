"""Semi-Lagrangian transport of the conduit velocity.

Each evaluation point x is backtracked one step along the current velocity,
foot = x - u(x)*dt (single-point backtracking, no midpoint iteration), and
the previous velocity is read at the foot.  Feet leaving the conduit -
through exterior walls or the interface - are pulled back to the boundary
intersection of the segment [x, foot] by bisection and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import FeSpaces, FieldHandle
from .mesh import CONDUIT, locate_points

_BISECT_STEPS = 60


@dataclass
class TracedValue:
    foot: np.ndarray
    value: np.ndarray
    clamped: bool


def trace_evaluate(spaces: FeSpaces, u_old: FieldHandle, x,
                   element_hint: int | None = None, dt: float = 0.0) -> TracedValue:
    """Transported velocity at a single conduit point (global-element hint)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    mesh = spaces.mesh
    mini = spaces.mini
    x = np.asarray(x, dtype=float)
    start = element_hint if element_hint is not None else mesh.tri_ids(CONDUIT)[0]
    tri, lam, ok = locate_points(mesh, CONDUIT, x[None, :], np.array([start]))
    if not ok[0]:
        raise ValueError("evaluation point is outside the conduit")
    u_here = mini.velocity_at(u_old.coeffs, mini.tri_g2l[tri], lam)[0]
    foot = x - dt * u_here
    ftri, flam, fok = locate_points(mesh, CONDUIT, foot[None, :], tri.copy())
    if fok[0]:
        val = mini.velocity_at(u_old.coeffs, mini.tri_g2l[ftri], flam)[0]
        return TracedValue(foot=foot, value=val, clamped=False)
    foot, val = _clamp_evaluate(spaces, u_old.coeffs, x, foot, int(tri[0]))
    return TracedValue(foot=foot, value=val, clamped=True)


def _clamp_evaluate(spaces: FeSpaces, coeffs: np.ndarray, x: np.ndarray,
                    foot: np.ndarray, start_tri: int):
    """Bisect [x, foot] for the boundary crossing; evaluate just inside."""
    pts, vals = _clamp_batch(spaces, coeffs, x[None, :], foot[None, :],
                             np.array([start_tri]))
    return pts[0], vals[0]


def _clamp_batch(spaces: FeSpaces, coeffs: np.ndarray, pts: np.ndarray,
                 feet: np.ndarray, start_tris: np.ndarray):
    """Vectorized boundary-intersection clamp for a batch of exited feet.

    Walk failures during bisection count as outside: each probe sits within
    one step of a known-inside triangle, so a blocked walk cannot hide an
    interior point.
    """
    mesh = spaces.mesh
    mini = spaces.mini
    d = feet - pts
    lo = np.zeros(len(pts))
    hi = np.ones(len(pts))
    best_tri = np.asarray(start_tris, dtype=np.int64).copy()
    best_lam = mesh.barycentric(best_tri, pts)
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        p = pts + mid[:, None] * d
        t, lam, ok = locate_points(mesh, CONDUIT, p, best_tri,
                                   scan_fallback=False)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
        best_tri[ok] = t[ok]
        best_lam[ok] = lam[ok]
    vals = mini.velocity_at(coeffs, mini.tri_g2l[best_tri], best_lam)
    return pts + lo[:, None] * d, vals


def trace_quadrature_values(spaces: FeSpaces, u_old: FieldHandle,
                            qpts: np.ndarray, dt: float):
    """Transported velocity at all conduit quadrature points at once.

    qpts has shape (n_conduit_elems, n_q, 2) in local element order.
    Returns (values with the same leading shape plus a component axis,
    number of clamped feet).
    """
    mesh = spaces.mesh
    mini = spaces.mini
    n, q = qpts.shape[:2]
    pts = qpts.reshape(-1, 2)
    owners_local = np.repeat(np.arange(n), q)
    owners = mini.tri_ids[owners_local]
    lam = mesh.barycentric(owners, pts)
    u_here = mini.velocity_at(u_old.coeffs, owners_local, lam)
    feet = pts - dt * u_here

    tri, flam, ok = locate_points(mesh, CONDUIT, feet, owners.copy(),
                                  scan_fallback=False)
    vals = np.zeros_like(feet)
    vals[ok] = mini.velocity_at(u_old.coeffs, mini.tri_g2l[tri[ok]], flam[ok])
    out = np.flatnonzero(~ok)
    if len(out):
        _, vals[out] = _clamp_batch(spaces, u_old.coeffs, pts[out], feet[out],
                                    owners[out])
    return vals.reshape(n, q, 2), len(out)
