"""Manufactured-solution problem (stacked-squares geometry) and the wellbore
scenario definition.

The manufactured fields factor into x/y/t parts, so the forcing terms below
are hand-derived closed forms; the strong-residual finite-difference oracle
in the test suite pins them against the exact fields.  The matrix equation
carries an extra source f_m (zero in the physical model): the prescribed
matrix pressure does not satisfy the homogeneous matrix equation, and
without f_m the manufactured rates are unreachable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import PhysParams
from .mesh import BoundaryLabel, Example2Geometry

PI = np.pi


def _g(x):
    return 2.0 - PI * np.sin(PI * x)


def _dg(x):
    return -PI**2 * np.cos(PI * x)


def _ddg(x):
    return PI**3 * np.sin(PI * x)


def _w(y):
    return 1.0 - y - np.cos(PI * y)


def _dw(y):
    return -1.0 + PI * np.sin(PI * y)


def _ddw(y):
    return PI**2 * np.cos(PI * y)


def _m(y):
    # cos(pi*(1-y)) == -cos(pi*y)
    return -np.cos(PI * y)


def _dm(y):
    return PI * np.sin(PI * y)


def _ddm(y):
    return PI**2 * np.cos(PI * y)


@dataclass
class MmsProblem:
    """Closed-form exact solution with derived forcing and boundary data."""

    params: PhysParams
    t_final: float = 0.5

    # -- exact fields ------------------------------------------------------

    def exact_u_c(self, x, y, t):
        c = np.cos(t)
        u1 = (x**2 * (y - 1.0) ** 2 + y) * c
        u2 = (-(2.0 / 3.0) * x * (y - 1.0) ** 3 + _g(x)) * c
        return np.stack([u1, u2], axis=-1)

    def exact_grad_u_c(self, x, y, t):
        """Jacobian d u_i / d x_j, shape (..., 2, 2)."""
        c = np.cos(t)
        d11 = 2.0 * x * (y - 1.0) ** 2 * c
        d12 = (2.0 * x**2 * (y - 1.0) + 1.0) * c
        d21 = (-(2.0 / 3.0) * (y - 1.0) ** 3 + _dg(x)) * c
        d22 = -2.0 * x * (y - 1.0) ** 2 * c
        row1 = np.stack([d11, d12], axis=-1)
        row2 = np.stack([d21, d22], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def exact_p_c(self, x, y, t):
        return _g(x) * np.sin(0.5 * PI * y) * np.cos(t)

    def exact_phi_f(self, x, y, t):
        return _g(x) * _w(y) * np.cos(t)

    def exact_phi_m(self, x, y, t):
        return _g(x) * _m(y) * np.cos(t)

    def exact_u_f(self, x, y, t):
        k = self.params.k_f / self.params.mu
        c = np.cos(t)
        return np.stack([-k * _dg(x) * _w(y) * c, -k * _g(x) * _dw(y) * c], axis=-1)

    def exact_u_m(self, x, y, t):
        k = self.params.k_m / self.params.mu
        c = np.cos(t)
        return np.stack([-k * _dg(x) * _m(y) * c, -k * _g(x) * _dm(y) * c], axis=-1)

    # -- forcing -------------------------------------------------------------

    def f_c(self, x, y, t):
        p = self.params
        c, s = np.cos(t), np.sin(t)
        u1s = x**2 * (y - 1.0) ** 2 + y
        u2s = -(2.0 / 3.0) * x * (y - 1.0) ** 3 + _g(x)
        du1x = 2.0 * x * (y - 1.0) ** 2
        du1y = 2.0 * x**2 * (y - 1.0) + 1.0
        du2x = -(2.0 / 3.0) * (y - 1.0) ** 3 + _dg(x)
        du2y = -2.0 * x * (y - 1.0) ** 2
        lap1 = 2.0 * (y - 1.0) ** 2 + 2.0 * x**2
        lap2 = _ddg(x) - 4.0 * x * (y - 1.0)
        dpx = _dg(x) * np.sin(0.5 * PI * y)
        dpy = _g(x) * 0.5 * PI * np.cos(0.5 * PI * y)
        f1 = (-u1s * s - p.nu * lap1 * c + dpx * c
              + (u1s * du1x + u2s * du1y) * c * c)
        f2 = (-u2s * s - p.nu * lap2 * c + dpy * c
              + (u1s * du2x + u2s * du2y) * c * c)
        return np.stack([f1, f2], axis=-1)

    def f_d(self, x, y, t):
        p = self.params
        c, s = np.cos(t), np.sin(t)
        div_uf = -(p.k_f / p.mu) * (_ddg(x) * _w(y) + _g(x) * _ddw(y)) * c
        exch = (p.sigma * p.k_m / p.mu) * _g(x) * (_w(y) - _m(y)) * c
        return -p.eta_f * p.c_ft * _g(x) * _w(y) * s + div_uf + exch

    def f_m(self, x, y, t):
        p = self.params
        c, s = np.cos(t), np.sin(t)
        div_um = -(p.k_m / p.mu) * (_ddg(x) * _m(y) + _g(x) * _ddm(y)) * c
        exch = (p.sigma * p.k_m / p.mu) * _g(x) * (_m(y) - _w(y)) * c
        return -p.eta_m * p.c_mt * _g(x) * _m(y) * s + div_um + exch

    # -- data providers consumed by the stepper -----------------------------

    def conduit_dirichlet(self, x, y, t, label=None):
        return self.exact_u_c(x, y, t)

    def fracture_flux_data(self, x, y, t, label=None):
        return self.exact_u_f(x, y, t)

    def matrix_flux_data(self, x, y, t, label=None):
        return self.exact_u_m(x, y, t)

    def initial(self, name: str):
        t0 = 0.0
        return {
            "u_c": lambda x, y, t=t0: self.exact_u_c(x, y, t),
            "p_c": lambda x, y, t=t0: self.exact_p_c(x, y, t),
            "u_f": lambda x, y, t=t0: self.exact_u_f(x, y, t),
            "phi_f": lambda x, y, t=t0: self.exact_phi_f(x, y, t),
            "u_m": lambda x, y, t=t0: self.exact_u_m(x, y, t),
            "phi_m": lambda x, y, t=t0: self.exact_phi_m(x, y, t),
        }[name]

    has_exact = True


def example1_problem(gamma: float = 0.1, params: PhysParams | None = None,
                     t_final: float = 0.5) -> MmsProblem:
    """All-ones physical parameters, adjustable penalty."""
    if params is None:
        params = PhysParams(gamma=gamma)
    else:
        params = replace(params, gamma=gamma)
    return MmsProblem(params=params, t_final=t_final)


def mms_forcing(x, y, t, problem: MmsProblem | None = None):
    """Forcing triple (f_c, f_d, f_m) of the manufactured problem."""
    pb = problem or example1_problem()
    return pb.f_c(x, y, t), pb.f_d(x, y, t), pb.f_m(x, y, t)


def mms_boundary(x, y, t, label: BoundaryLabel, problem: MmsProblem | None = None):
    """Exact boundary datum: velocity trace on conduit walls, flux vector on
    the porous exterior.  The interface carries no data."""
    pb = problem or example1_problem()
    if label == BoundaryLabel.INTERFACE:
        raise ValueError("the interface is not a data boundary")
    if label in (BoundaryLabel.CONDUIT_EXTERIOR, BoundaryLabel.CONDUIT_INFLOW,
                 BoundaryLabel.CONDUIT_OUTFLOW):
        return pb.exact_u_c(x, y, t)
    return pb.exact_u_f(x, y, t)


# -- wellbore scenario -------------------------------------------------------


def _const_field(vx: float, vy: float):
    def f(x, y, t=None, label=None):
        return np.stack([np.full_like(np.asarray(x, float), vx),
                         np.full_like(np.asarray(x, float), vy)], axis=-1)
    return f


@dataclass
class WellboreScenario:
    """Production/injection wellbore configuration (fixed parameter set).

    Exterior porous boundaries inject fluid at 0.5 (microfractures) and
    theta (matrix); the conduit is driven by a parabolic inflow at the top
    of the injection well and a do-nothing outflow at the production well.
    """

    theta: float = 0.001
    t_final: float = 5.0
    dt: float = 0.01
    h: float = 1.0 / 32.0
    geometry: Example2Geometry = field(default_factory=Example2Geometry)
    params: PhysParams = field(default_factory=lambda: PhysParams(
        nu=1e-2, mu=1e-2, rho=1.0, sigma=0.9, alpha=1.0,
        eta_f=1e-4, eta_m=1e-2, c_ft=1e-5, c_mt=1e-5,
        k_f=1e-4, k_m=1e-8, gamma=10.0))

    #: prescribed microfracture/matrix velocity direction per boundary segment
    _directions = {
        BoundaryLabel.DUAL_EXTERIOR_1: (0.0, 1.0),
        BoundaryLabel.DUAL_EXTERIOR_2: (-1.0, 0.0),
        BoundaryLabel.DUAL_EXTERIOR_3: (-1.0, 0.0),
        BoundaryLabel.DUAL_EXTERIOR_4: (0.0, -1.0),
        BoundaryLabel.DUAL_EXTERIOR_5: (1.0, 0.0),
    }

    has_exact = False

    def f_c(self, x, y, t):
        return np.zeros(np.shape(x) + (2,))

    def f_d(self, x, y, t):
        return np.zeros(np.shape(x))

    f_m = f_d

    def conduit_dirichlet(self, x, y, t, label=None):
        out = np.zeros(np.shape(x) + (2,))
        if label == BoundaryLabel.CONDUIT_INFLOW:
            out[..., 1] = -64.0 * x * (0.25 - x)
        return out

    def _segment_velocity(self, x, y, label, magnitude):
        dx, dy = self._directions[BoundaryLabel(label)]
        out = np.empty(np.shape(x) + (2,))
        out[..., 0] = dx * magnitude
        out[..., 1] = dy * magnitude
        return out

    def fracture_flux_data(self, x, y, t, label=None):
        return self._segment_velocity(x, y, label, 0.5)

    def matrix_flux_data(self, x, y, t, label=None):
        if label == BoundaryLabel.INTERFACE:
            return np.zeros(np.shape(x) + (2,))
        return self._segment_velocity(x, y, label, self.theta)

    def initial(self, name: str):
        def zero_vec(x, y, t=0.0):
            return np.zeros(np.shape(x) + (2,))

        def zero_scal(x, y, t=0.0):
            return np.zeros(np.shape(x))

        return zero_vec if name in ("u_c", "u_f", "u_m") else zero_scal
