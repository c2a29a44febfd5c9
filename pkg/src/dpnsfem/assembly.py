"""Assembly of the three decoupled step systems.

Step 1 (conduit): backward-Euler MINI discretization of Navier-Stokes with
the convective term folded into a transported velocity on the right-hand
side, a BJS slip term and an interface penalty on the normal-velocity
mismatch against lagged microfracture data.

Step 2 (matrix Darcy) and Step 3 (microfracture Darcy): mixed BDM1/P0
systems; Step 3 carries the interface penalty against the averaged conduit
velocity of the completed macro step and the lagged fracture-pressure load.

All three left-hand matrices are independent of time (data enters only the
right-hand sides), so operators assemble the matrix once, eliminate the
essential dofs symmetrically, and keep the coupling columns needed to
correct right-hand sides for time-dependent boundary values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fespace import (ASSEMBLY_DEGREE, EDGE_POINTS, FeSpaces, FieldHandle,
                      mini_values)
from .linalg import LuSolver, SparseMatrix, TripletBuilder
from .mesh import CONDUIT, POROUS, BoundaryLabel, DUAL_LABELS
from .quadrature import edge_rule, make_quadrature

CONDUIT_WALL_LABELS = (
    BoundaryLabel.CONDUIT_EXTERIOR,
    BoundaryLabel.DUAL_EXTERIOR_1, BoundaryLabel.DUAL_EXTERIOR_2,
    BoundaryLabel.DUAL_EXTERIOR_3, BoundaryLabel.DUAL_EXTERIOR_4,
    BoundaryLabel.DUAL_EXTERIOR_5,
)


@dataclass(frozen=True)
class PhysParams:
    """Physical constants plus the interface penalty.

    The permeability tensor of the microfractures is isotropic (k_f times
    identity), so the BJS coefficient alpha*nu*sqrt(d)/sqrt(trace) reduces
    to alpha*nu/sqrt(k_f) in two dimensions.
    """

    nu: float = 1.0
    mu: float = 1.0
    rho: float = 1.0
    sigma: float = 1.0
    alpha: float = 1.0
    eta_f: float = 1.0
    eta_m: float = 1.0
    c_ft: float = 1.0
    c_mt: float = 1.0
    k_f: float = 1.0
    k_m: float = 1.0
    gamma: float = 0.1
    d: int = 2

    def __post_init__(self):
        for name in ("nu", "mu", "rho", "sigma", "alpha", "eta_f", "eta_m",
                     "c_ft", "c_mt", "k_f", "k_m"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        if self.d != 2:
            raise ValueError("only two space dimensions are supported")

    @property
    def bjs_coefficient(self) -> float:
        return self.alpha * self.nu * math.sqrt(self.d) / math.sqrt(self.d * self.k_f)


@dataclass
class StepSystem:
    matrix: SparseMatrix
    rhs: np.ndarray
    layout: dict[str, slice]


def apply_dirichlet(system: StepSystem, constraints) -> StepSystem:
    """Symmetric elimination: identity rows/cols, right-hand side corrected."""
    if len(constraints) == 0:
        return system
    dofs = np.array([c[0] for c in constraints], dtype=np.int64)
    vals = np.array([c[1] for c in constraints], dtype=float)
    uniq, first = np.unique(dofs, return_index=True)
    if len(uniq) != len(dofs):
        for d, v in zip(dofs, vals):
            ref = vals[first[np.searchsorted(uniq, d)]]
            if v != ref:
                raise ValueError(f"conflicting constraints on dof {d}")
        dofs, vals = uniq, vals[first]
    A = system.matrix.to_scipy()
    elim, coupling = _eliminate(A, dofs)
    rhs = system.rhs - coupling @ vals
    rhs[dofs] = vals
    return StepSystem(SparseMatrix(elim), rhs, system.layout)


def _eliminate(A, dofs):
    """Zero rows/cols at dofs, unit diagonal; return also original columns."""
    import scipy.sparse as sp

    n = A.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    P = sp.diags(keep).tocsr()
    ident = sp.coo_matrix((np.ones(len(dofs)), (dofs, dofs)), shape=A.shape)
    elim = (P @ A @ P + ident).tocsr()
    elim.sum_duplicates()
    elim.sort_indices()
    coupling = A.tocsc()[:, dofs].tocsr()
    return elim, coupling


class FrozenSystem:
    """Factorized, eliminated step matrix reused across time steps."""

    def __init__(self, matrix: SparseMatrix, dofs: np.ndarray):
        A = matrix.to_scipy()
        self.dofs = dofs
        self.elim, self.coupling = _eliminate(A, dofs) if len(dofs) else (A, None)
        self.lu = LuSolver(SparseMatrix(self.elim.tocsr()))

    def solve(self, rhs: np.ndarray, values: np.ndarray | None = None) -> np.ndarray:
        b = rhs
        if len(self.dofs):
            b = rhs - self.coupling @ values
            b[self.dofs] = values
        return self.lu.solve(b)


# -- interface bookkeeping ---------------------------------------------------


class InterfaceInfo:
    """Per-interface-edge data shared by the Step-1 and Step-3 assemblers."""

    def __init__(self, spaces: FeSpaces):
        m = spaces.mesh
        mini, darcy = spaces.mini, spaces.darcy
        eids = m.interface_edges
        self.n = len(eids)
        self.normal = m.interface_normal                    # n_d
        self.tangent = np.column_stack([-self.normal[:, 1], self.normal[:, 0]])
        self.length = m.edge_length[eids]

        t0 = m.edge_tris[eids, 0]
        t1 = m.edge_tris[eids, 1]
        is_con0 = m.tri_tag[t0] == CONDUIT
        tc = np.where(is_con0, t0, t1)
        tp = np.where(is_con0, t1, t0)
        self.conduit_elem = mini.tri_g2l[tc]
        self.porous_elem = darcy.tri_g2l[tp]

        va, vb = m.edges[eids, 0], m.edges[eids, 1]
        self.vert_a = mini.vert_g2l[va]                     # scalar conduit dofs
        self.vert_b = mini.vert_g2l[vb]
        le = darcy.edge_g2l[eids]
        self.u_dofs = np.column_stack([2 * le, 2 * le + 1])
        self.sign = np.einsum("ij,ij->i", m.edge_normal[eids], self.normal)
        self.p0_dof = self.porous_elem                      # local P0 dof

        s, w = edge_rule(EDGE_POINTS)
        self.s, self.w = s, w
        self.trace_p1 = np.column_stack([0.5 * (1.0 - s), 0.5 * (1.0 + s)])
        # normal-trace of the two edge dofs against n_e: 1/L and 3 s / L
        self.trace_bdm = np.stack([np.ones_like(s), 3.0 * s], axis=1)  # scale by 1/L


def interface_info(spaces: FeSpaces) -> InterfaceInfo:
    if "interface" not in spaces._cache:
        spaces._cache["interface"] = InterfaceInfo(spaces)
    return spaces._cache["interface"]


# -- conduit step ------------------------------------------------------------


class NsOperator:
    """Assembler for the conduit substep systems (matrix frozen per run)."""

    def __init__(self, spaces: FeSpaces, params: PhysParams, dt: float,
                 pin_pressure: bool = False):
        self.spaces = spaces
        self.params = params
        self.dt = float(dt)
        self.pin_pressure = pin_pressure
        mini = spaces.mini
        self.layout = {
            "velocity": slice(0, mini.n_velocity),
            "pressure": slice(mini.n_velocity, mini.n_velocity + mini.n_pressure),
        }
        self.n_dofs = mini.n_velocity + mini.n_pressure
        self._setup_quadrature()
        self.matrix = self._assemble_matrix()
        self._setup_dirichlet()
        self._frozen: FrozenSystem | None = None

    # quadrature caches shared by matrix and rhs assembly
    def _setup_quadrature(self):
        mini = self.spaces.mini
        rule = make_quadrature(ASSEMBLY_DEGREE)
        tris = self.spaces.mesh.triangles[mini.tri_ids]
        self.qrule = rule
        self.qpts = np.einsum("qk,nkc->nqc", rule.points, self.spaces.mesh.vertices[tris])
        self.qw = 2.0 * mini.area[:, None] * rule.weights[None, :]
        self.vbas = mini_values(rule.points)                # (q, 4)
        elems = np.arange(mini.n_tri)
        lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)
        self.vgrad = mini.basis_gradients(elems[:, None], lam)  # (n, q, 4, 2)

    def _assemble_matrix(self) -> SparseMatrix:
        p = self.params
        mini = self.spaces.mini
        tb = TripletBuilder(self.n_dofs, self.n_dofs)
        w, bas, grad = self.qw, self.vbas, self.vgrad

        mass = np.einsum("nq,qi,qj->nij", w, bas, bas) / self.dt
        stiff = p.nu * np.einsum("nq,nqic,nqjc->nij", w, grad, grad)
        loc = mass + stiff
        vd = mini.elem_vdofs
        rows = np.repeat(vd, 4, axis=1).ravel()
        cols = np.tile(vd, (1, 4)).ravel()
        for comp in range(2):
            off = comp * mini.n_scalar
            tb.add(rows + off, cols + off, loc.ravel())

        # pressure coupling: -(p, div v) on velocity rows, +(q, div u) on pressure rows
        poff = self.layout["pressure"].start
        pd = mini.tri_verts
        for comp in range(2):
            off = comp * mini.n_scalar
            bloc = np.einsum("nq,nqi,qj->nij", w, grad[..., comp], self.qrule.points)
            r = np.repeat(vd, 3, axis=1).ravel()
            c = np.tile(pd, (1, 4)).ravel()
            tb.add(r + off, poff + c, -bloc.ravel())
            tb.add(poff + c, r + off, bloc.ravel())

        self._add_interface_matrix(tb)
        return tb.compress()

    def _add_interface_matrix(self, tb: TripletBuilder):
        p = self.params
        mini = self.spaces.mini
        info = interface_info(self.spaces)
        if info.n == 0:
            return
        c_bjs = p.bjs_coefficient
        nseg = np.einsum("q,qi,qj->ij", info.w, info.trace_p1, info.trace_p1)
        # integral of N_i N_j over each edge: (L/2) * unit-interval Gram
        for k in range(info.n):
            L = info.length[k]
            gram = 0.5 * L * nseg
            sdofs = np.array([info.vert_a[k], info.vert_b[k]])
            nd, tau = info.normal[k], info.tangent[k]
            for ci in range(2):
                for cj in range(2):
                    coeff = c_bjs * tau[ci] * tau[cj] \
                        + (p.gamma / (p.rho * L)) * nd[ci] * nd[cj]
                    if coeff == 0.0:
                        continue
                    r = np.repeat(ci * mini.n_scalar + sdofs, 2)
                    c = np.tile(cj * mini.n_scalar + sdofs, 2)
                    tb.add(r, c, coeff * gram.ravel())

    def _setup_dirichlet(self):
        mini = self.spaces.mini
        # inflow last so it wins at inflow/wall corners (profile is 0 there)
        assign: dict[int, BoundaryLabel] = {}
        for lab in (*CONDUIT_WALL_LABELS, BoundaryLabel.CONDUIT_INFLOW):
            for v in mini.boundary_vertices([lab]):
                assign[int(v)] = lab
        verts = np.array(sorted(assign), dtype=np.int64)
        self.dirichlet_scalar = verts
        self.dirichlet_labels = [assign[int(v)] for v in verts]
        self.dirichlet_dofs = np.concatenate(
            [verts, mini.n_scalar + verts]) if len(verts) else verts
        if self.pin_pressure:
            self.dirichlet_dofs = np.concatenate(
                [self.dirichlet_dofs, [self.layout["pressure"].start]])

    def dirichlet_values(self, problem, t: float) -> np.ndarray:
        mini = self.spaces.mini
        verts = self.dirichlet_scalar
        xy = mini.coords[verts]
        vals = np.zeros((len(verts), 2))
        labs = np.array([int(l) for l in self.dirichlet_labels])
        for lab in np.unique(labs):
            sel = labs == lab
            vals[sel] = problem.conduit_dirichlet(
                xy[sel, 0], xy[sel, 1], t, BoundaryLabel(lab))
        out = np.concatenate([vals[:, 0], vals[:, 1]])
        if self.pin_pressure:
            out = np.concatenate([out, [0.0]])
        return out

    def assemble_rhs(self, problem, t_next: float, uhat: np.ndarray,
                     phi_f_lag: FieldHandle, u_f_lag: FieldHandle,
                     quad=None) -> np.ndarray:
        """Raw right-hand side (before essential elimination).

        uhat holds the transported velocity at the volume quadrature points,
        shape (n_elem, n_q, 2); `quad` overrides the cached (points, weights,
        basis) triple when uhat was sampled on a different rule.
        """
        p = self.params
        mini = self.spaces.mini
        qpts, qw, vbas = quad if quad is not None else (self.qpts, self.qw, self.vbas)
        rhs = np.zeros(self.n_dofs)
        fc = problem.f_c(qpts[..., 0], qpts[..., 1], t_next)
        vd = mini.elem_vdofs
        for comp in range(2):
            integ = (fc[..., comp] + uhat[..., comp] / self.dt) * qw
            contrib = np.einsum("nq,qi->ni", integ, vbas)
            np.add.at(rhs, comp * mini.n_scalar + vd, contrib)

        info = interface_info(self.spaces)
        for k in range(info.n):
            L = info.length[k]
            nd = info.normal[k]
            sdofs = np.array([info.vert_a[k], info.vert_b[k]])
            phi_val = phi_f_lag.coeffs[info.p0_dof[k]]
            cf = u_f_lag.coeffs[info.u_dofs[k]]
            ufn = info.sign[k] * (info.trace_bdm @ cf) / L   # u_f . n_d at edge qp
            base = (phi_val / p.rho) + (p.gamma / (p.rho * L)) * ufn
            mom = 0.5 * L * np.einsum("q,q,qi->i", info.w, base, info.trace_p1)
            for comp in range(2):
                rhs[comp * mini.n_scalar + sdofs] += nd[comp] * mom
        return rhs

    def frozen(self) -> FrozenSystem:
        if self._frozen is None:
            self._frozen = FrozenSystem(self.matrix, self.dirichlet_dofs)
        return self._frozen


# -- porous steps ------------------------------------------------------------


class DarcyOperator:
    """Assembler for the matrix ('matrix') or microfracture ('fracture')
    Darcy step; the step matrix is frozen per run."""

    def __init__(self, spaces: FeSpaces, params: PhysParams, ds: float,
                 kind: str):
        if kind not in ("matrix", "fracture"):
            raise ValueError("kind must be 'matrix' or 'fracture'")
        self.spaces = spaces
        self.params = params
        self.ds = float(ds)
        self.kind = kind
        darcy = spaces.darcy
        self.layout = {
            "velocity": slice(0, darcy.n_u),
            "pressure": slice(darcy.n_u, darcy.n_u + darcy.n_p),
        }
        self.n_dofs = darcy.n_u + darcy.n_p
        self.k_perm = params.k_f if kind == "fracture" else params.k_m
        self.eta_c = (params.eta_f * params.c_ft if kind == "fracture"
                      else params.eta_m * params.c_mt)
        self._setup_quadrature()
        self.matrix = self._assemble_matrix()
        self._setup_essential()
        self._frozen: FrozenSystem | None = None

    def _setup_quadrature(self):
        darcy = self.spaces.darcy
        mesh = self.spaces.mesh
        rule = make_quadrature(2)
        tris = mesh.triangles[darcy.tri_ids]
        pts = np.einsum("qk,nkc->nqc", rule.points, mesh.vertices[tris])
        w = 2.0 * darcy.area[:, None] * rule.weights[None, :]
        elems = np.arange(darcy.n_tri)
        self.mass_shapes = darcy.shapes_at(elems[:, None], pts)    # (n, q, 6, 2)
        self.mass_w = w
        rule6 = make_quadrature(ASSEMBLY_DEGREE)
        self.fq_pts = np.einsum("qk,nkc->nqc", rule6.points, mesh.vertices[tris])
        self.fq_w = 2.0 * darcy.area[:, None] * rule6.weights[None, :]

    def _assemble_matrix(self) -> SparseMatrix:
        p = self.params
        darcy = self.spaces.darcy
        tb = TripletBuilder(self.n_dofs, self.n_dofs)

        mloc = (p.mu / (p.rho * self.k_perm)) * np.einsum(
            "nq,nqic,nqjc->nij", self.mass_w, self.mass_shapes, self.mass_shapes)
        ud = darcy.elem_udofs
        tb.add(np.repeat(ud, 6, axis=1).ravel(),
               np.tile(ud, (1, 6)).ravel(), mloc.ravel())

        poff = self.layout["pressure"].start
        pd = poff + np.arange(darcy.n_p)
        dloc = darcy.div * darcy.area[:, None] / p.rho             # (n, 6)
        rows = ud.ravel()
        cols = np.repeat(pd, 6)
        tb.add(rows, cols, -dloc.ravel())                          # -(phi, div v)
        tb.add(cols, rows, dloc.ravel())                           # +(div u, psi)

        react = (self.eta_c / (p.rho * self.ds)
                 + p.sigma * p.k_m / (p.rho * p.mu)) * darcy.area
        tb.add(pd, pd, react)

        if self.kind == "fracture":
            info = interface_info(self.spaces)
            for k in range(info.n):
                L = info.length[k]
                tr = info.trace_bdm / L                            # v_j . n_e at qp
                gram = 0.5 * L * (p.gamma / (p.rho * L)) * np.einsum(
                    "q,qi,qj->ij", info.w, tr, tr)
                d = info.u_dofs[k]
                tb.add(np.repeat(d, 2), np.tile(d, 2), gram.ravel())
        return tb.compress()

    def _setup_essential(self):
        darcy = self.spaces.darcy
        labels = list(DUAL_LABELS)
        if self.kind == "matrix":
            labels.append(BoundaryLabel.INTERFACE)
        edges = darcy.constrained_edges(labels)
        self.constrained_edges = np.sort(edges)
        self.constrained_labels = self.spaces.mesh.edge_label[
            darcy.edge_ids[self.constrained_edges]]
        dofs = np.column_stack([2 * self.constrained_edges,
                                2 * self.constrained_edges + 1]).ravel()
        self.dirichlet_dofs = dofs

    def essential_values(self, problem, t: float) -> np.ndarray:
        darcy = self.spaces.darcy
        provider = (problem.fracture_flux_data if self.kind == "fracture"
                    else problem.matrix_flux_data)
        vals = np.zeros((len(self.constrained_edges), 2))
        for lab in np.unique(self.constrained_labels):
            sel = self.constrained_labels == lab
            f = lambda x, y, t2, _lab=BoundaryLabel(int(lab)): provider(x, y, t2, _lab)
            vals[sel] = darcy.edge_moments(self.constrained_edges[sel], f, t)
        return vals.ravel()

    def assemble_rhs(self, problem, t_next: float, phi_old: FieldHandle,
                     phi_lag: FieldHandle,
                     s_avg: np.ndarray | None = None) -> np.ndarray:
        p = self.params
        darcy = self.spaces.darcy
        rhs = np.zeros(self.n_dofs)
        poff = self.layout["pressure"].start

        forcing = problem.f_d if self.kind == "fracture" else problem.f_m
        fvals = forcing(self.fq_pts[..., 0], self.fq_pts[..., 1], t_next)
        rhs[poff:] = (self.eta_c / (p.rho * self.ds)) * darcy.area * phi_old.coeffs \
            + (p.sigma * p.k_m / (p.rho * p.mu)) * darcy.area * phi_lag.coeffs \
            + np.sum(self.fq_w * fvals, axis=1) / p.rho

        if self.kind == "fracture":
            if s_avg is None:
                raise ValueError("fracture step requires the averaged conduit velocity")
            mini = self.spaces.mini
            info = interface_info(self.spaces)
            for k in range(info.n):
                L = info.length[k]
                nd = info.normal[k]
                sdofs = np.array([info.vert_a[k], info.vert_b[k]])
                sa = s_avg[sdofs] * nd[0] + s_avg[mini.n_scalar + sdofs] * nd[1]
                s_n = info.trace_p1 @ sa                    # S . n_d at edge qp
                tr = info.sign[k] * info.trace_bdm / L      # v_j . n_d at edge qp
                phi_val = phi_lag.coeffs[info.p0_dof[k]]
                integ = (p.gamma / (p.rho * L)) * s_n - phi_val / p.rho
                rhs[info.u_dofs[k]] += 0.5 * L * np.einsum(
                    "q,q,qj->j", info.w, integ, tr)
        return rhs

    def frozen(self) -> FrozenSystem:
        if self._frozen is None:
            self._frozen = FrozenSystem(self.matrix, self.dirichlet_dofs)
        return self._frozen


# -- one-shot spec-level entry points ---------------------------------------


def assemble_ns_step(spaces: FeSpaces, params: PhysParams, problem,
                     u_c_old: FieldHandle, phi_f_lag: FieldHandle,
                     u_f_lag: FieldHandle, t_next: float, dt: float,
                     apply_bc: bool = True) -> StepSystem:
    """Assemble one conduit substep as a standalone system."""
    from .characteristics import trace_quadrature_values

    op = NsOperator(spaces, params, dt)
    uhat, _ = trace_quadrature_values(spaces, u_c_old, op.qpts, dt)
    rhs = op.assemble_rhs(problem, t_next, uhat, phi_f_lag, u_f_lag)
    system = StepSystem(op.matrix, rhs, op.layout)
    if apply_bc:
        vals = op.dirichlet_values(problem, t_next)
        system = apply_dirichlet(system, list(zip(op.dirichlet_dofs, vals)))
    return system


def assemble_matrix_darcy_step(spaces: FeSpaces, params: PhysParams, problem,
                               phi_m_old: FieldHandle, phi_f_lag: FieldHandle,
                               t_next: float, ds: float,
                               apply_bc: bool = True) -> StepSystem:
    op = DarcyOperator(spaces, params, ds, "matrix")
    rhs = op.assemble_rhs(problem, t_next, phi_m_old, phi_f_lag)
    system = StepSystem(op.matrix, rhs, op.layout)
    if apply_bc:
        vals = op.essential_values(problem, t_next)
        system = apply_dirichlet(system, list(zip(op.dirichlet_dofs, vals)))
    return system


def assemble_fracture_darcy_step(spaces: FeSpaces, params: PhysParams, problem,
                                 phi_f_old: FieldHandle, phi_m_lag: FieldHandle,
                                 s_avg: np.ndarray, t_next: float, ds: float,
                                 apply_bc: bool = True) -> StepSystem:
    op = DarcyOperator(spaces, params, ds, "fracture")
    rhs = op.assemble_rhs(problem, t_next, phi_f_old, phi_m_lag, s_avg=s_avg)
    system = StepSystem(op.matrix, rhs, op.layout)
    if apply_bc:
        vals = op.essential_values(problem, t_next)
        system = apply_dirichlet(system, list(zip(op.dirichlet_dofs, vals)))
    return system
