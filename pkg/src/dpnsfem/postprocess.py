"""Error norms against exact fields, convergence-rate tables, the discrete
energy monitor, and VTK field export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import PhysParams, interface_info
from .fespace import ERROR_DEGREE, FeSpaces, mini_values
from .mesh import CONDUIT, POROUS, Mesh
from .quadrature import make_quadrature

ERROR_FIELDS = ("u_c_l2", "u_c_h1", "p_c_l2", "u_f_l2", "phi_f_l2",
                "u_m_l2", "phi_m_l2")


@dataclass
class ErrorReport:
    h: float
    dt: float
    r: int
    errors: dict[str, float]
    relative: dict[str, float]
    exact_norms: dict[str, float]
    wall_times: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for v in self.errors.values():
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError("error norms must be finite and nonnegative")


def _error_quad(spaces: FeSpaces, tag: int):
    rule = make_quadrature(ERROR_DEGREE)
    sub = spaces.mini if tag == CONDUIT else spaces.darcy
    tris = spaces.mesh.triangles[sub.tri_ids]
    pts = np.einsum("qk,nkc->nqc", rule.points, spaces.mesh.vertices[tris])
    w = 2.0 * sub.area[:, None] * rule.weights[None, :]
    return rule, pts, w


def compute_errors(spaces: FeSpaces, state, problem, t: float,
                   r: int = 1, wall_times: dict | None = None) -> ErrorReport:
    """L2 (and conduit H1-seminorm) errors at time t, degree-8 quadrature."""
    for f in state.fields():
        if abs(f.time - t) > 1e-12 * max(1.0, abs(t)):
            raise ValueError(f"state field {f.space} is at t={f.time}, not {t}")
    mini, darcy = spaces.mini, spaces.darcy
    errors: dict[str, float] = {}
    exact_norms: dict[str, float] = {}

    rule, pts, w = _error_quad(spaces, CONDUIT)
    elems = np.arange(mini.n_tri)
    lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)

    uh = mini.velocity_at(state.u_c.coeffs, elems[:, None], lam)
    ue = problem.exact_u_c(pts[..., 0], pts[..., 1], t)
    errors["u_c_l2"] = math.sqrt(np.sum(w[..., None] * (uh - ue) ** 2))
    exact_norms["u_c_l2"] = math.sqrt(np.sum(w[..., None] * ue**2))

    gh = mini.velocity_gradient_at(state.u_c.coeffs, elems[:, None], lam)
    ge = problem.exact_grad_u_c(pts[..., 0], pts[..., 1], t)
    errors["u_c_h1"] = math.sqrt(np.sum(w[..., None, None] * (gh - ge) ** 2))
    exact_norms["u_c_h1"] = math.sqrt(np.sum(w[..., None, None] * ge**2))

    ph = mini.pressure_at(state.p_c.coeffs, elems[:, None], lam)
    pe = problem.exact_p_c(pts[..., 0], pts[..., 1], t)
    errors["p_c_l2"] = math.sqrt(np.sum(w * (ph - pe) ** 2))
    exact_norms["p_c_l2"] = math.sqrt(np.sum(w * pe**2))

    rule, pts, w = _error_quad(spaces, POROUS)
    delems = np.arange(darcy.n_tri)
    for name, handle, exact in (("u_f", state.u_f, problem.exact_u_f),
                                ("u_m", state.u_m, problem.exact_u_m)):
        vh = darcy.velocity_at(handle.coeffs, delems[:, None], pts)
        ve = exact(pts[..., 0], pts[..., 1], t)
        errors[f"{name}_l2"] = math.sqrt(np.sum(w[..., None] * (vh - ve) ** 2))
        exact_norms[f"{name}_l2"] = math.sqrt(np.sum(w[..., None] * ve**2))
    for name, handle, exact in (("phi_f", state.phi_f, problem.exact_phi_f),
                                ("phi_m", state.phi_m, problem.exact_phi_m)):
        vh = handle.coeffs[:, None]
        ve = exact(pts[..., 0], pts[..., 1], t)
        errors[f"{name}_l2"] = math.sqrt(np.sum(w * (vh - ve) ** 2))
        exact_norms[f"{name}_l2"] = math.sqrt(np.sum(w * ve**2))

    relative = {k: (errors[k] / exact_norms[k] if exact_norms[k] > 0 else np.inf)
                for k in errors}
    return ErrorReport(h=spaces.mesh.h_global, dt=state.t / max(state.n, 1),
                       r=r, errors=errors, relative=relative,
                       exact_norms=exact_norms, wall_times=wall_times or {})


# -- rate tables --------------------------------------------------------------


@dataclass
class RateTable:
    fields: tuple[str, ...]
    rows: list[dict]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("h,field,error,rate\n")
            for row in self.rows:
                for name in self.fields:
                    rate = row["rates"][name]
                    rate_s = "--" if rate is None else f"{rate:.2f}"
                    f.write(f"{row['h']:.10g},{name},{row['errors'][name]:.6e},{rate_s}\n")

    def asymptotic_rate(self, name: str) -> float:
        rate = self.rows[-1]["rates"][name]
        if rate is None:
            raise ValueError("need at least two rows for a rate")
        return rate


def make_rate_table(reports: list[ErrorReport],
                    fields: tuple[str, ...] = ERROR_FIELDS) -> RateTable:
    """Rates log2(e_i / e_{i+1}) for a sequence of h-halving runs."""
    if len(reports) == 0:
        raise ValueError("no reports")
    hs = [rep.h for rep in reports]
    for h0, h1 in zip(hs[:-1], hs[1:]):
        if abs(h0 / h1 - 2.0) > 1e-8:
            raise ValueError("reports must halve h between consecutive rows")
    rows = []
    prev: ErrorReport | None = None
    for rep in reports:
        rates = {}
        for name in fields:
            if prev is None or rep.errors[name] == 0.0:
                rates[name] = None
            else:
                rates[name] = math.log2(prev.errors[name] / rep.errors[name])
        rows.append({"h": rep.h, "errors": {n: rep.errors[n] for n in fields},
                     "rates": rates})
        prev = rep
    return RateTable(fields=fields, rows=rows)


# -- energy monitor ------------------------------------------------------------


def _gram_matrices(spaces: FeSpaces):
    if "energy_gram" in spaces._cache:
        return spaces._cache["energy_gram"]
    from .linalg import TripletBuilder
    from .quadrature import make_quadrature as mq

    mini, darcy = spaces.mini, spaces.darcy
    rule = mq(6)
    bas = mini_values(rule.points)
    elems = np.arange(mini.n_tri)
    lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)
    grads = mini.basis_gradients(elems[:, None], lam)
    w = 2.0 * mini.area[:, None] * rule.weights[None, :]

    vd = mini.elem_vdofs
    rows = np.repeat(vd, 4, axis=1).ravel()
    cols = np.tile(vd, (1, 4)).ravel()
    tbm = TripletBuilder(mini.n_scalar, mini.n_scalar)
    tbm.add(rows, cols, np.einsum("nq,qi,qj->nij", w, bas, bas).ravel())
    mass = tbm.compress().to_scipy()
    tbk = TripletBuilder(mini.n_scalar, mini.n_scalar)
    tbk.add(rows, cols, np.einsum("nq,nqic,nqjc->nij", w, grads, grads).ravel())
    stiff = tbk.compress().to_scipy()

    rule2 = mq(2)
    tris = spaces.mesh.triangles[darcy.tri_ids]
    pts = np.einsum("qk,nkc->nqc", rule2.points, spaces.mesh.vertices[tris])
    wd = 2.0 * darcy.area[:, None] * rule2.weights[None, :]
    shp = darcy.shapes_at(np.arange(darcy.n_tri)[:, None], pts)
    ud = darcy.elem_udofs
    tbb = TripletBuilder(darcy.n_u, darcy.n_u)
    tbb.add(np.repeat(ud, 6, axis=1).ravel(), np.tile(ud, (1, 6)).ravel(),
            np.einsum("nq,nqic,nqjc->nij", wd, shp, shp).ravel())
    bdm_mass = tbb.compress().to_scipy()

    spaces._cache["energy_gram"] = (mass, stiff, bdm_mass)
    return spaces._cache["energy_gram"]


def velocity_seminorm_sq(spaces: FeSpaces, vel_coeffs: np.ndarray) -> float:
    _, stiff, _ = _gram_matrices(spaces)
    ns = spaces.mini.n_scalar
    cx, cy = vel_coeffs[:ns], vel_coeffs[ns:]
    return float(cx @ (stiff @ cx) + cy @ (stiff @ cy))


def energy_monitor(spaces: FeSpaces, state, params: PhysParams,
                   grids) -> dict[str, float]:
    """Instantaneous quadratic components of the discrete energy bound.

    The stepper accumulates these over macro steps with their time-step
    weights; any non-finite component aborts the run.
    """
    mass, stiff, bdm_mass = _gram_matrices(spaces)
    mini, darcy = spaces.mini, spaces.darcy
    ns = mini.n_scalar
    out: dict[str, float] = {}
    cx, cy = state.u_c.coeffs[:ns], state.u_c.coeffs[ns:]
    out["u_c_sq"] = float(cx @ (mass @ cx) + cy @ (mass @ cy))
    out["grad_u_c_sq"] = velocity_seminorm_sq(spaces, state.u_c.coeffs)
    out["phi_f_sq"] = float(np.sum(darcy.area * state.phi_f.coeffs**2))
    out["phi_m_sq"] = float(np.sum(darcy.area * state.phi_m.coeffs**2))
    out["u_f_sq"] = float(state.u_f.coeffs @ (bdm_mass @ state.u_f.coeffs))
    out["u_m_sq"] = float(state.u_m.coeffs @ (bdm_mass @ state.u_m.coeffs))

    # interface jump (gamma/(rho h)) || (u_c - u_f) . n_d ||^2
    info = interface_info(spaces)
    jump = 0.0
    for k in range(info.n):
        L = info.length[k]
        nd = info.normal[k]
        sdofs = np.array([info.vert_a[k], info.vert_b[k]])
        ucn = info.trace_p1 @ (state.u_c.coeffs[sdofs] * nd[0]
                               + state.u_c.coeffs[ns + sdofs] * nd[1])
        ufn = info.sign[k] * (info.trace_bdm @ state.u_f.coeffs[info.u_dofs[k]]) / L
        jump += params.gamma / (params.rho * L) * 0.5 * L * float(
            np.sum(info.w * (ucn - ufn) ** 2))
    out["interface_jump_sq"] = jump
    return out


# -- VTK export ----------------------------------------------------------------


def export_vtk(spaces: FeSpaces, state, path) -> None:
    """Legacy ASCII VTK: vertex u_c and p_c, cellwise porous fields."""
    mesh = spaces.mesh
    mini, darcy = spaces.mini, spaces.darcy
    nv, nt = mesh.n_vertices, mesh.n_triangles

    u_pt = np.zeros((nv, 2))
    ns = mini.n_scalar
    u_pt[mini.vert_ids, 0] = state.u_c.coeffs[:mini.n_vert]
    u_pt[mini.vert_ids, 1] = state.u_c.coeffs[ns:ns + mini.n_vert]
    p_pt = np.zeros(nv)
    p_pt[mini.vert_ids] = state.p_c.coeffs

    phi_f = np.zeros(nt)
    phi_m = np.zeros(nt)
    phi_f[darcy.tri_ids] = state.phi_f.coeffs
    phi_m[darcy.tri_ids] = state.phi_m.coeffs

    cent = mesh.vertices[mesh.triangles[darcy.tri_ids]].mean(axis=1)
    delems = np.arange(darcy.n_tri)
    uf = np.zeros((nt, 2))
    um = np.zeros((nt, 2))
    uf[darcy.tri_ids] = darcy.velocity_at(state.u_f.coeffs, delems, cent)
    um[darcy.tri_ids] = darcy.velocity_at(state.u_m.coeffs, delems, cent)

    g = "{:.12g}".format
    lines = [
        "# vtk DataFile Version 2.0",
        f"fields t={state.t:.12g}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    lines += [f"{g(x)} {g(y)} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    lines.append(f"POINT_DATA {nv}")
    lines.append("VECTORS conduit_velocity double")
    lines += [f"{g(vx)} {g(vy)} 0" for vx, vy in u_pt]
    lines.append("SCALARS conduit_pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [g(v) for v in p_pt]
    lines.append(f"CELL_DATA {nt}")
    lines.append("SCALARS subdomain int 1")
    lines.append("LOOKUP_TABLE default")
    lines += [str(int(t)) for t in mesh.tri_tag]
    for name, arr in (("fracture_pressure", phi_f), ("matrix_pressure", phi_m)):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines += [g(v) for v in arr]
    for name, arr in (("fracture_velocity", uf), ("matrix_velocity", um)):
        lines.append(f"VECTORS {name} double")
        lines += [f"{g(vx)} {g(vy)} 0" for vx, vy in arr]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def boundary_flux(spaces: FeSpaces, state, label) -> float:
    """Signed conduit outflow integral of u_c . n over edges with a label.

    The outward normal is the stored global edge normal oriented away from
    the conduit owner.
    """
    mesh = spaces.mesh
    mini = spaces.mini
    ns = mini.n_scalar
    total = 0.0
    for e in np.flatnonzero(mesh.edge_label == int(label)):
        t0 = mesh.edge_tris[e, 0]
        n = mesh.edge_normal[e].copy()
        cen = mesh.vertices[mesh.triangles[t0]].mean(axis=0)
        mid = mesh.vertices[mesh.edges[e]].mean(axis=0)
        if np.dot(n, mid - cen) < 0:
            n = -n
        va, vb = mini.vert_g2l[mesh.edges[e]]
        L = mesh.edge_length[e]
        ua = state.u_c.coeffs[va] * n[0] + state.u_c.coeffs[ns + va] * n[1]
        ub = state.u_c.coeffs[vb] * n[0] + state.u_c.coeffs[ns + vb] * n[1]
        total += 0.5 * L * (ua + ub)
    return float(total)
