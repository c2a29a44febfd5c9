"""Discrete spaces: MINI (P1+bubble / P1) on the conduit, BDM1 / P0 on the
porous block.

MINI velocity components use the shape set {lam1, lam2, lam3, 27*lam1*lam2*lam3}
(bubble equals 1 at the barycenter).  BDM1 degrees of freedom are the two
normal-trace moments per edge against {1, s} where s in [-1, 1] runs along
the edge from the lower-index vertex to the higher-index one; both elements
sharing an edge use these same functionals, which makes the normal trace
single-valued without extra sign bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import CONDUIT, POROUS, Mesh
from .quadrature import edge_rule, make_quadrature

SPACE_IDS = (
    "conduit_velocity", "conduit_pressure",
    "fracture_velocity", "fracture_pressure",
    "matrix_velocity", "matrix_pressure",
)

#: quadrature degrees fixed for the whole artifact
ASSEMBLY_DEGREE = 6
EDGE_POINTS = 3        # degree-5 Gauss on edges, enough for degree-4 integrands
ERROR_DEGREE = 8
DATA_EDGE_POINTS = 5   # boundary-data moments of smooth exact fields


@dataclass
class FieldHandle:
    """Coefficient vector of one discrete field at one time level."""

    space: str
    coeffs: np.ndarray
    time: float

    def copy(self) -> "FieldHandle":
        return FieldHandle(self.space, self.coeffs.copy(), self.time)


def mini_values(lam: np.ndarray) -> np.ndarray:
    """Scalar MINI shape values (..., 4) from barycentric coords (..., 3)."""
    bub = 27.0 * lam[..., 0] * lam[..., 1] * lam[..., 2]
    return np.concatenate([lam, bub[..., None]], axis=-1)


class MiniSpace:
    """Velocity/pressure dof management on the conduit subdomain.

    Global dof layout of a Navier-Stokes step system:
      [u_x vertex dofs, u_x bubble dofs, u_y vertex..., u_y bubble..., p vertex dofs]
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.tri_ids = mesh.tri_ids(CONDUIT)
        tris = mesh.triangles[self.tri_ids]
        self.vert_ids = np.unique(tris)
        self.n_vert = len(self.vert_ids)
        self.n_tri = len(self.tri_ids)
        g2l = -np.ones(mesh.n_vertices, dtype=np.int64)
        g2l[self.vert_ids] = np.arange(self.n_vert)
        self.vert_g2l = g2l
        self.tri_verts = g2l[tris]                     # (nt, 3) local vertex ids
        self.coords = mesh.vertices[self.vert_ids]
        self.area = mesh.tri_area[self.tri_ids]
        self.tri_g2l = -np.ones(mesh.n_triangles, dtype=np.int64)
        self.tri_g2l[self.tri_ids] = np.arange(self.n_tri)

        # constant P1 gradients: grad lam_i on each element
        pts = mesh.vertices[tris]
        self.grad_lam = self._p1_gradients(pts)

        self.n_scalar = self.n_vert + self.n_tri       # dofs of one velocity component
        self.n_velocity = 2 * self.n_scalar
        self.n_pressure = self.n_vert
        # element dof table for one velocity component: 3 vertices + bubble
        self.elem_vdofs = np.concatenate(
            [self.tri_verts, self.n_vert + np.arange(self.n_tri)[:, None]], axis=1)

    @staticmethod
    def _p1_gradients(pts: np.ndarray) -> np.ndarray:
        a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
        det = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
               - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        g = np.empty((len(pts), 3, 2))
        g[:, 0, 0] = b[:, 1] - c[:, 1]
        g[:, 0, 1] = c[:, 0] - b[:, 0]
        g[:, 1, 0] = c[:, 1] - a[:, 1]
        g[:, 1, 1] = a[:, 0] - c[:, 0]
        g[:, 2, 0] = a[:, 1] - b[:, 1]
        g[:, 2, 1] = b[:, 0] - a[:, 0]
        return g / det[:, None, None]

    def basis_gradients(self, elems: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Physical gradients of the 4 scalar shapes, shape (..., 4, 2).

        elems indexes local conduit elements; lam broadcasting must match.
        """
        g = self.grad_lam[elems]                       # (..., 3, 2)
        lead = np.broadcast_shapes(lam.shape[:-1], g.shape[:-2])
        g = np.broadcast_to(g, lead + (3, 2))
        lam = np.broadcast_to(lam, lead + (3,))
        l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
        gb = 27.0 * (l2 * l3)[..., None] * g[..., 0, :] \
            + 27.0 * (l1 * l3)[..., None] * g[..., 1, :] \
            + 27.0 * (l1 * l2)[..., None] * g[..., 2, :]
        return np.concatenate([g, gb[..., None, :]], axis=-2)

    def velocity_dof(self, comp: int, scalar_dofs: np.ndarray) -> np.ndarray:
        return comp * self.n_scalar + scalar_dofs

    def velocity_at(self, coeffs: np.ndarray, elems: np.ndarray,
                    lam: np.ndarray) -> np.ndarray:
        """Evaluate a velocity coefficient vector, shape (..., 2)."""
        dofs = self.elem_vdofs[elems]                  # (..., 4)
        vals = mini_values(lam)                        # (..., 4)
        ux = np.sum(coeffs[dofs] * vals, axis=-1)
        uy = np.sum(coeffs[self.n_scalar + dofs] * vals, axis=-1)
        return np.stack([ux, uy], axis=-1)

    def velocity_gradient_at(self, coeffs: np.ndarray, elems: np.ndarray,
                             lam: np.ndarray) -> np.ndarray:
        """Velocity Jacobian d u_i / d x_j, shape (..., 2, 2)."""
        dofs = self.elem_vdofs[elems]
        grads = self.basis_gradients(elems, lam)       # (..., 4, 2)
        gx = np.sum(coeffs[dofs][..., None] * grads, axis=-2)
        gy = np.sum(coeffs[self.n_scalar + dofs][..., None] * grads, axis=-2)
        return np.stack([gx, gy], axis=-2)

    def pressure_at(self, coeffs: np.ndarray, elems: np.ndarray,
                    lam: np.ndarray) -> np.ndarray:
        dofs = self.tri_verts[elems]
        return np.sum(coeffs[dofs] * lam, axis=-1)

    def boundary_vertices(self, labels) -> np.ndarray:
        """Local ids of conduit vertices lying on edges with the given labels."""
        m = self.mesh
        lab = np.isin(m.edge_label, [int(l) for l in labels])
        has_conduit = np.zeros(len(m.edges), dtype=bool)
        for col in (0, 1):
            t = m.edge_tris[:, col]
            has_conduit |= (t >= 0) & (m.tri_tag[np.maximum(t, 0)] == CONDUIT)
        sel = lab & has_conduit
        verts = np.unique(m.edges[sel])
        loc = self.vert_g2l[verts]
        return np.sort(loc[loc >= 0])


class BdmP0Space:
    """BDM1 velocity + P0 pressure dof management on the porous subdomain.

    Darcy step-system layout: [2 dofs per porous edge..., 1 dof per triangle].
    Shape functions are stored per element as monomial coefficients
    c[e, j, comp, k] with fields v(x, y) = c[..0] + c[..1]*x + c[..2]*y.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.tri_ids = mesh.tri_ids(POROUS)
        self.n_tri = len(self.tri_ids)
        self.area = mesh.tri_area[self.tri_ids]
        self.tri_g2l = -np.ones(mesh.n_triangles, dtype=np.int64)
        self.tri_g2l[self.tri_ids] = np.arange(self.n_tri)

        g_edges = np.unique(mesh.tri_edges[self.tri_ids])
        self.edge_ids = g_edges
        self.n_edge = len(g_edges)
        e2l = -np.ones(len(mesh.edges), dtype=np.int64)
        e2l[g_edges] = np.arange(self.n_edge)
        self.edge_g2l = e2l
        self.tri_edge_local = e2l[mesh.tri_edges[self.tri_ids]]  # (nt, 3)

        self.n_u = 2 * self.n_edge
        self.n_p = self.n_tri

        # element -> 6 local velocity dofs, ordered (edge0 m0, edge0 m1, edge1 m0, ...)
        te = self.tri_edge_local
        self.elem_udofs = np.empty((self.n_tri, 6), dtype=np.int64)
        self.elem_udofs[:, 0::2] = 2 * te
        self.elem_udofs[:, 1::2] = 2 * te + 1

        self._build_shapes()

    def _build_shapes(self):
        m = self.mesh
        tris = m.triangles[self.tri_ids]
        nt = self.n_tri
        s2, w2 = edge_rule(2)  # exact for linear integrands on edges

        M = np.zeros((nt, 6, 6))
        for loc in range(3):
            ge = m.tri_edges[self.tri_ids, loc]
            a = m.vertices[m.edges[ge, 0]]
            b = m.vertices[m.edges[ge, 1]]
            nrm = m.edge_normal[ge]
            L = m.edge_length[ge]
            for q, (sq, wq) in enumerate(zip(s2, w2)):
                pt = 0.5 * (a + b) + 0.5 * sq * (b - a)   # (nt, 2)
                ds = 0.5 * L * wq
                # monomial fields mu_j: (1,0),(x,0),(y,0),(0,1),(0,x),(0,y)
                mono = np.stack([
                    np.ones(nt), pt[:, 0], pt[:, 1],
                    np.ones(nt), pt[:, 0], pt[:, 1],
                ], axis=1)
                ncomp = np.concatenate([np.repeat(nrm[:, :1], 3, 1),
                                        np.repeat(nrm[:, 1:], 3, 1)], axis=1)
                tr = mono * ncomp                          # mu_j . n on edge
                M[:, 2 * loc, :] += ds[:, None] * tr
                M[:, 2 * loc + 1, :] += (ds * sq)[:, None] * tr
        A = np.linalg.inv(M)                               # shapes = columns
        # c[e, shape j, comp, monomial k]
        self.coeff = np.stack([A[:, 0:3, :], A[:, 3:6, :]], axis=2).transpose(0, 3, 2, 1)
        self.div = self.coeff[:, :, 0, 1] + self.coeff[:, :, 1, 2]
        self._tris_pts = m.vertices[tris]

    def shapes_at(self, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """All 6 vector shapes at physical points; shape (..., 6, 2)."""
        c = self.coeff[elems]                              # (..., 6, 2, 3)
        one = np.ones_like(pts[..., 0])
        mono = np.stack([one, pts[..., 0], pts[..., 1]], axis=-1)
        return np.einsum("...jck,...k->...jc", c, mono)

    def velocity_at(self, coeffs: np.ndarray, elems: np.ndarray,
                    pts: np.ndarray) -> np.ndarray:
        shp = self.shapes_at(elems, pts)
        dofs = self.elem_udofs[elems]
        return np.sum(coeffs[dofs][..., None] * shp, axis=-2)

    def divergence_of(self, coeffs: np.ndarray, elems: np.ndarray) -> np.ndarray:
        return np.sum(coeffs[self.elem_udofs[elems]] * self.div[elems], axis=-1)

    def edge_moments(self, edge_locals: np.ndarray, f, t: float | None = None,
                     npoints: int = DATA_EDGE_POINTS) -> np.ndarray:
        """Normal-trace moments of a vector field on the given local edges.

        Returns (n, 2): integrals of (f . n_e) against {1, s}.  Used both for
        essential H(div) boundary data and for interpolation.
        """
        m = self.mesh
        ge = self.edge_ids[edge_locals]
        a = m.vertices[m.edges[ge, 0]]
        b = m.vertices[m.edges[ge, 1]]
        nrm = m.edge_normal[ge]
        L = m.edge_length[ge]
        s, w = edge_rule(npoints)
        out = np.zeros((len(ge), 2))
        for sq, wq in zip(s, w):
            pt = 0.5 * (a + b) + 0.5 * sq * (b - a)
            val = f(pt[:, 0], pt[:, 1], t) if t is not None else f(pt[:, 0], pt[:, 1])
            fn = val[..., 0] * nrm[:, 0] + val[..., 1] * nrm[:, 1]
            ds = 0.5 * L * wq
            out[:, 0] += ds * fn
            out[:, 1] += ds * fn * sq
        return out

    def interpolate(self, f, t: float | None = None) -> np.ndarray:
        """Edge-moment (canonical H(div)) interpolation of a vector field."""
        mom = self.edge_moments(np.arange(self.n_edge), f, t)
        coeffs = np.zeros(self.n_u)
        coeffs[0::2] = mom[:, 0]
        coeffs[1::2] = mom[:, 1]
        return coeffs

    def constrained_edges(self, labels) -> np.ndarray:
        """Local edge ids whose normal dofs are essential for the given labels."""
        lab = self.mesh.edge_label[self.edge_ids]
        sel = np.isin(lab, [int(l) for l in labels])
        return np.flatnonzero(sel)


class FeSpaces:
    """Bundle of the discrete spaces living on one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.mini = MiniSpace(mesh)
        self.darcy = BdmP0Space(mesh)
        self._cache: dict = {}

    def n_dofs(self, space: str) -> int:
        return {
            "conduit_velocity": self.mini.n_velocity,
            "conduit_pressure": self.mini.n_pressure,
            "fracture_velocity": self.darcy.n_u,
            "fracture_pressure": self.darcy.n_p,
            "matrix_velocity": self.darcy.n_u,
            "matrix_pressure": self.darcy.n_p,
        }[space]

    def zero_field(self, space: str, t: float = 0.0) -> FieldHandle:
        return FieldHandle(space, np.zeros(self.n_dofs(space)), t)


def build_spaces(mesh: Mesh) -> FeSpaces:
    return FeSpaces(mesh)


# -- basis evaluation (reference API used by tests and dense oracles) -------


def eval_mini_basis(spaces: FeSpaces, elem: int, lam) -> tuple[np.ndarray, np.ndarray]:
    """Scalar MINI shape values and physical gradients at one barycentric point.

    `elem` is a global triangle id in the conduit subdomain.
    """
    mini = spaces.mini
    e = int(mini.tri_g2l[elem])
    if e < 0:
        raise ValueError("element is not in the conduit subdomain")
    lam = np.asarray(lam, dtype=float)
    vals = mini_values(lam)
    grads = mini.basis_gradients(np.array([e]), lam[None, :])[0]
    return vals, grads


def eval_bdm1_basis(spaces: FeSpaces, elem: int, lam) -> tuple[np.ndarray, np.ndarray]:
    """BDM1 vector shape values (6, 2) and divergences (6,) at one point."""
    darcy = spaces.darcy
    e = int(darcy.tri_g2l[elem])
    if e < 0:
        raise ValueError("element is not in the porous subdomain")
    lam = np.asarray(lam, dtype=float)
    pts = lam @ spaces.mesh.vertices[spaces.mesh.triangles[elem]]
    vals = darcy.shapes_at(np.array([e]), pts[None, :])[0]
    return vals, darcy.div[e].copy()


def evaluate_field(spaces: FeSpaces, handle: FieldHandle, elem: int, x):
    """Evaluate a field at a physical point inside a given global element."""
    x = np.asarray(x, dtype=float)
    tag = spaces.mesh.tri_tag[elem]
    lam = spaces.mesh.barycentric(np.array([elem]), x[None, :])
    if handle.space in ("conduit_velocity", "conduit_pressure"):
        if tag != CONDUIT:
            raise ValueError("element subdomain does not match field space")
        e = spaces.mini.tri_g2l[elem]
        if handle.space == "conduit_velocity":
            return spaces.mini.velocity_at(handle.coeffs, np.array([e]), lam)[0]
        return spaces.mini.pressure_at(handle.coeffs, np.array([e]), lam)[0]
    if tag != POROUS:
        raise ValueError("element subdomain does not match field space")
    e = spaces.darcy.tri_g2l[elem]
    if handle.space.endswith("velocity"):
        val = spaces.darcy.velocity_at(handle.coeffs, np.array([e]), x[None, :])[0]
        div = spaces.darcy.divergence_of(handle.coeffs, np.array([e]))[0]
        return val, div
    return handle.coeffs[e]


# -- L2 projection -----------------------------------------------------------


def _quad_points(spaces: FeSpaces, tag: int, degree: int):
    rule = make_quadrature(degree)
    sub = spaces.mini if tag == CONDUIT else spaces.darcy
    tris = spaces.mesh.triangles[sub.tri_ids]
    pts = np.einsum("qk,nkc->nqc", rule.points, spaces.mesh.vertices[tris])
    w = 2.0 * sub.area[:, None] * rule.weights[None, :]
    return rule, pts, w


def l2_project(spaces: FeSpaces, f, space: str, t: float = 0.0) -> FieldHandle:
    """L2-orthogonal projection of an analytic field onto a discrete space.

    `f(x, y, t)` must accept numpy arrays; vector-valued for velocity
    spaces (shape (..., 2)), scalar otherwise.
    """
    from .linalg import TripletBuilder, solve

    if space.startswith("conduit"):
        mini = spaces.mini
        rule, pts, w = _quad_points(spaces, CONDUIT, ERROR_DEGREE)
        vals = f(pts[..., 0], pts[..., 1], t)
        if space == "conduit_velocity":
            bas = mini_values(rule.points)                 # (q, 4)
            tb = TripletBuilder(mini.n_scalar, mini.n_scalar)
            mref = 2.0 * np.einsum("q,qi,qj->ij", rule.weights, bas, bas)
            mloc = mini.area[:, None, None] * mref[None, :, :]
            dofs = mini.elem_vdofs
            tb.add(np.repeat(dofs, 4, axis=1).ravel(),
                   np.tile(dofs, (1, 4)).ravel(), mloc.ravel())
            mass = tb.compress()
            coeffs = np.empty(mini.n_velocity)
            for comp in range(2):
                rhs = np.zeros(mini.n_scalar)
                np.add.at(rhs, dofs, np.einsum("nq,qi->ni", vals[..., comp] * w, bas))
                coeffs[comp * mini.n_scalar:(comp + 1) * mini.n_scalar] = solve(mass, rhs)
            return FieldHandle(space, coeffs, t)
        # conduit pressure: P1 on conduit vertices
        tb = TripletBuilder(mini.n_pressure, mini.n_pressure)
        mref = 2.0 * np.einsum("q,qi,qj->ij", rule.weights, rule.points, rule.points)
        mloc = mini.area[:, None, None] * mref[None, :, :]
        dofs = mini.tri_verts
        tb.add(np.repeat(dofs, 3, axis=1).ravel(),
               np.tile(dofs, (1, 3)).ravel(), mloc.ravel())
        rhs = np.zeros(mini.n_pressure)
        np.add.at(rhs, dofs, np.einsum("nq,qi->ni", vals * w, rule.points))
        return FieldHandle(space, solve(tb.compress(), rhs), t)

    darcy = spaces.darcy
    if space.endswith("pressure"):
        rule, pts, w = _quad_points(spaces, POROUS, ERROR_DEGREE)
        vals = f(pts[..., 0], pts[..., 1], t)
        coeffs = np.sum(vals * w, axis=1) / darcy.area
        return FieldHandle(space, coeffs, t)

    # BDM1 velocity: mass-matrix projection
    from .linalg import TripletBuilder, solve
    rule, pts, w = _quad_points(spaces, POROUS, ERROR_DEGREE)
    vals = f(pts[..., 0], pts[..., 1], t)                  # (n, q, 2)
    shp = darcy.shapes_at(np.arange(darcy.n_tri)[:, None], pts)  # (n, q, 6, 2)
    mloc = np.einsum("nq,nqic,nqjc->nij", w, shp, shp)
    dofs = darcy.elem_udofs
    tb = TripletBuilder(darcy.n_u, darcy.n_u)
    tb.add(np.repeat(dofs, 6, axis=1).ravel(),
           np.tile(dofs, (1, 6)).ravel(), mloc.ravel())
    rhs = np.zeros(darcy.n_u)
    np.add.at(rhs, dofs, np.einsum("nq,nqc,nqic->ni", w, vals, shp))
    return FieldHandle(space, solve(tb.compress(), rhs), t)
