"""Matched two-subdomain triangulations with interface bookkeeping.

The solver operates on one global conforming triangulation whose cells
carry a subdomain tag (free-flow conduit vs. dual-porosity block).  Edges
separating the two tags form the interface; their stored normal n_d points
from the porous side into the conduit, so n_c = -n_d.

Two constructors are provided: a stacked-unit-squares geometry (conduit on
top of the porous block, interface at y = 1) and an L-shaped wellbore
geometry (vertical injection/production wells plus a horizontal open-hole
section embedded in the porous block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

CONDUIT = 0
POROUS = 1

#: barycentric containment tolerance used everywhere in point location
BARY_TOL = 1e-12


class BoundaryLabel(IntEnum):
    NONE = 0
    INTERFACE = 1
    CONDUIT_EXTERIOR = 2
    CONDUIT_INFLOW = 3
    CONDUIT_OUTFLOW = 4
    DUAL_EXTERIOR = 5
    DUAL_EXTERIOR_1 = 6
    DUAL_EXTERIOR_2 = 7
    DUAL_EXTERIOR_3 = 8
    DUAL_EXTERIOR_4 = 9
    DUAL_EXTERIOR_5 = 10


DUAL_LABELS = frozenset({
    BoundaryLabel.DUAL_EXTERIOR,
    BoundaryLabel.DUAL_EXTERIOR_1,
    BoundaryLabel.DUAL_EXTERIOR_2,
    BoundaryLabel.DUAL_EXTERIOR_3,
    BoundaryLabel.DUAL_EXTERIOR_4,
    BoundaryLabel.DUAL_EXTERIOR_5,
})


@dataclass(frozen=True)
class Example1Geometry:
    """Stacked unit squares: conduit [0,1]x[1,2] over porous [0,1]x[0,1]."""

    x_range: tuple[float, float] = (0.0, 1.0)
    y_bottom: float = 0.0
    y_interface: float = 1.0
    y_top: float = 2.0


@dataclass(frozen=True)
class Example2Geometry:
    """Wellbore geometry: injection well, open-hole channel, production well.

    The porous block is [0,6]x[0,3] minus the channel (2,6)x(1.38,1.63) and
    minus the cased lower part of the production well (5.75,6)x(1.63,3).
    The conduit is the union of [0,0.25]x[3,7], [2,6]x[1.38,1.63] and
    [5.75,6]x[1.63,7].  The wall x=5.75, 1.63<=y<=3 is cased: porous and
    conduit cells touch there but do not exchange mass.
    """

    x_breaks: tuple[float, ...] = (0.0, 0.25, 2.0, 5.75, 6.0)
    y_breaks: tuple[float, ...] = (0.0, 1.38, 1.63, 3.0, 7.0)

    well_left: tuple[float, float] = (0.0, 0.25)
    well_right: tuple[float, float] = (5.75, 6.0)
    channel_y: tuple[float, float] = (1.38, 1.63)
    channel_x: tuple[float, float] = (2.0, 6.0)
    porous_top: float = 3.0
    top: float = 7.0

    def in_conduit(self, x: float, y: float) -> bool:
        if self.well_left[0] < x < self.well_left[1] and self.porous_top < y < self.top:
            return True
        if self.channel_x[0] < x < self.channel_x[1] and self.channel_y[0] < y < self.channel_y[1]:
            return True
        if self.well_right[0] < x < self.well_right[1] and self.channel_y[1] < y < self.top:
            return True
        return False

    def in_porous(self, x: float, y: float) -> bool:
        if not (0.0 < x < 6.0 and 0.0 < y < self.porous_top):
            return False
        if self.channel_x[0] < x < self.channel_x[1] and self.channel_y[0] < y < self.channel_y[1]:
            return False
        if self.well_right[0] < x < self.well_right[1] and self.channel_y[1] < y < self.porous_top:
            return False
        return True


@dataclass
class Mesh:
    """Conforming triangulation with subdomain tags and edge adjacency.

    Triangles are counterclockwise.  Edge vertex pairs are stored with
    ascending vertex index; the stored unit normal is the a->b tangent
    rotated by -90 degrees, which fixes a global orientation per edge.
    """

    vertices: np.ndarray            # (nv, 2)
    triangles: np.ndarray           # (nt, 3) int
    tri_tag: np.ndarray             # (nt,) int, CONDUIT or POROUS

    edges: np.ndarray = field(init=False)          # (ne, 2) int, a < b
    edge_tris: np.ndarray = field(init=False)      # (ne, 2) int, -1 when absent
    edge_label: np.ndarray = field(init=False)     # (ne,) int
    edge_normal: np.ndarray = field(init=False)    # (ne, 2)
    edge_length: np.ndarray = field(init=False)    # (ne,)
    tri_edges: np.ndarray = field(init=False)      # (nt, 3), edge opposite local vertex i
    tri_neighbors: np.ndarray = field(init=False)  # (nt, 3), -1 on boundary
    interface_edges: np.ndarray = field(init=False)
    interface_normal: np.ndarray = field(init=False)  # n_d per interface edge
    h_global: float = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.tri_tag = np.ascontiguousarray(self.tri_tag, dtype=np.int64)
        self._build_topology()
        self._build_geometry_caches()

    # -- construction ----------------------------------------------------

    def _build_topology(self):
        tris = self.triangles
        nt = len(tris)

        pts = self.vertices
        d1 = pts[tris[:, 1]] - pts[tris[:, 0]]
        d2 = pts[tris[:, 2]] - pts[tris[:, 0]]
        areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(areas <= 0.0):
            raise ValueError("triangulation contains non-CCW or degenerate triangles")
        self.tri_area = areas

        # edge i is opposite local vertex i
        pairs = np.concatenate([
            tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]],
        ])
        pairs_sorted = np.sort(pairs, axis=1)
        edges, inv = np.unique(pairs_sorted, axis=0, return_inverse=True)
        ne = len(edges)
        self.edges = edges
        self.tri_edges = inv.reshape(3, nt).T.copy()

        if np.bincount(inv).max() > 2:
            raise ValueError("edge shared by more than two triangles")
        edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        row_tri = np.tile(np.arange(nt), 3)  # pairs row r belongs to triangle r % nt
        order = np.argsort(inv, kind="stable")
        eids, owners = inv[order], row_tri[order]
        first = np.ones(len(eids), dtype=bool)
        first[1:] = eids[1:] != eids[:-1]
        edge_tris[eids[first], 0] = owners[first]
        edge_tris[eids[~first], 1] = owners[~first]
        self.edge_tris = edge_tris

        nbr = np.full((nt, 3), -1, dtype=np.int64)
        for loc in range(3):
            e = self.tri_edges[:, loc]
            both = edge_tris[e]
            mine = np.arange(nt)
            other = np.where(both[:, 0] == mine, both[:, 1], both[:, 0])
            nbr[:, loc] = other
        self.tri_neighbors = nbr

        same = nbr.copy()
        has = same >= 0
        same[has] = np.where(
            self.tri_tag[same[has]] == self.tri_tag.repeat(3).reshape(nt, 3)[has],
            same[has], -1)
        self.tri_neighbors_same_tag = same

        vec = pts[edges[:, 1]] - pts[edges[:, 0]]
        L = np.hypot(vec[:, 0], vec[:, 1])
        self.edge_length = L
        tang = vec / L[:, None]
        self.edge_normal = np.column_stack([tang[:, 1], -tang[:, 0]])

        # interface edges: interior edges whose owners carry different tags
        interior = edge_tris[:, 1] >= 0
        mixed = interior & (self.tri_tag[edge_tris[:, 0]] != self.tri_tag[np.where(interior, edge_tris[:, 1], 0)])
        self.edge_label = np.full(ne, int(BoundaryLabel.NONE), dtype=np.int64)
        self._mixed_interior = mixed

        hs = [np.hypot(*(pts[tris[:, (i + 1) % 3]] - pts[tris[:, i]]).T) for i in range(3)]
        self.h_global = float(np.max(np.stack(hs)))

    def finalize_labels(self, labeler) -> None:
        """Assign boundary/interface labels.

        `labeler(xm, ym, kind)` is called vectorized with edge midpoints;
        kind is "boundary" for one-owner edges and "mixed" for two-owner
        edges with different tags.  It returns an int label array.
        """
        mids = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        boundary = self.edge_tris[:, 1] < 0
        if np.any(boundary):
            self.edge_label[boundary] = labeler(
                mids[boundary, 0], mids[boundary, 1], "boundary")
        if np.any(self._mixed_interior):
            self.edge_label[self._mixed_interior] = labeler(
                mids[self._mixed_interior, 0], mids[self._mixed_interior, 1], "mixed")

        iface = np.flatnonzero(self.edge_label == int(BoundaryLabel.INTERFACE))
        self.interface_edges = iface
        # orient n_d from the porous owner toward the conduit owner
        normals = self.edge_normal[iface].copy()
        for i, e in enumerate(iface):
            t0, t1 = self.edge_tris[e]
            por = t0 if self.tri_tag[t0] == POROUS else t1
            cen = self.vertices[self.triangles[por]].mean(axis=0)
            mid = mids[e]
            if np.dot(normals[i], mid - cen) < 0.0:
                normals[i] = -normals[i]
        self.interface_normal = normals

    def _build_geometry_caches(self):
        """Per-triangle affine inverse maps for barycentric coordinates."""
        pts = self.vertices[self.triangles]
        a = pts[:, 0]
        m = np.stack([pts[:, 1] - a, pts[:, 2] - a], axis=2)  # columns
        det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
        inv = np.empty_like(m)
        inv[:, 0, 0] = m[:, 1, 1] / det
        inv[:, 0, 1] = -m[:, 0, 1] / det
        inv[:, 1, 0] = -m[:, 1, 0] / det
        inv[:, 1, 1] = m[:, 0, 0] / det
        self._tri_origin = a.copy()
        self._tri_invmap = inv

    # -- queries ----------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def tri_ids(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.tri_tag == tag)

    def barycentric(self, tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of pts (n,2) w.r.t. triangles tris (n,)."""
        rel = pts - self._tri_origin[tris]
        lam23 = np.einsum("nij,nj->ni", self._tri_invmap[tris], rel)
        lam1 = 1.0 - lam23[:, 0] - lam23[:, 1]
        return np.column_stack([lam1, lam23])

    def point_in_tri(self, tri: int, pt) -> np.ndarray | None:
        lam = self.barycentric(np.array([tri]), np.asarray(pt, float)[None, :])[0]
        return lam if lam.min() >= -BARY_TOL else None


def locate_point(mesh: Mesh, tag: int, x, hint: int | None = None):
    """Locate x in the tagged subdomain; returns (triangle id, barycentric).

    Walks through edge adjacency from the hint (or the lowest-id tagged
    triangle), falling back to an exhaustive scan when the walk exits the
    subdomain or cycles.  Returns None when x is outside the subdomain.
    """
    pt = np.asarray(x, dtype=float)[None, :]
    if hint is not None and mesh.tri_tag[hint] == tag:
        start = np.array([hint], dtype=np.int64)
    else:
        start = np.array([mesh.tri_ids(tag)[0]], dtype=np.int64)
    tri, lam, ok = locate_points(mesh, tag, pt, start)
    if not ok[0]:
        return None
    return int(tri[0]), lam[0]


def locate_points(mesh: Mesh, tag: int, pts: np.ndarray, start: np.ndarray,
                  max_iter: int | None = None, scan_fallback: bool = True):
    """Vectorized walking point location.

    Returns (tris, barycentric, found).  Points the walk cannot resolve
    (boundary hits in nonconvex regions, cycles) are rescanned against all
    tagged triangles unless scan_fallback is off (hot paths with near-start
    targets treat a blocked walk as "outside"); found=False marks points
    outside the closure.
    """
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    cur = np.array(start, dtype=np.int64).copy()
    tri_out = np.full(n, -1, dtype=np.int64)
    lam_out = np.zeros((n, 3))
    state = np.zeros(n, dtype=np.int8)  # 0 walking, 1 found, 2 needs scan
    if max_iter is None:
        max_iter = 8 + 2 * int(np.sqrt(mesh.n_triangles))

    active = np.arange(n)
    for _ in range(max_iter):
        if len(active) == 0:
            break
        lam = mesh.barycentric(cur[active], pts[active])
        worst = np.argmin(lam, axis=1)
        inside = lam[np.arange(len(active)), worst] >= -BARY_TOL
        hit = active[inside]
        tri_out[hit] = cur[hit]
        lam_out[hit] = lam[inside]
        state[hit] = 1

        rest = active[~inside]
        if len(rest) == 0:
            active = rest
            break
        nxt = mesh.tri_neighbors_same_tag[cur[rest], worst[~inside]]
        blocked = nxt < 0
        state[rest[blocked]] = 2
        go = rest[~blocked]
        cur[go] = nxt[~blocked]
        active = go
    state[active] = 2  # walk budget exhausted

    found = state == 1
    if scan_fallback:
        for i in np.flatnonzero(state == 2):
            res = _scan(mesh, tag, pts[i])
            if res is not None:
                tri_out[i], lam_out[i] = res
                found[i] = True
    return tri_out, lam_out, found


def _scan(mesh: Mesh, tag: int, pt: np.ndarray):
    """Exhaustive containment scan; lowest triangle id wins ties."""
    cand = mesh.tri_ids(tag)
    lam = mesh.barycentric(cand, np.broadcast_to(pt, (len(cand), 2)))
    ok = lam.min(axis=1) >= -BARY_TOL
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return None
    j = idx[0]
    return cand[j], lam[j]


# -- constructors ----------------------------------------------------------


def _split_cells(xs: np.ndarray, ys: np.ndarray, keep_tag):
    """Tensor grid -> right-diagonal triangles, filtered/tagged by cell center.

    keep_tag(xc, yc) returns CONDUIT, POROUS, or None (cell dropped).
    """
    nx, ny = len(xs), len(ys)
    vid = np.arange(nx * ny).reshape(nx, ny)
    tris, tags = [], []
    for i in range(nx - 1):
        for j in range(ny - 1):
            xc = 0.5 * (xs[i] + xs[i + 1])
            yc = 0.5 * (ys[j] + ys[j + 1])
            tag = keep_tag(xc, yc)
            if tag is None:
                continue
            v00, v10 = vid[i, j], vid[i + 1, j]
            v01, v11 = vid[i, j + 1], vid[i + 1, j + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
            tags.extend((tag, tag))
    tris = np.array(tris, dtype=np.int64)
    tags = np.array(tags, dtype=np.int64)

    used = np.unique(tris)
    remap = -np.ones(nx * ny, dtype=np.int64)
    remap[used] = np.arange(len(used))
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([xx.ravel()[used], yy.ravel()[used]])
    return verts, remap[tris], tags


def build_structured_rect_mesh(n: int, geometry: Example1Geometry | None = None) -> Mesh:
    """Uniform mesh of the stacked-squares geometry, n cells per unit length."""
    if n < 2:
        raise ValueError("n must be >= 2")
    geo = geometry or Example1Geometry()
    x0, x1 = geo.x_range
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(geo.y_bottom, geo.y_top, 2 * n + 1)
    yi = geo.y_interface

    def keep_tag(xc, yc):
        return POROUS if yc < yi else CONDUIT

    verts, tris, tags = _split_cells(xs, ys, keep_tag)
    mesh = Mesh(verts, tris, tags)

    def labeler(xm, ym, kind):
        if kind == "mixed":
            if not np.allclose(ym, yi):
                raise ValueError("mixed-tag edge off the interface line")
            return np.full(len(xm), int(BoundaryLabel.INTERFACE))
        lab = np.where(ym < yi, int(BoundaryLabel.DUAL_EXTERIOR),
                       int(BoundaryLabel.CONDUIT_EXTERIOR))
        return lab

    mesh.finalize_labels(labeler)
    return mesh


def _band_points(breaks, h_target):
    out = [breaks[0]]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        m = max(1, round((hi - lo) / h_target))
        out.extend(np.linspace(lo, hi, m + 1)[1:])
    return np.array(out)


def build_wellbore_mesh(h_target: float, geometry: Example2Geometry | None = None) -> Mesh:
    """Quasi-uniform mesh of the wellbore geometry with matched interface."""
    if h_target <= 0:
        raise ValueError("h_target must be positive")
    geo = geometry or Example2Geometry()
    xs = _band_points(geo.x_breaks, h_target)
    ys = _band_points(geo.y_breaks, h_target)

    def keep_tag(xc, yc):
        if geo.in_conduit(xc, yc):
            return CONDUIT
        if geo.in_porous(xc, yc):
            return POROUS
        return None

    verts, tris, tags = _split_cells(xs, ys, keep_tag)
    if len(tris) == 0:
        raise ValueError("degenerate wellbore geometry")
    mesh = Mesh(verts, tris, tags)

    tol = 1e-9
    cx0, cx1 = geo.well_left
    px0, px1 = geo.well_right
    ch_y0, ch_y1 = geo.channel_y

    def labeler(xm, ym, kind):
        lab = np.empty(len(xm), dtype=np.int64)
        if kind == "mixed":
            for i, (x, y) in enumerate(zip(xm, ym)):
                on_iface = (
                    (abs(y - geo.porous_top) < tol and x < cx1)
                    or (abs(y - ch_y0) < tol and x > geo.channel_x[0])
                    or (abs(x - geo.channel_x[0]) < tol and ch_y0 < y < ch_y1)
                    or (abs(y - ch_y1) < tol and geo.channel_x[0] < x < px0)
                )
                # remaining mixed edges are the cased production-well wall
                lab[i] = int(BoundaryLabel.INTERFACE) if on_iface \
                    else int(BoundaryLabel.DUAL_EXTERIOR_3)
            return lab
        for i, (x, y) in enumerate(zip(xm, ym)):
            if abs(y - geo.top) < tol:
                lab[i] = int(BoundaryLabel.CONDUIT_INFLOW) if x < cx1 \
                    else int(BoundaryLabel.CONDUIT_OUTFLOW)
            elif abs(y) < tol:
                lab[i] = int(BoundaryLabel.DUAL_EXTERIOR_1)
            elif abs(x - 6.0) < tol and y < ch_y0:
                lab[i] = int(BoundaryLabel.DUAL_EXTERIOR_2)
            elif abs(x - px0) < tol and ch_y1 < y < geo.porous_top:
                lab[i] = int(BoundaryLabel.DUAL_EXTERIOR_3)
            elif abs(y - geo.porous_top) < tol and cx1 < x < px0:
                lab[i] = int(BoundaryLabel.DUAL_EXTERIOR_4)
            elif abs(x) < tol and y < geo.porous_top:
                lab[i] = int(BoundaryLabel.DUAL_EXTERIOR_5)
            else:
                lab[i] = int(BoundaryLabel.CONDUIT_EXTERIOR)
        return lab

    mesh.finalize_labels(labeler)
    return mesh


def write_mesh_vtk(mesh: Mesh, path) -> None:
    """Dump the triangulation with subdomain tags as legacy ASCII VTK."""
    lines = [
        "# vtk DataFile Version 2.0",
        "mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{x:.12g} {y:.12g} 0")
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    for tri in mesh.triangles:
        lines.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    lines.append(f"CELL_DATA {nt}")
    lines.append("SCALARS subdomain int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(t)) for t in mesh.tri_tag)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
