"""Conforming triangle meshes with the edge-based dual geometry needed by
two-point flux finite volumes and P1 finite elements.

A mesh is built from raw vertex/triangle arrays plus boundary edge tags and
is immutable afterwards.  Cell points are circumcenters by default, which is
what makes a Delaunay-type mesh admissible for the two-point flux scheme
(the segment between neighbouring cell points is then orthogonal to the
shared edge).  A barycenter policy exists for finite-element-only meshes.
"""

import numpy as np

__all__ = [
    "MeshError", "NonConforming", "UntaggedBoundaryEdge", "DegenerateTriangle",
    "AdmissibilityViolation", "TriMesh", "regular_refine", "check_admissibility",
    "p1_reference_data", "read_mesh", "write_mesh",
]

AREA_TOL = 1e-14

# edge kinds
INTERNAL, DIRICHLET, NEUMANN = 0, 1, 2


class MeshError(Exception):
    pass


class NonConforming(MeshError):
    pass


class UntaggedBoundaryEdge(MeshError):
    pass


class DegenerateTriangle(MeshError):
    pass


class AdmissibilityViolation(MeshError):
    pass


def _circumcenters(p, tri):
    a = p[tri[:, 0]]
    u = p[tri[:, 1]] - a
    v = p[tri[:, 2]] - a
    d = 2.0 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    uu = (u ** 2).sum(1)
    vv = (v ** 2).sum(1)
    cx = (v[:, 1] * uu - u[:, 1] * vv) / d
    cy = (u[:, 0] * vv - v[:, 0] * uu) / d
    return a + np.stack([cx, cy], axis=1)


def _normalize_tags(boundary_tags):
    """Accept {(a, b): tag} or an iterable of (a, b, tag); keys sorted pairs."""
    if hasattr(boundary_tags, "items"):
        items = [(a, b, t) for (a, b), t in boundary_tags.items()]
    else:
        items = [tuple(row) for row in boundary_tags]
    out = {}
    for a, b, tag in items:
        key = (min(int(a), int(b)), max(int(a), int(b)))
        if key in out and out[key] != tag:
            raise ValueError("conflicting tags for edge %s" % (key,))
        out[key] = str(tag)
    return out


def _parse_tag(tag):
    if tag == "N":
        return NEUMANN, None
    if tag.startswith("D:") and len(tag) > 2:
        return DIRICHLET, tag[2:]
    raise ValueError("bad boundary tag %r (want 'N' or 'D:<name>')" % tag)


class TriMesh:
    """Validated triangle mesh.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, any orientation (stored CCW)
    boundary_tags : mapping {(a, b): tag} or iterable of (a, b, tag),
        one entry per boundary edge; tag is "N" or "D:<name>".
    cell_points : "circumcenter" (default, admissible dual on Delaunay-type
        meshes) or "barycenter" (finite elements only).
    """

    def __init__(self, vertices, triangles, boundary_tags, cell_points="circumcenter"):
        p = np.ascontiguousarray(vertices, dtype=float)
        tri = np.ascontiguousarray(triangles, dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError("vertices must be (nv, 2)")
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValueError("triangles must be (nt, 3)")
        if tri.min(initial=0) < 0 or tri.max(initial=-1) >= len(p):
            raise NonConforming("triangle vertex index out of range")

        # orient CCW, reject degenerate cells
        d1 = p[tri[:, 1]] - p[tri[:, 0]]
        d2 = p[tri[:, 2]] - p[tri[:, 0]]
        area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        flip = area2 < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        areas = 0.5 * np.abs(area2)
        if (areas < AREA_TOL).any():
            k = int(np.argmin(areas))
            raise DegenerateTriangle("triangle %d has area %.3e" % (k, areas[k]))

        used = np.zeros(len(p), dtype=bool)
        used[tri] = True
        if not used.all():
            raise NonConforming("vertex %d not used by any triangle" % int(np.argmin(used)))

        self.vertices = p
        self.triangles = tri
        self.tri_areas = areas

        self._build_edges(_normalize_tags(boundary_tags))
        if cell_points not in ("circumcenter", "barycenter"):
            raise ValueError("cell_points must be 'circumcenter' or 'barycenter'")
        self.cell_point_policy = cell_points
        if cell_points == "circumcenter":
            self.cell_points = _circumcenters(p, tri)
        else:
            self.cell_points = p[tri].mean(axis=1)
        self._build_dual()
        self._build_p1()
        self._shape_regularity()

    # -- construction pieces -------------------------------------------------

    def _build_edges(self, tags):
        tri, p = self.triangles, self.vertices
        nt = len(tri)
        # local edge j of a triangle is (v_j, v_{j+1})
        raw = tri[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        pairs = np.sort(raw, axis=1)
        edges, inv, counts = np.unique(pairs, axis=0, return_inverse=True,
                                       return_counts=True)
        if counts.max(initial=0) > 2:
            e = edges[int(np.argmax(counts))]
            raise NonConforming("edge (%d, %d) shared by more than two triangles"
                                % (int(e[0]), int(e[1])))
        ne = len(edges)
        self.edges = edges
        self.tri_edges = inv.reshape(nt, 3)

        # incident triangles per edge, lower triangle index first
        edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        owner = np.repeat(np.arange(nt), 3)[order]
        starts = np.concatenate([[0], np.cumsum(counts)])
        edge_tris[:, 0] = owner[starts[:-1]]
        second = counts == 2
        edge_tris[second, 1] = owner[starts[:-1][second] + 1]
        self.edge_tris = edge_tris

        boundary = ~second
        self._check_hanging_nodes(boundary)

        kind = np.full(ne, INTERNAL, dtype=np.int8)
        names = [None] * ne
        tags = dict(tags)
        for e in np.flatnonzero(boundary):
            key = (int(edges[e, 0]), int(edges[e, 1]))
            if key not in tags:
                raise UntaggedBoundaryEdge("boundary edge (%d, %d) has no tag" % key)
            kind[e], names[e] = _parse_tag(tags.pop(key))
        if tags:
            key = next(iter(tags))
            raise NonConforming("tag given for non-boundary edge (%d, %d)" % key)
        self.edge_kind = kind
        self.edge_tag_names = names

        bmap = {}
        for e, nm in enumerate(names):
            if nm is not None:
                bmap.setdefault(nm, []).append(e)
        self.boundary_tag_map = {nm: np.array(ix, dtype=np.int64)
                                 for nm, ix in bmap.items()}

        dmask = np.zeros(len(p), dtype=bool)
        dmask[edges[kind == DIRICHLET]] = True
        self.dirichlet_vertex_mask = dmask

    def _check_hanging_nodes(self, boundary):
        # a vertex sitting strictly inside another boundary edge means a
        # neighbouring triangle was refined without matching this one
        p = self.vertices
        be = self.edges[boundary]
        if len(be) == 0:
            raise NonConforming("mesh has no boundary")
        bverts = np.unique(be)
        deg = np.zeros(len(p), dtype=np.int64)
        np.add.at(deg, be.ravel(), 1)
        if (deg[bverts] != 2).any():
            v = int(bverts[np.argmax(deg[bverts] != 2)])
            raise NonConforming("boundary vertex %d has %d boundary edges" % (v, deg[v]))
        a = p[be[:, 0]]
        t = p[be[:, 1]] - a
        L2 = (t ** 2).sum(1)
        q = p[bverts]
        # parameter of projection of every boundary vertex on every boundary edge
        s = ((q[:, None, :] - a[None, :, :]) * t[None, :, :]).sum(-1) / L2[None, :]
        foot = a[None, :, :] + s[..., None] * t[None, :, :]
        dist2 = ((q[:, None, :] - foot) ** 2).sum(-1)
        inside = (s > 1e-12) & (s < 1 - 1e-12) & (dist2 < 1e-24 * L2[None, :])
        off_end = (bverts[:, None] != be[None, :, 0]) & (bverts[:, None] != be[None, :, 1])
        if (inside & off_end).any():
            i, j = np.argwhere(inside & off_end)[0]
            raise NonConforming("vertex %d hangs on boundary edge (%d, %d)"
                                % (int(bverts[i]), int(be[j, 0]), int(be[j, 1])))

    def _build_dual(self):
        p, edges = self.vertices, self.edges
        t = p[edges[:, 1]] - p[edges[:, 0]]
        self.edge_lengths = np.sqrt((t ** 2).sum(1))
        self.edge_midpoints = 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])
        # unit normal oriented away from the first incident cell
        n = np.stack([t[:, 1], -t[:, 0]], axis=1) / self.edge_lengths[:, None]
        xK = self.cell_points[self.edge_tris[:, 0]]
        centK = p[self.triangles[self.edge_tris[:, 0]]].mean(axis=1)
        sign = np.sign(((self.edge_midpoints - centK) * n).sum(1))
        sign[sign == 0] = 1.0
        n *= sign[:, None]
        self.edge_normals = n

        internal = self.edge_tris[:, 1] >= 0
        d = np.empty(len(edges))
        xL = self.cell_points[self.edge_tris[internal, 1]]
        d[internal] = ((xL - xK[internal]) * n[internal]).sum(1)
        d[~internal] = ((self.edge_midpoints[~internal] - xK[~internal])
                        * n[~internal]).sum(1)
        self.edge_dists = d
        with np.errstate(divide="ignore", invalid="ignore"):
            self.transmissibility = np.where(d > 0, self.edge_lengths / d, np.nan)
        # orthogonality defect (radians, small-angle): tangential part of the
        # cell-point segment relative to its length; zero for boundary edges
        defect = np.zeros(len(edges))
        seg = xL - xK[internal]
        seglen = np.sqrt((seg ** 2).sum(1))
        that = t[internal] / self.edge_lengths[internal, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            defect[internal] = np.where(seglen > 0,
                                        np.abs((seg * that).sum(1)) / seglen, 1.0)
        self.orthogonality_defect = defect

    def _build_p1(self):
        p, tri = self.vertices, self.triangles
        a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
        g = np.empty((len(tri), 3, 2))
        inv2A = 1.0 / (2.0 * self.tri_areas)
        for k, (q, r) in enumerate(((b, c), (c, a), (a, b))):
            g[:, k, 0] = (q[:, 1] - r[:, 1]) * inv2A
            g[:, k, 1] = (r[:, 0] - q[:, 0]) * inv2A
        self.hat_gradients = g

    def _shape_regularity(self):
        el = self.edge_lengths[self.tri_edges]
        hK = el.max(axis=1)
        rho = 2.0 * self.tri_areas / el.sum(axis=1)
        self.h = float(hK.max())
        self.gamma = float((hK / rho).max())

    # -- small conveniences --------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    def boundary_tags_as_list(self):
        """Reconstruct the (a, b, tag) list that round-trips through a file."""
        out = []
        for e in np.flatnonzero(self.edge_kind != INTERNAL):
            nm = self.edge_tag_names[e]
            tag = "N" if self.edge_kind[e] == NEUMANN else "D:" + nm
            out.append((int(self.edges[e, 0]), int(self.edges[e, 1]), tag))
        return out

    def require_admissible(self, tol=1e-9):
        rep = check_admissibility(self, tol)
        if not rep.ok:
            e, kind, val = rep.violations[0]
            raise AdmissibilityViolation(
                "%d dual-geometry violations, first: edge %d %s (%.3e)"
                % (len(rep.violations), e, kind, val))


class AdmissibilityReport:
    def __init__(self, violations):
        self.violations = violations

    @property
    def ok(self):
        return not self.violations

    def __repr__(self):
        return "AdmissibilityReport(ok=%s, %d violations)" % (self.ok, len(self.violations))


def check_admissibility(mesh, tol=1e-9):
    """Report edges whose dual geometry breaks the two-point flux assumptions.

    An edge is flagged when the cell-point segment is not orthogonal to it
    (defect above tol, in radians for small angles) or when the signed
    cell-point distance is not positive.
    """
    viol = []
    scale = tol * mesh.edge_lengths
    for e in np.flatnonzero(mesh.orthogonality_defect > tol):
        viol.append((int(e), "orthogonality", float(mesh.orthogonality_defect[e])))
    for e in np.flatnonzero(mesh.edge_dists <= scale):
        viol.append((int(e), "nonpositive_distance", float(mesh.edge_dists[e])))
    return AdmissibilityReport(viol)


def p1_reference_data(mesh):
    """Hat-function gradients (nt, 3, 2) and triangle areas (nt,)."""
    return mesh.hat_gradients, mesh.tri_areas


def regular_refine(mesh):
    """Split every triangle into four similar children via edge midpoints.

    Children of parent t occupy slots 4t .. 4t+3 (three corner children then
    the medial one), so coarse cell t maps onto fine cells 4t..4t+3 exactly.
    Boundary tags are inherited by the two halves of each boundary edge.
    """
    p, tri = mesh.vertices, mesh.triangles
    nv = len(p)
    mids = mesh.edge_midpoints
    mid_id = nv + np.arange(len(mids))

    e01 = mid_id[mesh.tri_edges[:, 0]]
    e12 = mid_id[mesh.tri_edges[:, 1]]
    e20 = mid_id[mesh.tri_edges[:, 2]]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    children = np.stack([
        np.stack([v0, e01, e20], axis=1),
        np.stack([v1, e12, e01], axis=1),
        np.stack([v2, e20, e12], axis=1),
        np.stack([e01, e12, e20], axis=1),
    ], axis=1).reshape(-1, 3)

    tags = []
    for e in np.flatnonzero(mesh.edge_kind != INTERNAL):
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        m = int(mid_id[e])
        tag = "N" if mesh.edge_kind[e] == NEUMANN else "D:" + mesh.edge_tag_names[e]
        tags.append((a, m, tag))
        tags.append((m, b, tag))

    return TriMesh(np.vstack([p, mids]), children, tags,
                   cell_points=mesh.cell_point_policy)


# -- plain text format -------------------------------------------------------
#
#   # optional comment lines anywhere
#   nv nt ne
#   x y                  (nv lines)
#   i j k                (nt lines, 0-based)
#   a b TAG              (ne lines, TAG is N or D:<name>)
#
# ne counts tagged boundary edges only.

def write_mesh(mesh, path):
    tags = mesh.boundary_tags_as_list()
    lines = ["%d %d %d" % (mesh.num_vertices, mesh.num_triangles, len(tags))]
    for x, y in mesh.vertices:
        lines.append("%s %s" % (repr(float(x)), repr(float(y))))
    for i, j, k in mesh.triangles:
        lines.append("%d %d %d" % (i, j, k))
    for a, b, tag in tags:
        lines.append("%d %d %s" % (a, b, tag))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_mesh(path, cell_points="circumcenter"):
    with open(path) as f:
        rows = [ln.split("#", 1)[0].strip() for ln in f]
    rows = [r for r in rows if r]
    nv, nt, ne = (int(tok) for tok in rows[0].split())
    if len(rows) != 1 + nv + nt + ne:
        raise ValueError("mesh file has %d data lines, expected %d"
                         % (len(rows) - 1, nv + nt + ne))
    verts = np.array([[float(t) for t in r.split()] for r in rows[1:1 + nv]])
    tris = np.array([[int(t) for t in r.split()] for r in rows[1 + nv:1 + nv + nt]])
    tags = []
    for r in rows[1 + nv + nt:]:
        a, b, tag = r.split()
        tags.append((int(a), int(b), tag))
    return TriMesh(verts, tris, tags, cell_points=cell_points)
