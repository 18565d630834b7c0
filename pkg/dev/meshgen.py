"""Dev tool: relaxed Delaunay meshes of polygonal domains.

Seeds a hex lattice inside the polygon plus fixed boundary subdivisions,
then alternates scipy Delaunay with smoothing of the interior points.
Produces candidate meshes for the packaged scenario geometries; quality
(conformity, acuteness, dual admissibility under refinement) is verified
with the crosspnp.mesh machinery before freezing.
"""

import numpy as np
from scipy.spatial import Delaunay

import sys
sys.path.insert(0, "/root/pkg/src")
from crosspnp import mesh as M


def polygon_contains(pts, poly):
    """Winding-number containment test, vectorized over pts (N,2)."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        cond = (y0 <= y) != (y1 <= y)
        xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0 + 1e-300)
        inside ^= cond & (x < xi)
    return inside


def dist_to_boundary(pts, poly):
    d2 = np.full(len(pts), np.inf)
    n = len(poly)
    for i in range(n):
        a = np.asarray(poly[i], float)
        b = np.asarray(poly[(i + 1) % n], float)
        t = b - a
        L2 = (t ** 2).sum()
        s = np.clip(((pts - a) @ t) / L2, 0.0, 1.0)
        foot = a + s[:, None] * t
        d2 = np.minimum(d2, ((pts - foot) ** 2).sum(1))
    return np.sqrt(d2)


def boundary_points(poly, counts):
    """Subdivide polygon edge i into counts[i] equal segments.

    Returns (points, seg_edge_index): consecutive points along the loop; the
    mesh boundary must reproduce exactly these segments.
    """
    pts = []
    which = []
    n = len(poly)
    for i in range(n):
        a = np.asarray(poly[i], float)
        b = np.asarray(poly[(i + 1) % n], float)
        for k in range(counts[i]):
            pts.append(a + (b - a) * (k / counts[i]))
            which.append(i)
    return np.array(pts), np.array(which)


def hex_seeds(poly, h, margin, jitter=0.0, seed=0):
    poly = np.asarray(poly, float)
    lo, hi = poly.min(0), poly.max(0)
    dy = h * np.sqrt(3) / 2
    rows = int(np.ceil((hi[1] - lo[1]) / dy)) + 2
    cols = int(np.ceil((hi[0] - lo[0]) / h)) + 2
    pts = []
    for j in range(rows):
        y = lo[1] + j * dy
        off = 0.5 * h if j % 2 else 0.0
        for i in range(cols):
            pts.append((lo[0] + off + i * h, y))
    pts = np.array(pts)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.uniform(-jitter * h, jitter * h, size=pts.shape)
    keep = polygon_contains(pts, poly) & (dist_to_boundary(pts, poly) > margin * h)
    return pts[keep]


def _triangulate(pts, poly):
    tri = Delaunay(pts).simplices
    cent = pts[tri].mean(axis=1)
    return tri[polygon_contains(cent, poly)]


def relax(poly, bpts, ipts, n_iter=80, mode="odt"):
    """Smooth interior points; boundary points stay fixed."""
    nb = len(bpts)
    pts = np.vstack([bpts, ipts])
    for it in range(n_iter):
        tri = _triangulate(pts, poly)
        if mode == "laplace":
            acc = np.zeros_like(pts)
            cnt = np.zeros(len(pts))
            for a, b in ((0, 1), (1, 2), (2, 0)):
                np.add.at(acc, tri[:, a], pts[tri[:, b]])
                np.add.at(acc, tri[:, b], pts[tri[:, a]])
                np.add.at(cnt, tri[:, a], 1)
                np.add.at(cnt, tri[:, b], 1)
            new = acc / np.maximum(cnt, 1)[:, None]
        else:
            # area-weighted circumcenter average (ODT-style)
            cc = _circumcenters(pts, tri)
            ar = _areas(pts, tri)
            acc = np.zeros_like(pts)
            wt = np.zeros(len(pts))
            for a in range(3):
                np.add.at(acc, tri[:, a], ar[:, None] * cc)
                np.add.at(wt, tri[:, a], ar)
            new = acc / np.maximum(wt, 1e-300)[:, None]
        moved = pts.copy()
        moved[nb:] = new[nb:]
        # keep interior points interior
        bad = ~polygon_contains(moved[nb:], poly)
        moved[nb:][bad] = pts[nb:][bad]
        pts = moved
    return pts, _triangulate(pts, poly)


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


def _areas(p, tri):
    d1 = p[tri[:, 1]] - p[tri[:, 0]]
    d2 = p[tri[:, 2]] - p[tri[:, 0]]
    return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def max_angle_deg(p, tri):
    ang = np.zeros((len(tri), 3))
    for k in range(3):
        a = p[tri[:, k]]
        b = p[tri[:, (k + 1) % 3]]
        c = p[tri[:, (k + 2) % 3]]
        u = b - a
        v = c - a
        cosang = (u * v).sum(1) / np.sqrt((u ** 2).sum(1) * (v ** 2).sum(1))
        ang[:, k] = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
    return ang.max()


def tag_boundary(pts, tri, poly, edge_tags):
    """Assign each mesh boundary edge the tag of the polygon edge it lies on."""
    raw = tri[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    pairs = np.sort(raw, axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    bedges = uniq[counts == 1]
    tags = []
    n = len(poly)
    for a, b in bedges:
        mid = 0.5 * (pts[a] + pts[b])
        best, bestd = None, np.inf
        for i in range(n):
            pa = np.asarray(poly[i], float)
            pb = np.asarray(poly[(i + 1) % n], float)
            t = pb - pa
            L2 = (t ** 2).sum()
            s = np.clip(((mid - pa) @ t) / L2, 0.0, 1.0)
            d = np.hypot(*(mid - (pa + s * t)))
            if d < bestd:
                bestd, best = d, i
        if bestd > 1e-9:
            raise RuntimeError("boundary edge (%d,%d) off the polygon by %.2e" % (a, b, bestd))
        tags.append((int(a), int(b), edge_tags[best]))
    return tags


def build_and_check(pts, tri, poly, edge_tags, refine_levels=0, verbose=True):
    tags = tag_boundary(pts, tri, poly, edge_tags)
    m = M.TriMesh(pts, tri, tags)
    rep = M.check_admissibility(m)
    info = dict(nt=m.num_triangles, nv=m.num_vertices,
                max_angle=max_angle_deg(pts, np.asarray(tri)),
                admissible=rep.ok, min_d=float(m.edge_dists.min()),
                area=float(m.tri_areas.sum()), gamma=m.gamma, h=m.h)
    mm = m
    for lev in range(refine_levels):
        mm = M.regular_refine(mm)
        r2 = M.check_admissibility(mm)
        info["admissible_l%d" % (lev + 1)] = r2.ok
        info["min_d_l%d" % (lev + 1)] = float(mm.edge_dists.min())
    if verbose:
        print(info)
    return m, info


def polish(poly, pts, tri, nb, which, hi_deg=87.0, lo_deg=14.0, rounds=8):
    """Angle-penalty optimization: interior points free, boundary points
    slide along their polygon edge, corners fixed, connectivity fixed.
    Re-triangulates after each round; returns at a connectivity fixed point."""
    from scipy.optimize import minimize
    poly = np.asarray(poly, float)
    npoly = len(poly)
    ni = len(pts) - nb
    counts = np.bincount(which, minlength=npoly)
    HI = np.cos(np.radians(hi_deg))
    LO = np.cos(np.radians(lo_deg))

    for rnd in range(rounds):
        A = poly[which]
        B = poly[(which + 1) % npoly]
        T = B - A
        L2 = (T ** 2).sum(1)
        tpar = ((pts[:nb] - A) * T).sum(1) / L2
        corner = tpar < 1e-9
        slide = np.flatnonzero(~corner)

        def assemble(x):
            p = pts.copy()
            p[slide] = A[slide] + x[:len(slide), None] * T[slide]
            p[nb:] = x[len(slide):].reshape(ni, 2)
            return p

        def penalty(x):
            p = assemble(x)
            tp = p[tri]
            pen = 0.0
            for k in range(3):
                a, b, c = tp[:, k], tp[:, (k + 1) % 3], tp[:, (k + 2) % 3]
                u, v = b - a, c - a
                cosang = (u * v).sum(1) / np.sqrt((u ** 2).sum(1) * (v ** 2).sum(1))
                pen += (np.maximum(0.0, HI - cosang) ** 2).sum()
                pen += (np.maximum(0.0, cosang - LO) ** 2).sum()
            d1 = tp[:, 1] - tp[:, 0]
            d2 = tp[:, 2] - tp[:, 0]
            sa = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
            pen += 100.0 * (np.maximum(0.0, 1e-3 - sa) ** 2).sum()
            return pen

        x0 = np.concatenate([tpar[slide], pts[nb:].ravel()])
        bounds = [(max(1e-3, tpar[j] - 0.49 / counts[which[j]]),
                   min(1 - 1e-3, tpar[j] + 0.49 / counts[which[j]])) for j in slide]
        bounds += [(None, None)] * (2 * ni)
        res = minimize(penalty, x0, method="L-BFGS-B", bounds=bounds,
                       options=dict(maxiter=5000, maxfun=500000, ftol=1e-18, gtol=1e-14))
        pts = assemble(res.x)
        tri_new = _triangulate(pts, poly)
        same = set(map(tuple, np.sort(tri, 1))) == set(map(tuple, np.sort(tri_new, 1)))
        print("  polish round %d: pen %.3e maxang %.3f conn_same=%s" %
              (rnd, res.fun, max_angle_deg(pts, tri_new), same))
        tri = tri_new
        if same and res.fun < 1e-18:
            break
    return pts, tri


def _edge_map(tri):
    """edge (a,b) sorted -> list of (tri index, local index of opposite vtx)."""
    em = {}
    for t, (i, j, k) in enumerate(tri):
        for (a, b, opp) in ((i, j, k), (j, k, i), (k, i, j)):
            em.setdefault((min(a, b), max(a, b)), []).append((t, opp))
    return em


def flip_repair(pts, tri, nb, verbose=True):
    """Raise deficient vertex degrees by diagonal flips.

    Interior vertices need >= 5 incident triangles for an all-acute mesh
    (angles at a vertex sum to 360), boundary non-corner ones >= 3 (sum 180).
    Flipping a link edge of a deficient vertex raises its degree by one.
    """
    tri = [list(t) for t in np.asarray(tri)]
    changed = True
    guard = 0
    while changed and guard < 50:
        guard += 1
        changed = False
        arr = np.asarray(tri)
        deg = np.zeros(len(pts), dtype=int)
        np.add.at(deg, arr.ravel(), 1)
        em = _edge_map(arr)
        boundary_v = set()
        for (a, b), owners in em.items():
            if len(owners) == 1:
                boundary_v.update((a, b))
        need = {}
        for v in range(len(pts)):
            lo = 3 if v in boundary_v else 5
            if deg[v] < lo:
                need[v] = lo - deg[v]
        if not need:
            break
        for v in sorted(need):
            # link edges of v: edges of incident triangles not touching v
            for t, tv in enumerate(tri):
                if v not in tv:
                    continue
                i = tv.index(v)
                a, b = tv[(i + 1) % 3], tv[(i + 2) % 3]
                key = (min(a, b), max(a, b))
                owners = em.get(key, [])
                if len(owners) != 2:
                    continue
                (t1, o1), (t2, o2) = owners
                other = t2 if t1 == t else t1
                x = o2 if t1 == t else o1
                # flip (a,b) -> (v,x); require strictly convex quad a v b x
                quad = pts[[a, v, b, x]]
                cross = []
                for q in range(4):
                    u1 = quad[(q + 1) % 4] - quad[q]
                    u2 = quad[(q + 2) % 4] - quad[(q + 1) % 4]
                    cross.append(u1[0] * u2[1] - u1[1] * u2[0])
                cross = np.array(cross)
                if (cross > 1e-12).all() or (cross < -1e-12).all():
                    tri[t] = [a, v, x]
                    tri[other] = [b, x, v]
                    changed = True
                    if verbose:
                        print("  flip: edge (%d,%d) -> (%d,%d) for vtx %d" % (a, b, v, x, v))
                    break
            if changed:
                break
        if changed:
            continue
        if need and verbose:
            print("  flip_repair: could not fix", need)
            break
    return np.asarray(tri)


def polish_fixed(poly, pts, tri, nb, which, hi_deg=87.0, lo_deg=14.0):
    """One fixed-connectivity polish pass (no re-triangulation)."""
    from scipy.optimize import minimize
    poly = np.asarray(poly, float)
    npoly = len(poly)
    ni = len(pts) - nb
    counts = np.bincount(which, minlength=npoly)
    HI = np.cos(np.radians(hi_deg))
    LO = np.cos(np.radians(lo_deg))
    A = poly[which]
    B = poly[(which + 1) % npoly]
    T = B - A
    L2 = (T ** 2).sum(1)
    tpar = ((pts[:nb] - A) * T).sum(1) / L2
    corner = tpar < 1e-9
    slide = np.flatnonzero(~corner)

    def assemble(x):
        p = pts.copy()
        p[slide] = A[slide] + x[:len(slide), None] * T[slide]
        p[nb:] = x[len(slide):].reshape(ni, 2)
        return p

    def penalty(x):
        p = assemble(x)
        tp = p[tri]
        pen = 0.0
        for k in range(3):
            a, b, c = tp[:, k], tp[:, (k + 1) % 3], tp[:, (k + 2) % 3]
            u, v = b - a, c - a
            cosang = (u * v).sum(1) / np.sqrt((u ** 2).sum(1) * (v ** 2).sum(1))
            pen += (np.maximum(0.0, HI - cosang) ** 2).sum()
            pen += (np.maximum(0.0, cosang - LO) ** 2).sum()
        d1 = tp[:, 1] - tp[:, 0]
        d2 = tp[:, 2] - tp[:, 0]
        sa = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        pen += 100.0 * (np.maximum(0.0, 1e-3 - sa) ** 2).sum()
        return pen

    x0 = np.concatenate([tpar[slide], pts[nb:].ravel()])
    bounds = [(max(1e-3, tpar[j] - 0.49 / counts[which[j]]),
               min(1 - 1e-3, tpar[j] + 0.49 / counts[which[j]])) for j in slide]
    bounds += [(None, None)] * (2 * ni)
    res = minimize(penalty, x0, method="L-BFGS-B", bounds=bounds,
                   options=dict(maxiter=8000, maxfun=800000, ftol=1e-18, gtol=1e-14))
    return assemble(res.x), res.fun


def _tri_min_angle(pts, t):
    p = pts[list(t)]
    best = np.inf
    for k in range(3):
        a = p[(k + 1) % 3] - p[k]
        b = p[(k + 2) % 3] - p[k]
        c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        best = min(best, np.degrees(np.arccos(np.clip(c, -1, 1))))
    return best


def degree_bounds(pts, tri, hi_deg=90.0, lo_deg=14.0):
    """Per-vertex (degree, k_min, k_max) from incident-angle sums.

    A vertex whose incident triangles span total angle theta needs more than
    theta/hi triangles for every incident angle to stay below hi, and at most
    theta/lo of them for every incident angle to stay above lo.
    """
    nv = len(pts)
    deg = np.zeros(nv, int)
    angsum = np.zeros(nv)
    for t in tri:
        for k in range(3):
            v = t[k]
            a = pts[t[(k + 1) % 3]] - pts[v]
            b = pts[t[(k + 2) % 3]] - pts[v]
            c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
            deg[v] += 1
            angsum[v] += np.degrees(np.arccos(np.clip(c, -1, 1)))
    kmin = np.floor(angsum / hi_deg + 1e-9).astype(int) + 1
    kmax = np.maximum(1, np.floor(angsum / lo_deg + 1e-9).astype(int))
    return deg, kmin, kmax


def flip_repair2(pts, tri, hi_deg=90.0, lo_deg=14.0, verbose=True):
    """Flip diagonals until every vertex degree fits its angle-sum bounds."""
    tri = [list(t) for t in np.asarray(tri)]
    for _ in range(200):
        arr = np.asarray(tri)
        deg, kmin, kmax = degree_bounds(pts, arr, hi_deg, lo_deg)
        low = np.flatnonzero(deg < kmin)
        high = np.flatnonzero(deg > kmax)
        if len(low) == 0 and len(high) == 0:
            return arr, True
        em = _edge_map(arr)
        moved = False

        def do_flip(key, t1, o1, t2, o2):
            a, b = key
            tri[t1] = [a, o1, o2]
            tri[t2] = [b, o2, o1]

        # raise a deficient vertex: flip one of its link edges
        for v in low:
            best = None
            for t, tv in enumerate(tri):
                if v not in tv:
                    continue
                i = tv.index(v)
                a, b = tv[(i + 1) % 3], tv[(i + 2) % 3]
                key = (min(a, b), max(a, b))
                owners = em.get(key, [])
                if len(owners) != 2:
                    continue
                (t1, o1), (t2, o2) = owners
                x = o2 if o1 == v else o1
                if x == v:
                    continue
                quad = pts[[key[0], o1 if o1 != v else v, key[1], x]]
                quad = pts[[key[0], v, key[1], x]]
                cross = []
                for q in range(4):
                    u1 = quad[(q + 1) % 4] - quad[q]
                    u2 = quad[(q + 2) % 4] - quad[(q + 1) % 4]
                    cross.append(u1[0] * u2[1] - u1[1] * u2[0])
                cross = np.array(cross)
                if not ((cross > 1e-12).all() or (cross < -1e-12).all()):
                    continue
                if deg[key[0]] - 1 < kmin[key[0]] or deg[key[1]] - 1 < kmin[key[1]]:
                    continue
                q = min(_tri_min_angle(pts, (key[0], v, x)),
                        _tri_min_angle(pts, (key[1], x, v)))
                if best is None or q > best[0]:
                    best = (q, key, owners, x)
            if best is not None:
                q, key, ((t1, o1), (t2, o2)), x = best
                do_flip(key, t1, o1, t2, o2)
                if verbose:
                    print("  raise %d: flip %s -> (%d,%d) minang %.1f" % (v, key, o1, o2, q))
                moved = True
                break
        if moved:
            continue
        # lower an overloaded vertex: flip an incident interior edge away
        for v in high:
            best = None
            for (a, b), owners in em.items():
                if v not in (a, b) or len(owners) != 2:
                    continue
                (t1, o1), (t2, o2) = owners
                w = a if b == v else b
                quad = pts[[v, o1, w, o2]]
                cross = []
                for q in range(4):
                    u1 = quad[(q + 1) % 4] - quad[q]
                    u2 = quad[(q + 2) % 4] - quad[(q + 1) % 4]
                    cross.append(u1[0] * u2[1] - u1[1] * u2[0])
                cross = np.array(cross)
                if not ((cross > 1e-12).all() or (cross < -1e-12).all()):
                    continue
                if deg[v] - 1 < kmin[v] or deg[w] - 1 < kmin[w]:
                    continue
                if deg[o1] + 1 > kmax[o1] or deg[o2] + 1 > kmax[o2]:
                    continue
                q = min(_tri_min_angle(pts, (o1, o2, v)),
                        _tri_min_angle(pts, (o1, o2, w)))
                if best is None or q > best[0]:
                    best = (q, (a, b), owners)
            if best is not None:
                q, key, ((t1, o1), (t2, o2)) = best
                do_flip(key, t1, o1, t2, o2)
                if verbose:
                    print("  lower %d: flip %s -> (%d,%d) minang %.1f" % (v, key, o1, o2, q))
                moved = True
                break
        if not moved:
            if verbose:
                print("  flip_repair2 stuck; low:", list(low), "high:", list(high))
            return np.asarray(tri), False
    return np.asarray(tri), False


def polish_fast(poly, pts, tri, nb, which, hi_deg=85.0, lo_deg=22.0,
                maxiter=3000):
    """Fixed-connectivity polish with analytic penalty gradient."""
    from scipy.optimize import minimize
    poly = np.asarray(poly, float)
    npoly = len(poly)
    ni = len(pts) - nb
    counts = np.bincount(which, minlength=npoly)
    HI = np.cos(np.radians(hi_deg))
    LO = np.cos(np.radians(lo_deg))
    A = poly[which]
    B = poly[(which + 1) % npoly]
    T = B - A
    L2 = (T ** 2).sum(1)
    tpar = ((pts[:nb] - A) * T).sum(1) / L2
    corner = tpar < 1e-9
    slide = np.flatnonzero(~corner)
    ns = len(slide)
    tri = np.asarray(tri)

    def assemble(x):
        p = pts.copy()
        p[slide] = A[slide] + x[:ns, None] * T[slide]
        p[nb:] = x[ns:].reshape(ni, 2)
        return p

    def penalty_grad(x):
        p = assemble(x)
        g = np.zeros_like(p)
        tp = p[tri]
        pen = 0.0
        for k in range(3):
            ia, ib, ic = tri[:, k], tri[:, (k + 1) % 3], tri[:, (k + 2) % 3]
            a, b, c = tp[:, k], tp[:, (k + 1) % 3], tp[:, (k + 2) % 3]
            u, v = b - a, c - a
            nu = np.sqrt((u ** 2).sum(1)); nv = np.sqrt((v ** 2).sum(1))
            dot = (u * v).sum(1)
            cos = dot / (nu * nv)
            r1 = np.maximum(0.0, HI - cos)
            r2 = np.maximum(0.0, cos - LO)
            pen += (r1 ** 2).sum() + (r2 ** 2).sum()
            dp_dcos = -2.0 * r1 + 2.0 * r2
            inv = 1.0 / (nu * nv)
            dcos_db = inv[:, None] * (v - (dot / nu ** 2)[:, None] * u)
            dcos_dc = inv[:, None] * (u - (dot / nv ** 2)[:, None] * v)
            dcos_da = -(dcos_db + dcos_dc)
            np.add.at(g, ia, dp_dcos[:, None] * dcos_da)
            np.add.at(g, ib, dp_dcos[:, None] * dcos_db)
            np.add.at(g, ic, dp_dcos[:, None] * dcos_dc)
        a, b, c = tp[:, 0], tp[:, 1], tp[:, 2]
        f = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        sa = 0.5 * f
        r3 = np.maximum(0.0, 1e-3 - sa)
        pen += 100.0 * (r3 ** 2).sum()
        dp_df = -100.0 * r3
        ga = np.column_stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0]])
        gb = np.column_stack([c[:, 1] - a[:, 1], a[:, 0] - c[:, 0]])
        gc = np.column_stack([a[:, 1] - b[:, 1], b[:, 0] - a[:, 0]])
        np.add.at(g, tri[:, 0], dp_df[:, None] * ga)
        np.add.at(g, tri[:, 1], dp_df[:, None] * gb)
        np.add.at(g, tri[:, 2], dp_df[:, None] * gc)
        gx = np.empty(ns + 2 * ni)
        gx[:ns] = (g[slide] * T[slide]).sum(1)
        gx[ns:] = g[nb:].ravel()
        return pen, gx

    x0 = np.concatenate([tpar[slide], pts[nb:].ravel()])
    bounds = [(max(1e-3, tpar[j] - 0.49 / counts[which[j]]),
               min(1 - 1e-3, tpar[j] + 0.49 / counts[which[j]])) for j in slide]
    bounds += [(None, None)] * (2 * ni)
    res = minimize(penalty_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options=dict(maxiter=maxiter, maxfun=maxiter * 3, ftol=1e-18, gtol=1e-14))
    return assemble(res.x), res.fun
