"""Independent scalar reimplementation of the two-point-flux residual.

Everything here is deliberately written cell by cell and edge by edge,
recomputing the dual geometry from raw vertex coordinates, so that it can
serve as an oracle for the vectorized solver assembly.
"""

import numpy as np


def circumcenter(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay)
          + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx)
          + (cx**2 + cy**2) * (bx - ax)) / d
    return np.array([ux, uy])


def triangle_area(a, b, c):
    return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1])
                     - (c[0] - a[0]) * (b[1] - a[1]))


def brute_force_residual(mesh, system, scenario, u, phi, u_old,
                         tau, stationary=False):
    """Implicit-Euler finite-volume residual, assembled edge by edge.

    Follows the double-upwind flux definition literally: for each cell K
    and edge s with far side L,

        F = -tau_s * D_i * (u0max * D(u_i) - u_up * V),
        V = D(u_0) - u0hat * beta * z_i * D(phi),

    with u0hat picked by the sign of z_i*D(phi), u_up by the sign of V
    (">= 0" keeping the K-side value), and u0max the larger of the two
    solvent values.  Row layout matches the solver: species-major
    transport rows, then the Poisson rows; the first cell's Poisson row
    is replaced by a gauge pin when no contact edges exist.
    """
    pts = np.asarray(mesh.vertices, dtype=float)
    tris = np.asarray(mesh.triangles)
    n = system.n
    T = len(tris)
    u = np.asarray(u, dtype=float).reshape(n, T)
    u_old = np.asarray(u_old, dtype=float).reshape(n, T)
    phi = np.asarray(phi, dtype=float)

    centers = np.array([circumcenter(*pts[t]) for t in tris])
    areas = np.array([triangle_area(*pts[t]) for t in tris])

    # immobile profile sampled the way the solver does: cell values are
    # means over the three edge midpoints.
    def cell_profile(fn):
        vals = np.empty(T)
        for t, tri in enumerate(tris):
            mids = np.array([(pts[tri[j]] + pts[tri[(j + 1) % 3]]) / 2.0
                             for j in range(3)])
            vals[t] = np.mean(fn(mids))
        return vals

    c_cell = cell_profile(scenario.immobile.c_at)
    f_cell = cell_profile(scenario.immobile.f_at)

    regions = scenario.boundary.regions
    tag_of = {}
    for a, b, tag in mesh.boundary_tags_as_list():
        name = tag[2:] if tag.startswith("D:") else tag
        tag_of[(min(a, b), max(a, b))] = name

    # edge -> (owner cell, far cell or -1)
    owner = {}
    for t, tri in enumerate(tris):
        for j in range(3):
            key = (min(tri[j], tri[(j + 1) % 3]),
                   max(tri[j], tri[(j + 1) % 3]))
            owner.setdefault(key, []).append(t)

    u0 = 1.0 - u.sum(axis=0) - c_cell

    R_t = np.zeros((n, T))
    if not stationary:
        R_t += areas[None, :] * (u - u_old) / tau
    R_p = -areas * (u.T @ system.z + f_cell)

    any_dirichlet = False
    for (va, vb), cells in owner.items():
        a, b = pts[va], pts[vb]
        mid = (a + b) / 2.0
        length = float(np.hypot(*(b - a)))
        K = cells[0]
        if len(cells) == 2:
            L = cells[1]
            dist = float(np.hypot(*(centers[L] - centers[K])))
            far = (u[:, L], u0[L], phi[L])
        else:
            tag = tag_of[(va, vb)]
            if tag not in regions:
                continue  # insulating: mirrored far side, zero flux
            any_dirichlet = True
            L = None
            dist = float(np.hypot(*(centers[K] - mid)))
            vals = regions[tag]
            ubar = np.asarray(vals.u, dtype=float)
            u0bar = 1.0 - ubar.sum() - float(scenario.immobile.c_at(
                mid[None, :])[0])
            far = (ubar, u0bar, float(vals.phi))
        tau_s = length / dist

        uK, u0K, phiK = u[:, K], u0[K], phi[K]
        uF, u0F, phiF = far
        du0 = u0F - u0K
        dphi = phiF - phiK
        for i in range(n):
            s = system.z[i] * dphi
            u0hat = u0K if s >= 0.0 else u0F
            V = du0 - u0hat * system.beta * s
            u_up = uK[i] if V >= 0.0 else uF[i]
            u0max = max(u0K, u0F)
            F = -tau_s * system.D[i] * (u0max * (uF[i] - uK[i]) - u_up * V)
            R_t[i, K] += F
            if L is not None:
                R_t[i, L] -= F
        g = tau_s * dphi
        R_p[K] -= system.lambda2 * g
        if L is not None:
            R_p[L] += system.lambda2 * g

    if not any_dirichlet:
        R_p[0] = phi[0]
    return np.concatenate([R_t.reshape(-1), R_p])
