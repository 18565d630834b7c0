"""Norms, projections, entropy tracking, currents, and convergence orders.

Everything here consumes solver states from either scheme: nodal states
from the P1 scheme are dispatched on type and projected to cellwise
constants where a cross-scheme comparison needs a common space.
"""

from dataclasses import dataclass, field

import numpy as np

from .fem import FemProblem, NodalState
from .fvm import CellState, FvProblem
from .model import entropy_density, from_entropy

__all__ = [
    "DiagnosticsError", "MeshMismatch", "CrossSectionOutsideDomain",
    "MissingPair", "ZeroDenominator", "InsufficientRows",
    "TimeSeriesRecord", "ConvergenceTable",
    "project_fe_to_fv", "cell_fields", "norms", "entropy_total",
    "current", "rectification", "estimate_eoc", "restrict_cell_values",
    "simulate", "nested_convergence",
]


class DiagnosticsError(Exception):
    pass


class MeshMismatch(DiagnosticsError):
    pass


class CrossSectionOutsideDomain(DiagnosticsError):
    pass


class MissingPair(DiagnosticsError):
    pass


class ZeroDenominator(DiagnosticsError):
    pass


class InsufficientRows(DiagnosticsError):
    pass


@dataclass
class TimeSeriesRecord:
    """One output row of a time-stepping run."""

    step: int
    time: float
    entropy_rel: float
    masses: np.ndarray
    l1_dists: np.ndarray
    min_u0: float
    max_sum_u: float
    newton_iters: int
    min_u: np.ndarray = None      # per-species minima
    max_u: np.ndarray = None      # per-species maxima
    max_u0: float = None


@dataclass
class ConvergenceTable:
    """Mesh sizes, per-quantity errors, and fitted log-log slopes."""

    hs: np.ndarray            # (M,) strictly decreasing
    labels: list              # Q quantity names
    errors: np.ndarray        # (M, Q)
    slopes: np.ndarray = field(default=None)

    def __post_init__(self):
        hs = np.asarray(self.hs, dtype=float)
        if (np.diff(hs) >= 0).any():
            raise ValueError("mesh sizes must decrease down the table")
        self.hs = hs
        self.errors = np.asarray(self.errors, dtype=float)
        if self.slopes is None and len(hs) >= 3 and (self.errors > 0).all():
            self.slopes = estimate_eoc(self)


def project_fe_to_fv(nodal_values, mesh):
    """Cellwise averages of a P1 nodal field: the mean of the three vertex
    values (exact for affine fields)."""
    vals = np.asarray(nodal_values, dtype=float)
    if vals.shape[-1] != mesh.num_vertices:
        raise MeshMismatch("nodal array has %d entries, mesh has %d vertices"
                           % (vals.shape[-1], mesh.num_vertices))
    return vals[..., mesh.triangles].mean(axis=-1)


def cell_fields(problem, state):
    """Cellwise concentrations and potential for either scheme's state."""
    if isinstance(state, CellState):
        _require_cells(problem.mesh, state.u)
        return state.u, state.phi
    u_vert, _ = problem.vertex_concentrations(state)
    u_cells = project_fe_to_fv(u_vert.T, problem.mesh)
    phi_cells = project_fe_to_fv(state.phi, problem.mesh)
    return u_cells, phi_cells


def _require_cells(mesh, arr):
    if np.asarray(arr).shape[-1] != mesh.num_triangles:
        raise MeshMismatch("cell array has %d entries, mesh has %d cells"
                           % (np.asarray(arr).shape[-1], mesh.num_triangles))


def norms(a, b, mesh, which="l1"):
    """Discrete distances between two fields on one mesh.

    ``which``: "l1" / "linf" for cellwise fields (m(K)-weighted / max),
    "l1_nodal" / "linf_nodal" for nodal fields (lumped-area weights / max).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MeshMismatch("field shapes differ: %s vs %s"
                           % (a.shape, b.shape))
    d = np.abs(a - b)
    if which == "l1":
        _require_cells(mesh, a)
        return float((mesh.tri_areas * d).sum())
    if which == "linf":
        _require_cells(mesh, a)
        return float(d.max())
    if which in ("l1_nodal", "linf_nodal"):
        if a.shape[-1] != mesh.num_vertices:
            raise MeshMismatch("nodal array has %d entries, mesh has %d "
                               "vertices" % (a.shape[-1], mesh.num_vertices))
        if which == "linf_nodal":
            return float(d.max())
        w = np.zeros(mesh.num_vertices)
        np.add.at(w, mesh.triangles.ravel(),
                  np.repeat(mesh.tri_areas / 3.0, 3))
        return float((w * d).sum())
    raise ValueError("unknown norm %r" % which)


def _edge_quad_weights(mesh):
    w = np.zeros(mesh.num_edges)
    np.add.at(w, mesh.tri_edges.ravel(),
              np.repeat(mesh.tri_areas / 3.0, 3))
    return w


def entropy_total(state, reference, problem):
    """Free energy of ``state`` relative to ``reference`` (same scheme).

    Concentration part: integral of sum_i u_i log(u_i/u_i^ref) - u_i +
    u_i^ref over all species including the solvent.  Electric part:
    (beta lambda2 / 2) times the squared potential-difference gradient in
    the scheme's own discrete form.
    """
    system = problem.system
    mesh = problem.mesh
    if isinstance(state, CellState):
        if not isinstance(reference, CellState):
            raise MeshMismatch("reference must be a cell state")
        _require_cells(mesh, state.u)
        _require_cells(mesh, reference.u)
        full = np.concatenate([state.u, problem.u0_of(state.u)[None, :]])
        ref = np.concatenate([reference.u,
                              problem.u0_of(reference.u)[None, :]])
        h = entropy_density(full.T, ref.T)
        bulk = float((mesh.tri_areas * h).sum())
        # contact data enters both states' edge differences and cancels
        _, _, pK, _, _, pO = problem.edge_values(state.u, state.phi)
        _, _, rK, _, _, rO = problem.edge_values(reference.u, reference.phi)
        g = (pO - pK) - (rO - rK)
        elec = 0.5 * system.beta * system.lambda2 \
            * float((problem.tau_e * g * g).sum())
        return bulk + elec
    if not isinstance(reference, NodalState):
        raise MeshMismatch("reference must be a nodal state")
    if state.w.shape[-1] != mesh.num_vertices:
        raise MeshMismatch("state lives on a different mesh")
    u_e, u0_e = problem.edge_concentrations(state)
    r_e, r0_e = problem.edge_concentrations(reference)
    full = np.concatenate([u_e, u0_e[:, None]], axis=1)
    ref = np.concatenate([r_e, r0_e[:, None]], axis=1)
    h = entropy_density(full, ref)
    bulk = float((_edge_quad_weights(mesh) * h).sum())
    dphi = state.phi - reference.phi
    g = np.einsum("tk,tkd->td", dphi[mesh.triangles], mesh.hat_gradients)
    elec = 0.5 * system.beta * system.lambda2 \
        * float((mesh.tri_areas * (g ** 2).sum(axis=1)).sum())
    return bulk + elec


def current(state, problem, cross_section_x):
    """Signed electric current through the vertical line x = const.

    Nodal states: line integral of -sum_i z_i F_i . e_x with
    F_i = -D_i u_i u_0 grad w_i, one midpoint evaluation per cut triangle.
    Cell states: sum of the upwind fluxes through the edges separating the
    cells left of the line from those right of it.
    """
    mesh = problem.mesh
    x0 = float(cross_section_x)
    xs = mesh.vertices[:, 0]
    if not xs.min() < x0 < xs.max():
        raise CrossSectionOutsideDomain("x = %g is outside [%g, %g]"
                                        % (x0, xs.min(), xs.max()))
    system = problem.system
    if isinstance(state, CellState):
        _require_cells(mesh, state.u)
        F, _ = problem.flux_terms(state.u, state.phi)
        left = mesh.cell_points[:, 0] <= x0
        K, L = problem.K, problem.L
        crossing = problem.internal & (left[K] != left[L])
        if not crossing.any():
            raise CrossSectionOutsideDomain(
                "no cell interface crosses x = %g" % x0)
        sign = np.where(left[K[crossing]], 1.0, -1.0)
        flow = (F[:, crossing] * sign[None, :]).sum(axis=1)
        return float(-(system.z * flow).sum())

    # nodal state: nudge off mesh lines so every cut has positive length
    if np.abs(xs - x0).min() < 1e-12 * max(1.0, xs.max() - xs.min()):
        x0 += 1e-9 * (xs.max() - xs.min())
    tri = mesh.triangles
    tx = xs[tri]
    cut = (tx.min(axis=1) < x0) & (tx.max(axis=1) > x0)
    if not cut.any():
        raise CrossSectionOutsideDomain("no triangle crosses x = %g" % x0)
    total = 0.0
    immobile = problem.scenario.immobile
    for t in np.flatnonzero(cut):
        verts = mesh.vertices[tri[t]]
        ys = []
        for a in range(3):
            b = (a + 1) % 3
            xa, xb = verts[a, 0], verts[b, 0]
            if (xa - x0) * (xb - x0) < 0:
                s = (x0 - xa) / (xb - xa)
                ys.append(verts[a, 1] + s * (verts[b, 1] - verts[a, 1]))
        if len(ys) < 2:
            continue
        y_lo, y_hi = min(ys), max(ys)
        length = y_hi - y_lo
        mid = np.array([x0, 0.5 * (y_lo + y_hi)])
        # barycentric coordinates of the midpoint
        A = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
        lam12 = np.linalg.solve(A, mid - verts[0])
        lam = np.array([1.0 - lam12.sum(), lam12[0], lam12[1]])
        w_mid = state.w[:, tri[t]] @ lam
        phi_mid = state.phi[tri[t]] @ lam
        c_mid = float(np.asarray(immobile.c_at(mid[None, :]))[0])
        u_mid, u0_mid = from_entropy(w_mid, phi_mid, system, c=c_mid)
        gwx = state.w[:, tri[t]] @ mesh.hat_gradients[t, :, 0]
        total += float((system.z * system.D * u_mid * u0_mid * gwx).sum()) \
            * length
    return total


def rectification(cv_curve):
    """Current asymmetry r(U) = |I(U) / I(-U)| for each positive voltage.

    ``cv_curve``: iterable of (voltage, current) pairs.
    """
    data = {float(u): float(i) for u, i in cv_curve}
    out = {}
    for u in sorted(data):
        if u <= 0:
            continue
        if -u not in data:
            raise MissingPair("no -%g point to pair with %g" % (u, u))
        if data[-u] == 0.0:
            raise ZeroDenominator("I(-%g) is zero" % u)
        out[u] = abs(data[u] / data[-u])
    return out


def estimate_eoc(table):
    """Least-squares slopes of log(error) against log(h), one per column."""
    hs = np.asarray(table.hs, dtype=float)
    errors = np.asarray(table.errors, dtype=float)
    if len(hs) < 3:
        raise InsufficientRows("need at least 3 rows, got %d" % len(hs))
    if (errors <= 0).any():
        raise ValueError("errors must be positive for a log-log fit")
    x = np.log(hs)
    slopes = np.empty(errors.shape[1])
    for q in range(errors.shape[1]):
        slopes[q] = np.polyfit(x, np.log(errors[:, q]), 1)[0]
    return slopes


def restrict_cell_values(values, fine_mesh, levels):
    """Area-weighted restriction of cell values onto the coarse ancestors.

    ``levels`` is the number of regular refinements separating the meshes;
    children of coarse cell t occupy fine slots 4t..4t+3 at each level.
    """
    vals = np.asarray(values, dtype=float)
    areas = fine_mesh.tri_areas
    for _ in range(int(levels)):
        va = (vals * areas).reshape(*vals.shape[:-1], -1, 4).sum(axis=-1)
        areas_c = areas.reshape(-1, 4).sum(axis=-1)
        vals = va / areas_c
        areas = areas_c
    return vals


def _state_monitors(problem, state):
    """Masses and pointwise extrema in the scheme's own discrete sense."""
    if isinstance(state, CellState):
        u = state.u                           # (n, T)
        masses = (problem.mesh.tri_areas * u).sum(axis=1)
        u0 = problem.u0_of(u)
        sat = u.sum(axis=0) + problem.c_cell
        return (masses, float(u0.min()), float(sat.max()),
                u.min(axis=1), u.max(axis=1), float(u0.max()))
    u_e, u0_e = problem.edge_concentrations(state)
    wq = _edge_quad_weights(problem.mesh)
    masses = (wq[:, None] * u_e).sum(axis=0)
    u_v, u0_v = problem.vertex_concentrations(state)   # (N, n), (N,)
    sat = u_v.sum(axis=1) + problem.c_vert
    return (masses, float(u0_v.min()), float(sat.max()),
            u_v.min(axis=0), u_v.max(axis=0), float(u0_v.max()))


def simulate(problem, state0, num_steps, reference=None, output_every=1,
             mode=None):
    """Run ``num_steps`` implicit Euler steps and collect time-series rows.

    ``reference`` (a state of the same scheme) feeds the relative entropy
    and L1-distance columns; without it those columns are zero.  Returns
    (records, final_state).
    """
    state = state0
    records = []
    tau = problem.params.tau
    kwargs = {} if mode is None else {"mode": mode}
    ref_cells = None if reference is None \
        else cell_fields(problem, reference)[0]
    for k in range(1, int(num_steps) + 1):
        state, info = problem.advance(state, **kwargs)
        if k % output_every and k != num_steps:
            continue
        masses, min_u0, max_sum_u, min_u, max_u, max_u0 = \
            _state_monitors(problem, state)
        if reference is None:
            ent = 0.0
            dists = np.zeros(problem.system.n)
        else:
            ent = entropy_total(state, reference, problem)
            u_cells = cell_fields(problem, state)[0]
            dists = np.array([
                norms(u_cells[i], ref_cells[i], problem.mesh, "l1")
                for i in range(problem.system.n)])
        records.append(TimeSeriesRecord(
            step=k, time=k * tau, entropy_rel=ent, masses=masses,
            l1_dists=dists, min_u0=min_u0, max_sum_u=max_sum_u,
            newton_iters=info.newton_iters, min_u=min_u, max_u=max_u,
            max_u0=max_u0))
    return records, state


def nested_convergence(problem_builder, levels, ref_level, checkpoints,
                       rows=(0, 1, -1), labels=("u_1", "u_2", "phi"),
                       mode=None, state_hook=None):
    """Errors against a same-scheme reference on the nested finest mesh.

    ``problem_builder(level)`` returns a ready problem (with scenario and
    params attached).  Every run starts from the scenario initial state and
    stops at max(checkpoints); coarse-vs-reference comparison happens at
    each checkpoint step in the coarse cell space through exact
    area-weighted restriction.  ``rows`` indexes the compared quantities in
    the stack [u_1..u_n, phi] (-1 is the potential).  Returns a dict
    mapping each checkpoint step to its ConvergenceTable.  When given,
    ``state_hook(level, problem, state)`` sees each run's final state.
    """
    levels = sorted(int(l) for l in levels)
    checkpoints = sorted(int(k) for k in checkpoints)
    if levels and levels[-1] >= ref_level:
        raise ValueError("reference level must exceed all study levels")
    if len(rows) != len(labels):
        raise ValueError("rows and labels must pair up")

    def checkpoint_cells(level):
        problem = problem_builder(level)
        state = problem.initial_state()
        snaps, done = {}, 0
        for k in checkpoints:
            _, state = simulate(problem, state, k - done, mode=mode)
            done = k
            u, phi = cell_fields(problem, state)
            snaps[k] = np.concatenate([u, phi[None, :]])
        if state_hook is not None:
            state_hook(level, problem, state)
        return problem.mesh, snaps

    ref_mesh, ref_snaps = checkpoint_cells(ref_level)
    data = {k: ([], []) for k in checkpoints}   # hs, error rows
    for level in levels:
        mesh, snaps = checkpoint_cells(level)
        for k in checkpoints:
            restricted = restrict_cell_values(ref_snaps[k], ref_mesh,
                                              ref_level - level)
            row = [norms(snaps[k][q], restricted[q], mesh, "l1")
                   for q in rows]
            data[k][0].append(mesh.h)
            data[k][1].append(row)
    tables = {}
    for k in checkpoints:
        hs = np.asarray(data[k][0])
        errs = np.asarray(data[k][1])
        order = np.argsort(hs)[::-1]
        tables[k] = ConvergenceTable(hs=hs[order], labels=list(labels),
                                     errors=errs[order])
    return tables
