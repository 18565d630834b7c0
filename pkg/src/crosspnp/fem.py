"""Implicit Euler P1 finite elements in entropy variables.

Unknowns are the nodal entropy variables w_i (one per mobile species) and
the potential, solved monolithically by a damped Newton iteration.  The
concentrations are recovered pointwise through the overflow-safe inverse
transform, which keeps every evaluated state inside the physical region
u_i > 0, sum u_i + c < 1 by construction.

Integrals use the three-point edge-midpoint quadrature rule on each
triangle (exact for quadratics); gradients of P1 fields are elementwise
constant.  Dirichlet conditions are enforced by identity rows on tagged
vertices; boundary fields are lifted into the interior by discrete harmonic
extension, which reduces to a constant field whenever all contacts carry
the same data.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import linsys
from .mesh import DIRICHLET
from .model import (
    ModelError,
    from_entropy,
    jacobian_from_entropy,
    to_entropy,
)

__all__ = [
    "FemError", "NewtonDiverged", "NonpositiveInitialData",
    "FemParams", "NodalState", "StepInfo", "FemProblem",
    "interpolate_nodal", "initial_state", "residual", "step",
    "solve_stationary", "solve_poisson",
]


class FemError(Exception):
    pass


class NewtonDiverged(FemError):
    """Newton failed: iteration cap, stalled damping, or non-finite values."""


class NonpositiveInitialData(FemError):
    """The entropy transform needs strictly positive u_i and u_0."""


@dataclass(frozen=True)
class FemParams:
    """Time step, regularization, and Newton policy."""

    tau: float
    eps: float = 1e-10
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    update_tol: float = 1e-12
    max_damping: int = 30
    max_tau_halvings: int = 10

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


@dataclass
class StepInfo:
    """Newton iteration record for one accepted time step."""

    newton_iters: int = 0
    residual_norms: list = field(default_factory=list)
    substeps: int = 1


@dataclass
class NodalState:
    """Nodal entropy variables and potential plus the lifted contact fields.

    At every Dirichlet-tagged vertex ``w == wbar`` and ``phi == phibar``.
    """

    w: np.ndarray        # (n, N)
    phi: np.ndarray      # (N,)
    wbar: np.ndarray     # (n, N) lifted contact entropy variables
    phibar: np.ndarray   # (N,) lifted contact potential

    def copy(self):
        return NodalState(self.w.copy(), self.phi.copy(),
                          self.wbar, self.phibar)

    def check_finite(self):
        if not (np.isfinite(self.w).all() and np.isfinite(self.phi).all()):
            raise FemError("state contains non-finite values")


def interpolate_nodal(function, mesh):
    """Vertex sampling of a callable on (m, 2) point arrays."""
    return np.asarray(function(mesh.vertices), dtype=float)


def _dirichlet_vertex_values(mesh, nfields, per_region):
    """Scatter per-region rows (nfields,) onto Dirichlet vertices.

    Returns (values (nfields, N), mask (N,)).  Regions are processed in
    sorted-name order; a vertex shared by two regions takes the last one.
    """
    N = mesh.num_vertices
    vals = np.zeros((nfields, N))
    mask = np.zeros(N, dtype=bool)
    for name in sorted(mesh.boundary_tag_map):
        eidx = mesh.boundary_tag_map[name]
        verts = np.unique(mesh.edges[eidx])
        row = per_region(name)
        vals[:, verts] = np.asarray(row, dtype=float)[:, None]
        mask[verts] = True
    return vals, mask


def _harmonic_extension(mesh, boundary_values, mask):
    """Extend Dirichlet vertex data into the interior with zero Laplacian.

    ``boundary_values``: (k, N) rows holding the pinned values on ``mask``.
    With no pinned vertices the extension is identically zero.
    """
    k, N = boundary_values.shape
    if not mask.any():
        return np.zeros((k, N))
    gg = np.einsum("tjd,tqd->tjq", mesh.hat_gradients, mesh.hat_gradients)
    buf = linsys.AssemblyBuffer(N)
    keep = (~mask).astype(float)
    tri = mesh.triangles
    for j in range(3):
        rows = tri[:, j]
        for q in range(3):
            buf.add(rows, tri[:, q],
                    mesh.tri_areas * gg[:, j, q] * keep[rows])
    pins = np.flatnonzero(mask)
    buf.add(pins, pins, np.ones(len(pins)))
    A = linsys.finalize(buf)
    out = np.empty((k, N))
    for i in range(k):
        rhs = np.where(mask, boundary_values[i], 0.0)
        out[i] = linsys.solve(A, rhs)
    return out


def solve_poisson(mesh, charge_on_edges, lambda2,
                  dirichlet_vertex_values=None):
    """Linear P1 Poisson solve: lambda2 * stiffness = edge-quadrature load.

    ``charge_on_edges`` holds the charge density at every edge midpoint.
    Dirichlet-tagged vertices are pinned to ``dirichlet_vertex_values``
    (full-length nodal array; zero if omitted); without any Dirichlet tag
    the potential is gauged by pinning vertex 0 to zero.
    """
    N = mesh.num_vertices
    tri = mesh.triangles
    charge = np.asarray(charge_on_edges, dtype=float)
    if charge.shape != (mesh.num_edges,):
        raise ValueError("need one charge value per edge midpoint")
    mask = mesh.dirichlet_vertex_mask.copy()
    values = np.zeros(N) if dirichlet_vertex_values is None \
        else np.asarray(dirichlet_vertex_values, dtype=float)
    if not mask.any():
        mask[0] = True
        values = np.zeros(N)
    keep = (~mask).astype(float)

    gg = np.einsum("tjd,tqd->tjq", mesh.hat_gradients, mesh.hat_gradients)
    buf = linsys.AssemblyBuffer(N)
    for j in range(3):
        rows = tri[:, j]
        for q in range(3):
            buf.add(rows, tri[:, q],
                    lambda2 * mesh.tri_areas * gg[:, j, q] * keep[rows])
    pins = np.flatnonzero(mask)
    buf.add(pins, pins, np.ones(len(pins)))
    A = linsys.finalize(buf)

    rhs = np.where(mask, values, 0.0)
    a3 = mesh.tri_areas / 3.0
    for ell in range(3):
        e = mesh.tri_edges[:, ell]
        load = 0.5 * a3 * charge[e]
        for p in (ell, (ell + 1) % 3):
            rows = tri[:, p]
            np.add.at(rhs, rows, load * keep[rows])
    # the pinned-row couplings were dropped from A, so move their known
    # contribution to the right-hand side
    for j in range(3):
        rows = tri[:, j]
        for q in range(3):
            cols = tri[:, q]
            np.add.at(rhs, rows,
                      -lambda2 * mesh.tri_areas * gg[:, j, q]
                      * keep[rows] * np.where(mask[cols], values[cols], 0.0))
    return linsys.solve(A, rhs)


class FemProblem:
    """Precomputed discretization context for one (mesh, system, scenario).

    Builds the lifted contact fields, samples the immobile background at
    vertices and edge midpoints, and exposes residual/Jacobian/Newton
    operations on packed nodal states.
    """

    def __init__(self, mesh, system, params, scenario):
        self.mesh = mesh
        self.system = system
        self.params = params
        self.scenario = scenario
        n, N = system.n, mesh.num_vertices
        self.n, self.N = n, N
        self.ndof = (n + 1) * N

        immobile = scenario.immobile
        self.c_vert = np.asarray(immobile.c_at(mesh.vertices), dtype=float)
        self.c_edge = np.asarray(immobile.c_at(mesh.edge_midpoints),
                                 dtype=float)
        self.f_edge = np.asarray(immobile.f_at(mesh.edge_midpoints),
                                 dtype=float)

        self._build_contact_fields(scenario.boundary)
        self._build_pins()

        self.grads = mesh.hat_gradients
        self.gg = np.einsum("tjd,tqd->tjq", self.grads, self.grads)
        self.a3 = mesh.tri_areas / 3.0
        self._jac_pattern = linsys.AssemblyPattern()

    # -- setup -----------------------------------------------------------

    def _build_contact_fields(self, boundary):
        n, N = self.n, self.N
        system, mesh = self.system, self.mesh

        def region_row(name):
            if name not in boundary.regions:
                raise ValueError("no boundary data for region %r" % name)
            rv = boundary.regions[name]
            u = np.asarray(rv.u, dtype=float)
            if u.shape != (n,):
                raise ValueError("region %r has %d species values, need %d"
                                 % (name, u.size, n))
            return np.concatenate([u, [rv.phi]])

        vals, mask = _dirichlet_vertex_values(mesh, n + 1, region_row)
        if mask.any():
            ub = vals[:n, mask].T              # (nd, n)
            phib = vals[n, mask]
            wb = to_entropy(ub, phib, system, c=self.c_vert[mask])
            pinned = np.zeros((n + 1, N))
            pinned[:n, mask] = wb.T
            pinned[n, mask] = phib
            ext = _harmonic_extension(mesh, pinned, mask)
        else:
            ext = np.zeros((n + 1, N))
        self.wbar = ext[:n]
        self.phibar = ext[n]
        ea, eb = mesh.edges[:, 0], mesh.edges[:, 1]
        self.wbar_e = 0.5 * (self.wbar[:, ea] + self.wbar[:, eb]).T  # (E, n)

    def _build_pins(self):
        n, N = self.n, self.N
        dmask = self.mesh.dirichlet_vertex_mask
        pinned = np.zeros(self.ndof, dtype=bool)
        for i in range(n + 1):
            pinned[i * N:(i + 1) * N][dmask] = True
        self.gauge_vertex = None
        if not dmask.any():
            # pure-Neumann run: gauge the potential at vertex 0
            self.gauge_vertex = 0
            pinned[n * N] = True
        self.pinned = pinned
        self.keep = (~pinned).astype(float)

    # -- state handling --------------------------------------------------

    def pack(self, state):
        return np.concatenate([state.w.reshape(-1), state.phi])

    def unpack(self, x):
        n, N = self.n, self.N
        return NodalState(x[:n * N].reshape(n, N).copy(), x[n * N:].copy(),
                          self.wbar, self.phibar)

    def edge_fields(self, w, phi):
        """P1 values of (w, phi) at all edge midpoints: ((E, n), (E,))."""
        ea, eb = self.mesh.edges[:, 0], self.mesh.edges[:, 1]
        w_e = 0.5 * (w[:, ea] + w[:, eb]).T
        phi_e = 0.5 * (phi[ea] + phi[eb])
        return w_e, phi_e

    def edge_concentrations(self, state):
        """Concentrations (u, u0) at all edge midpoints via the transform."""
        w_e, phi_e = self.edge_fields(state.w, state.phi)
        return from_entropy(w_e, phi_e, self.system, c=self.c_edge)

    def vertex_concentrations(self, state):
        """Concentrations (u, u0) at all vertices via the transform."""
        return from_entropy(state.w.T, state.phi, self.system,
                            c=self.c_vert)

    # -- initial data ----------------------------------------------------

    def initial_state(self, u_initial=None):
        """Initial nodal state: potential from a linear Poisson solve with
        the initial charge, entropy variables from the exact transform."""
        mesh, system = self.mesh, self.system
        profile = self.scenario.initial if u_initial is None else u_initial
        uI = np.asarray(profile(mesh.vertices), dtype=float)
        if uI.shape != (self.N, self.n):
            raise ValueError("initial profile returned shape %s, need %s"
                             % (uI.shape, (self.N, self.n)))
        if (uI <= 0).any():
            raise NonpositiveInitialData(
                "initial concentrations must be strictly positive")
        if not system.linear:
            u0I = 1.0 - uI.sum(axis=1) - self.c_vert
            if (u0I <= 0).any():
                raise NonpositiveInitialData(
                    "initial solvent fraction must be strictly positive")

        ea, eb = mesh.edges[:, 0], mesh.edges[:, 1]
        charge_v = uI @ system.z
        charge_e = 0.5 * (charge_v[ea] + charge_v[eb]) + self.f_edge
        # lift the contact potential to the Dirichlet vertices
        phi0 = solve_poisson(mesh, charge_e, system.lambda2,
                             dirichlet_vertex_values=self.phibar)
        try:
            w0 = to_entropy(uI, phi0, system, c=self.c_vert).T
        except ModelError as exc:
            raise NonpositiveInitialData(str(exc)) from exc

        dmask = mesh.dirichlet_vertex_mask
        w0[:, dmask] = self.wbar[:, dmask]
        phi0 = phi0.copy()
        phi0[dmask] = self.phibar[dmask]
        if self.gauge_vertex is not None:
            phi0[self.gauge_vertex] = 0.0
        state = NodalState(w0, phi0, self.wbar, self.phibar)
        state.check_finite()
        return state

    # -- residual and Jacobian -------------------------------------------

    def _old_edge_concentrations(self, state_old):
        u_old_e, _ = self.edge_concentrations(state_old)
        return u_old_e

    def residual_vector(self, x, u_old_e, stationary=False, tau=None):
        n, N = self.n, self.N
        mesh, system = self.mesh, self.system
        tau = self.params.tau if tau is None else tau
        eps = self.params.eps
        tri = mesh.triangles
        w = x[:n * N].reshape(n, N)
        phi = x[n * N:]

        w_e, phi_e = self.edge_fields(w, phi)
        u_e, u0_e = from_entropy(w_e, phi_e, system, c=self.c_edge)

        R = np.zeros(self.ndof)
        # transport: elementwise-constant gradients against quadrature
        # averages of the mobility u_i u_0
        w_tri = w[:, tri]                                     # (n, T, 3)
        gw = np.einsum("ntk,tkd->ntd", w_tri, self.grads)     # (n, T, 2)
        K = np.einsum("ntd,tjd->ntj", gw, self.grads)         # (n, T, 3)
        mob_e = u_e * u0_e[:, None]                           # (E, n)
        mob_tri = mob_e[mesh.tri_edges]                       # (T, 3, n)
        S = self.a3[:, None] * mob_tri.sum(axis=1)            # (T, n)
        for i in range(n):
            for j in range(3):
                np.add.at(R, i * N + tri[:, j],
                          system.D[i] * S[:, i] * K[i, :, j])

        # mass + regularization at the quadrature points
        for ell in range(3):
            e = mesh.tri_edges[:, ell]
            g = eps * (w_e[e] - self.wbar_e[e])
            if not stationary:
                g = g + (u_e[e] - u_old_e[e]) / tau
            g = 0.5 * self.a3[:, None] * g                    # (T, n)
            for p in (ell, (ell + 1) % 3):
                for i in range(n):
                    np.add.at(R, i * N + tri[:, p], g[:, i])

        # Poisson rows
        gphi = np.einsum("tk,tkd->td", phi[tri], self.grads)
        Kphi = np.einsum("td,tjd->tj", gphi, self.grads)
        for j in range(3):
            np.add.at(R, n * N + tri[:, j],
                      system.lambda2 * mesh.tri_areas * Kphi[:, j])
        charge_e = u_e @ system.z + self.f_edge
        for ell in range(3):
            e = mesh.tri_edges[:, ell]
            load = 0.5 * self.a3 * charge_e[e]
            for p in (ell, (ell + 1) % 3):
                np.add.at(R, n * N + tri[:, p], -load)

        # identity rows on pinned vertices
        dmask = mesh.dirichlet_vertex_mask
        for i in range(n):
            R[i * N:(i + 1) * N][dmask] = (w[i] - self.wbar[i])[dmask]
        R[n * N:][dmask] = (phi - self.phibar)[dmask]
        if self.gauge_vertex is not None:
            R[n * N + self.gauge_vertex] = phi[self.gauge_vertex]
        return R

    def jacobian_matrix(self, x, stationary=False, tau=None):
        n, N = self.n, self.N
        mesh, system = self.mesh, self.system
        tau = self.params.tau if tau is None else tau
        eps = self.params.eps
        tri = mesh.triangles
        w = x[:n * N].reshape(n, N)
        phi = x[n * N:]
        keep = self.keep

        w_e, phi_e = self.edge_fields(w, phi)
        u_e, u0_e, du_dw, du_dphi, du0_dw, du0_dphi = \
            jacobian_from_entropy(w_e, phi_e, system, c=self.c_edge)

        w_tri = w[:, tri]
        gw = np.einsum("ntk,tkd->ntd", w_tri, self.grads)
        K = np.einsum("ntd,tjd->ntj", gw, self.grads)         # (n, T, 3)
        mob_e = u_e * u0_e[:, None]
        mob_tri = mob_e[mesh.tri_edges]
        S = self.a3[:, None] * mob_tri.sum(axis=1)            # (T, n)

        # mobility and charge derivatives at the edge midpoints
        dmob_dw = du_dw * u0_e[:, None, None] \
            + u_e[:, :, None] * du0_dw[:, None, :]            # (E, n, n)
        dmob_dphi = du_dphi * u0_e[:, None] \
            + u_e * du0_dphi[:, None]                          # (E, n)
        dz_dw = np.einsum("i,eim->em", system.z, du_dw)       # (E, n)
        dz_dphi = du_dphi @ system.z                           # (E,)

        buf = linsys.AssemblyBuffer(self.ndof)

        def add(rows, cols, vals):
            buf.add(rows, cols, vals * keep[rows])

        # transport block: gradient variation
        for i in range(n):
            for j in range(3):
                rows = i * N + tri[:, j]
                for q in range(3):
                    add(rows, i * N + tri[:, q],
                        system.D[i] * S[:, i] * self.gg[:, j, q])

        # transport block: mobility variation; mass + regularization
        for ell in range(3):
            e = mesh.tri_edges[:, ell]
            la, lb = ell, (ell + 1) % 3
            half_a3 = 0.5 * self.a3
            quarter_a3 = 0.25 * self.a3
            for i in range(n):
                # columns: w_m then phi
                cvals = [system.D[i] * half_a3 * dmob_dw[e][:, i, m]
                         for m in range(n)]
                cvals.append(system.D[i] * half_a3 * dmob_dphi[e][:, i])
                mvals = []
                for m in range(n):
                    v = quarter_a3 * (eps if i == m else 0.0) \
                        * np.ones(len(tri))
                    if not stationary:
                        v = v + quarter_a3 * du_dw[e][:, i, m] / tau
                    mvals.append(v)
                v = np.zeros(len(tri)) if stationary \
                    else quarter_a3 * du_dphi[e][:, i] / tau
                mvals.append(v)
                for mcol in range(n + 1):
                    col_block = mcol * N
                    for j in range(3):
                        rows = i * N + tri[:, j]
                        for p in (la, lb):
                            add(rows, col_block + tri[:, p],
                                cvals[mcol] * K[i, :, j])
                    for jp in (la, lb):
                        rows = i * N + tri[:, jp]
                        for p in (la, lb):
                            add(rows, col_block + tri[:, p], mvals[mcol])

        # Poisson block
        for j in range(3):
            rows = n * N + tri[:, j]
            for q in range(3):
                add(rows, n * N + tri[:, q],
                    system.lambda2 * mesh.tri_areas * self.gg[:, j, q])
        for ell in range(3):
            e = mesh.tri_edges[:, ell]
            la, lb = ell, (ell + 1) % 3
            quarter_a3 = 0.25 * self.a3
            cvals = [-quarter_a3 * dz_dw[e][:, m] for m in range(n)]
            cvals.append(-quarter_a3 * dz_dphi[e])
            for mcol in range(n + 1):
                col_block = mcol * N
                for jp in (la, lb):
                    rows = n * N + tri[:, jp]
                    for p in (la, lb):
                        add(rows, col_block + tri[:, p], cvals[mcol])

        pins = np.flatnonzero(self.pinned)
        buf.add(pins, pins, np.ones(len(pins)))
        return linsys.finalize(buf, self._jac_pattern)

    # -- Newton ----------------------------------------------------------

    def newton(self, x0, u_old_e, stationary=False, tau=None):
        """Damped Newton on the packed state; returns (x, StepInfo)."""
        p = self.params
        x = x0.copy()
        r = self.residual_vector(x, u_old_e, stationary, tau)
        rn = np.abs(r).max()
        info = StepInfo(residual_norms=[float(rn)])
        for _ in range(p.newton_max_iter):
            if rn <= p.newton_tol:
                return x, info
            if not np.isfinite(rn):
                raise NewtonDiverged("non-finite residual")
            J = self.jacobian_matrix(x, stationary, tau)
            try:
                delta = linsys.solve(J, -r)
            except linsys.SingularMatrix as exc:
                raise NewtonDiverged("linear solve failed: %s" % exc) from exc
            info.newton_iters += 1
            if np.abs(delta).max() <= p.update_tol:
                return x + delta, info
            s = 1.0
            accepted = False
            for _ in range(p.max_damping + 1):
                x_try = x + s * delta
                r_try = self.residual_vector(x_try, u_old_e, stationary, tau)
                rn_try = np.abs(r_try).max()
                if np.isfinite(rn_try) and (rn_try < rn
                                            or rn_try <= p.newton_tol):
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                raise NewtonDiverged(
                    "damping stalled at residual %.3e" % rn)
            x, r, rn = x_try, r_try, rn_try
            info.residual_norms.append(float(rn))
        if rn <= p.newton_tol:
            return x, info
        raise NewtonDiverged("no convergence in %d iterations (residual %.3e)"
                             % (p.newton_max_iter, rn))

    def step(self, state_old, tau=None):
        """One implicit Euler step of size tau; returns (state, StepInfo)."""
        u_old_e = self._old_edge_concentrations(state_old)
        x, info = self.newton(self.pack(state_old), u_old_e,
                              stationary=False, tau=tau)
        state = self.unpack(x)
        state.check_finite()
        return state, info

    def advance(self, state_old, tau=None):
        """Step of size tau with bisection retries on Newton failure.

        Always lands exactly at t + tau; raises NewtonDiverged once the
        retry budget is exhausted.
        """
        tau = self.params.tau if tau is None else tau

        def go(state, dt, depth):
            try:
                return self.step(state, dt)
            except NewtonDiverged:
                if depth >= self.params.max_tau_halvings:
                    raise
            s1, i1 = go(state, 0.5 * dt, depth + 1)
            s2, i2 = go(s1, 0.5 * dt, depth + 1)
            i2.newton_iters += i1.newton_iters
            i2.substeps = i1.substeps + i2.substeps
            i2.residual_norms = i1.residual_norms + i2.residual_norms
            return s2, i2

        return go(state_old, tau, 0)

    def solve_stationary(self, state0=None, rate_tol=1e-8,
                         max_pseudo_steps=10000):
        """Pseudo-time continuation into the steady state, then one Newton
        solve of the stationary residual."""
        state = self.initial_state() if state0 is None else state0
        tau = self.params.tau
        failures = 0
        for _ in range(max_pseudo_steps):
            try:
                new_state, _ = self.step(state, tau)
            except NewtonDiverged:
                failures += 1
                if failures > self.params.max_tau_halvings:
                    raise
                tau *= 0.5
                continue
            failures = 0
            u_new, _ = self.vertex_concentrations(new_state)
            u_old, _ = self.vertex_concentrations(state)
            rate = np.abs(u_new - u_old).max() / tau
            state = new_state
            if rate <= rate_tol:
                break
            tau = min(tau * 2.0, 1e6)
        else:
            raise NewtonDiverged("pseudo-time continuation did not settle")
        x, _ = self.newton(self.pack(state), None, stationary=True)
        state = self.unpack(x)
        state.check_finite()
        return state


# -- convenience wrappers (one-shot construction) --------------------------

def initial_state(u_initial, mesh, system, scenario):
    params = FemParams(tau=scenario.time.tau)
    return FemProblem(mesh, system, params, scenario).initial_state(u_initial)


def residual(state_new, state_old, mesh, system, params, scenario):
    prob = FemProblem(mesh, system, params, scenario)
    u_old_e = prob._old_edge_concentrations(state_old)
    return prob.residual_vector(prob.pack(state_new), u_old_e)


def step(state_old, mesh, system, params, scenario):
    return FemProblem(mesh, system, params, scenario).step(state_old)


def solve_stationary(mesh, system, params, scenario, state0=None):
    prob = FemProblem(mesh, system, params, scenario)
    return prob.solve_stationary(state0)
