"""Implicit Euler two-point-flux finite volumes with double upwinding.

Unknowns are cellwise-constant concentrations u_i and potential; the
solvent fraction u_0 = 1 - sum_i u_i - c is eliminated algebraically.  The
numerical flux across an edge combines a diffusive part weighted by the
edgewise maximum of u_0 with an upwinded convective part: the solvent
factor inside the drift is upwinded on the sign of z_i D(Phi), and the
species concentration on the sign of the resulting velocity
V = D(u_0) - u0_hat * beta z_i D(Phi).  Ties ("= 0") select the owning
cell's value, which keeps the flux antisymmetric under cell exchange.

Discrete gradients use mirrored values on insulating edges (zero gradient)
and edge-average contact data on Dirichlet edges.  Two time-stepping modes
exist: a fully implicit monolithic Newton solve, and a semi-implicit
variant that freezes the potential during the concentration solve and
finishes each step with one linear Poisson solve.
"""

from dataclasses import dataclass

import numpy as np

from . import linsys
from .fem import FemParams, NewtonDiverged, StepInfo
from .mesh import AdmissibilityViolation, DIRICHLET, NEUMANN

__all__ = [
    "FvError", "InadmissibleMesh", "FvParams", "CellState", "FvProblem",
    "discrete_gradient", "upwind_flux", "residual", "step",
    "solve_stationary", "solve_poisson_cells",
]

MODES = ("fully_implicit", "semi_implicit")


class FvError(Exception):
    pass


class InadmissibleMesh(FvError):
    """The mesh dual geometry has a nonpositive cell-point distance."""


# Newton policy is shared with the nodal scheme.
FvParams = FemParams


@dataclass
class CellState:
    """Cellwise concentrations (n, T) and potential (T,)."""

    u: np.ndarray
    phi: np.ndarray

    def copy(self):
        return CellState(self.u.copy(), self.phi.copy())

    def check_finite(self):
        if not (np.isfinite(self.u).all() and np.isfinite(self.phi).all()):
            raise FvError("state contains non-finite values")


def _cell_average_on_edges(mesh, fn):
    """Cell averages from the three edge-midpoint samples (exact for
    quadratics, hence for the piecewise-affine profiles used here)."""
    vals = np.asarray(fn(mesh.edge_midpoints), dtype=float)
    return vals[mesh.tri_edges].mean(axis=1)


def solve_poisson_cells(mesh, rhs_cells, lambda2, boundary_phi=None):
    """Linear cell-centered Poisson solve.

    Row K: -lambda2 * sum_sigma tau_sigma D_K(Phi) = m(K) * rhs_K, with
    ``boundary_phi`` evaluated at Dirichlet edge midpoints (zero if
    omitted).  Without Dirichlet edges the potential is gauged to zero in
    cell 0.
    """
    T = mesh.num_triangles
    rhs = mesh.tri_areas * np.asarray(rhs_cells, dtype=float)
    if rhs.shape != (T,):
        raise ValueError("need one right-hand side value per cell")
    K = mesh.edge_tris[:, 0]
    L = mesh.edge_tris[:, 1]
    internal = L >= 0
    dirich = mesh.edge_kind == DIRICHLET
    tau_e = lambda2 * mesh.transmissibility

    buf = linsys.AssemblyBuffer(T)
    buf.add(K[internal], K[internal], tau_e[internal])
    buf.add(L[internal], L[internal], tau_e[internal])
    buf.add(K[internal], L[internal], -tau_e[internal])
    buf.add(L[internal], K[internal], -tau_e[internal])
    if dirich.any():
        phib = np.zeros(dirich.sum()) if boundary_phi is None else \
            np.asarray(boundary_phi(mesh.edge_midpoints[dirich]), dtype=float)
        buf.add(K[dirich], K[dirich], tau_e[dirich])
        np.add.at(rhs, K[dirich], tau_e[dirich] * phib)
    else:
        # gauge: overwrite the first cell's row with phi_0 = 0
        keep = np.ones(T)
        keep[0] = 0.0
        buf = linsys.AssemblyBuffer(T)
        buf.add(K[internal], K[internal],
                tau_e[internal] * keep[K[internal]])
        buf.add(L[internal], L[internal],
                tau_e[internal] * keep[L[internal]])
        buf.add(K[internal], L[internal],
                -tau_e[internal] * keep[K[internal]])
        buf.add(L[internal], K[internal],
                -tau_e[internal] * keep[L[internal]])
        buf.add_entry(0, 0, 1.0)
        rhs[0] = 0.0
    return linsys.solve(linsys.finalize(buf), rhs)


class FvProblem:
    """Precomputed discretization context for one (mesh, system, scenario)."""

    def __init__(self, mesh, system, params, scenario,
                 mode="fully_implicit"):
        if mode not in MODES:
            raise ValueError("mode must be one of %s" % (MODES,))
        try:
            mesh.require_admissible()
        except AdmissibilityViolation as exc:
            raise InadmissibleMesh(str(exc)) from exc
        self.mesh = mesh
        self.system = system
        self.params = params
        self.scenario = scenario
        self.mode = mode
        n, T = system.n, mesh.num_triangles
        self.n, self.T = n, T
        self.ndof = (n + 1) * T
        self._jac_patterns = {}

        immobile = scenario.immobile
        self.c_cell = _cell_average_on_edges(mesh, immobile.c_at)
        self.f_cell = _cell_average_on_edges(mesh, immobile.f_at)

        # edge topology
        self.K = mesh.edge_tris[:, 0]
        self.L = mesh.edge_tris[:, 1]
        self.internal = self.L >= 0
        self.dirich = mesh.edge_kind == DIRICHLET
        self.active = mesh.edge_kind != NEUMANN  # edges carrying a gradient
        self.Lsafe = np.where(self.internal, self.L, 0)
        self.tau_e = mesh.transmissibility.copy()

        self._build_contact_values(scenario.boundary)

        # gauge for the potential when no contact pins it
        self.gauge_cell = None if self.dirich.any() else 0
        pinned = np.zeros(self.ndof, dtype=bool)
        if self.gauge_cell is not None:
            pinned[n * T + self.gauge_cell] = True
        self.pinned = pinned
        self.keep = (~pinned).astype(float)

    def _build_contact_values(self, boundary):
        n, E = self.n, self.mesh.num_edges
        self.ubar_e = np.zeros((n, E))
        self.phibar_e = np.zeros(E)
        self.u0bar_e = np.zeros(E)
        if not self.dirich.any():
            return
        c_edge = np.asarray(
            self.scenario.immobile.c_at(self.mesh.edge_midpoints),
            dtype=float)
        names = self.mesh.edge_tag_names
        for e in np.flatnonzero(self.dirich):
            name = names[e]
            if name not in boundary.regions:
                raise ValueError("no boundary data for region %r" % name)
            rv = boundary.regions[name]
            u = np.asarray(rv.u, dtype=float)
            if u.shape != (n,):
                raise ValueError("region %r has %d species values, need %d"
                                 % (name, u.size, n))
            self.ubar_e[:, e] = u
            self.phibar_e[e] = rv.phi
            self.u0bar_e[e] = 1.0 - u.sum() - c_edge[e]

    # -- state handling --------------------------------------------------

    def pack(self, state):
        return np.concatenate([state.u.reshape(-1), state.phi])

    def unpack(self, x):
        n, T = self.n, self.T
        return CellState(x[:n * T].reshape(n, T).copy(), x[n * T:].copy())

    def u0_of(self, u):
        """Solvent fraction per cell; u is (n, T)."""
        if self.system.linear:
            return np.ones(self.T)
        return 1.0 - u.sum(axis=0) - self.c_cell

    def initial_state(self, u_initial=None):
        profile = self.scenario.initial if u_initial is None else u_initial
        uI = np.asarray(profile(self.mesh.cell_points), dtype=float)
        if uI.shape != (self.T, self.n):
            raise ValueError("initial profile returned shape %s, need %s"
                             % (uI.shape, (self.T, self.n)))
        u = uI.T.copy()
        charge = u.T @ self.system.z + self.f_cell
        phi = solve_poisson_cells(
            self.mesh, charge, self.system.lambda2,
            boundary_phi=self._contact_phi_callable())
        return CellState(u, phi)

    def _contact_phi_callable(self):
        phibar = self.phibar_e

        def contact(points):
            # points are exactly the Dirichlet edge midpoints, in order
            idx = np.flatnonzero(self.dirich)
            return phibar[idx]

        return contact if self.dirich.any() else None

    # -- fluxes ------------------------------------------------------------

    def edge_values(self, u, phi):
        """Own-side and far-side values per edge: far side mirrors the cell
        on insulating edges and holds contact data on Dirichlet edges."""
        K, Ls = self.K, self.Lsafe
        u0 = self.u0_of(u)
        uK = u[:, K]
        u0K = u0[K]
        phiK = phi[K]
        uO = np.where(self.internal, u[:, Ls], self.ubar_e)
        u0O = np.where(self.internal, u0[Ls], self.u0bar_e)
        phiO = np.where(self.internal, phi[Ls], self.phibar_e)
        uO = np.where(self.active, uO, uK)
        u0O = np.where(self.active, u0O, u0K)
        phiO = np.where(self.active, phiO, phiK)
        return uK, u0K, phiK, uO, u0O, phiO

    def flux_terms(self, u, phi):
        """Owner-side fluxes F (n, E) plus the upwind context arrays."""
        system = self.system
        uK, u0K, phiK, uO, u0O, phiO = self.edge_values(u, phi)
        du = uO - uK                                   # (n, E)
        du0 = u0O - u0K
        dphi = phiO - phiK
        s = system.z[:, None] * dphi[None, :]          # (n, E)
        sel_hat_K = s >= 0.0
        u0hat = np.where(sel_hat_K, u0K[None, :], u0O[None, :])
        V = du0[None, :] - u0hat * system.beta * s
        sel_up_K = V >= 0.0
        u_up = np.where(sel_up_K, uK, uO)
        u0max = np.maximum(u0K, u0O)
        F = -self.tau_e[None, :] * system.D[:, None] \
            * (u0max[None, :] * du - u_up * V)
        F = np.where(self.active[None, :], F, 0.0)
        ctx = {
            "du": du, "du0": du0, "dphi": dphi,
            "sel_hat_K": sel_hat_K, "u0hat": u0hat, "V": V,
            "sel_up_K": sel_up_K, "u_up": u_up,
            "sel_max_K": u0K >= u0O, "u0max": u0max,
        }
        return F, ctx

    # -- residuals ---------------------------------------------------------

    def residual_transport(self, u, phi, u_old, stationary=False, tau=None):
        tau = self.params.tau if tau is None else tau
        F, _ = self.flux_terms(u, phi)
        n, T = self.n, self.T
        R = np.zeros((n, T))
        if not stationary:
            R += self.mesh.tri_areas[None, :] * (u - u_old) / tau
        K, L = self.K, self.L
        internal = self.internal
        for i in range(n):
            np.add.at(R[i], K, F[i])
            np.add.at(R[i], L[internal], -F[i][internal])
        return R.reshape(-1)

    def residual_poisson(self, u, phi):
        system = self.system
        _, _, phiK, _, _, phiO = self.edge_values(u, phi)
        g = self.tau_e * (phiO - phiK)
        R = -self.mesh.tri_areas * (u.T @ system.z + self.f_cell)
        np.add.at(R, self.K, -system.lambda2 * g)
        np.add.at(R, self.L[self.internal],
                  system.lambda2 * g[self.internal])
        if self.gauge_cell is not None:
            R[self.gauge_cell] = phi[self.gauge_cell]
        return R

    def residual_vector(self, x, u_old, stationary=False, tau=None,
                        mode=None):
        n, T = self.n, self.T
        mode = self.mode if mode is None else mode
        if mode == "semi_implicit":
            u = x.reshape(n, T)
            return self.residual_transport(u, self._frozen_phi, u_old,
                                           stationary, tau)
        u = x[:n * T].reshape(n, T)
        phi = x[n * T:]
        return np.concatenate([
            self.residual_transport(u, phi, u_old, stationary, tau),
            self.residual_poisson(u, phi),
        ])

    # -- Jacobian ------------------------------------------------------------

    def _flux_derivative_blocks(self, ctx):
        """Per-edge owner-flux derivatives with frozen upwind switches.

        Returns (dF_duK, dF_duO, dF_dphiK, dF_dphiO) with shapes
        (n, n, E) for the concentration blocks (dF_i / du_j) and (n, E)
        for the potential blocks.
        """
        system = self.system
        n, E = self.n, self.mesh.num_edges
        tD = self.tau_e[None, :] * system.D[:, None]   # (n, E)
        du, V = ctx["du"], ctx["V"]
        dphi = ctx["dphi"]
        u_up, u0max = ctx["u_up"], ctx["u0max"]
        hat = ctx["u0hat"]
        sK_max = ctx["sel_max_K"].astype(float)
        sK_hat = ctx["sel_hat_K"].astype(float)
        sK_up = ctx["sel_up_K"].astype(float)
        bz = system.beta * system.z[:, None]           # (n, 1)

        if self.system.linear:
            dmaxK = np.zeros(E)
            dhatK = np.zeros((n, E))
            ddu0K = 0.0
        else:
            dmaxK = -sK_max                 # d u0max / d u_jK, any j
            dhatK = -sK_hat                 # d u0hat / d u_jK
            ddu0K = 1.0                     # d du0 / d u_jK  (-(-1))

        eye = np.eye(n)[:, :, None]
        # dV_i/du_jK = ddu0K - bz*dphi*dhatK  (independent of j)
        dV_duK = ddu0K - bz * dphi[None, :] * dhatK    # (n, E)
        dF_duK = -tD[:, None, :] * (
            dmaxK[None, None, :] * du[:, None, :]
            + u0max[None, None, :] * (-eye)
            - eye * sK_up[:, None, :] * V[:, None, :]
            - u_up[:, None, :] * dV_duK[:, None, :])

        if self.system.linear:
            dmaxO = np.zeros(E)
            dhatO = np.zeros((n, E))
            ddu0O = 0.0
        else:
            dmaxO = -(1.0 - sK_max)
            dhatO = -(1.0 - sK_hat)
            ddu0O = -1.0
        dV_duO = ddu0O - bz * dphi[None, :] * dhatO
        dF_duO = -tD[:, None, :] * (
            dmaxO[None, None, :] * du[:, None, :]
            + u0max[None, None, :] * eye
            - eye * (1.0 - sK_up[:, None, :]) * V[:, None, :]
            - u_up[:, None, :] * dV_duO[:, None, :])

        # potential columns: only V depends on phi (selected u0 values are
        # concentrations, independent of phi)
        dV_dphiK = hat * bz                            # (n, E)
        dF_dphiK = -tD * (-u_up * dV_dphiK)
        dF_dphiO = -dF_dphiK
        return dF_duK, dF_duO, dF_dphiK, dF_dphiO

    def jacobian_matrix(self, x, stationary=False, tau=None, mode=None):
        n, T = self.n, self.T
        mode = self.mode if mode is None else mode
        system = self.system
        tau = self.params.tau if tau is None else tau
        semi = mode == "semi_implicit"
        if semi:
            u = x.reshape(n, T)
            phi = self._frozen_phi
            ndof = n * T
        else:
            u = x[:n * T].reshape(n, T)
            phi = x[n * T:]
            ndof = self.ndof

        _, ctx = self.flux_terms(u, phi)
        dF_duK, dF_duO, dF_dphiK, dF_dphiO = self._flux_derivative_blocks(ctx)
        act = self.active.astype(float)
        K, L = self.K, self.Lsafe
        internal = self.internal.astype(float)
        dir_act = act * (1.0 - internal)       # Dirichlet edges

        buf = linsys.AssemblyBuffer(ndof)
        keep = self.keep if not semi else np.ones(ndof)

        def add(rows, cols, vals):
            buf.add(rows, cols, vals * keep[rows])

        for i in range(n):
            rK = i * T + K
            rL = i * T + L
            for j in range(n):
                vK = dF_duK[i, j] * act
                vO = dF_duO[i, j] * act
                add(rK, j * T + K, vK)
                add(rL, j * T + K, -vK * internal)
                add(rK, j * T + L, vO * internal)
                add(rL, j * T + L, -vO * internal)
            if not semi:
                vK = dF_dphiK[i] * act
                vO = dF_dphiO[i] * act
                add(i * T + K, n * T + K, vK)
                add(rL, n * T + K, -vK * internal)
                add(i * T + K, n * T + L, vO * internal)
                add(rL, n * T + L, -vO * internal)
            if not stationary:
                cells = np.arange(T)
                add(i * T + cells, i * T + cells, self.mesh.tri_areas / tau)

        if not semi:
            lt = system.lambda2 * self.tau_e
            add(n * T + K, n * T + K, lt * act)
            add(n * T + L, n * T + L, lt * internal)
            add(n * T + K, n * T + L, -lt * internal)
            add(n * T + L, n * T + K, -lt * internal)
            cells = np.arange(T)
            for j in range(n):
                add(n * T + cells, j * T + cells,
                    -self.mesh.tri_areas * system.z[j])
            pins = np.flatnonzero(self.pinned)
            if len(pins):
                buf.add(pins, pins, np.ones(len(pins)))
        pattern = self._jac_patterns.setdefault(
            (semi, bool(stationary)), linsys.AssemblyPattern())
        return linsys.finalize(buf, pattern)

    # -- Newton and stepping ------------------------------------------------

    def _newton(self, x0, u_old, stationary, tau, mode):
        p = self.params
        x = x0.copy()
        r = self.residual_vector(x, u_old, stationary, tau, mode)
        rn = np.abs(r).max()
        info = StepInfo(residual_norms=[float(rn)])
        for _ in range(p.newton_max_iter):
            if rn <= p.newton_tol:
                return x, info
            if not np.isfinite(rn):
                raise NewtonDiverged("non-finite residual")
            J = self.jacobian_matrix(x, stationary, tau, mode)
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
                r_try = self.residual_vector(x_try, u_old, stationary,
                                             tau, mode)
                rn_try = np.abs(r_try).max()
                if np.isfinite(rn_try) and (rn_try < rn
                                            or rn_try <= p.newton_tol):
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                raise NewtonDiverged("damping stalled at residual %.3e" % rn)
            x, r, rn = x_try, r_try, rn_try
            info.residual_norms.append(float(rn))
        if rn <= p.newton_tol:
            return x, info
        raise NewtonDiverged("no convergence in %d iterations (residual %.3e)"
                             % (p.newton_max_iter, rn))

    def step(self, state_old, tau=None, mode=None):
        """One implicit Euler step; returns (CellState, StepInfo)."""
        mode = self.mode if mode is None else mode
        tau = self.params.tau if tau is None else tau
        n, T = self.n, self.T
        if mode == "semi_implicit":
            self._frozen_phi = state_old.phi
            x, info = self._newton(state_old.u.reshape(-1).copy(),
                                   state_old.u, False, tau, mode)
            u = x.reshape(n, T)
            charge = u.T @ self.system.z + self.f_cell
            phi = solve_poisson_cells(self.mesh, charge, self.system.lambda2,
                                      boundary_phi=self._contact_phi_callable())
            state = CellState(u.copy(), phi)
        else:
            x, info = self._newton(self.pack(state_old), state_old.u,
                                   False, tau, mode)
            state = self.unpack(x)
        state.check_finite()
        return state, info

    def advance(self, state_old, tau=None, mode=None):
        """Step with bisection retries on Newton failure (exact landing)."""
        tau = self.params.tau if tau is None else tau

        def go(state, dt, depth):
            try:
                return self.step(state, dt, mode)
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
        """Pseudo-time continuation then one stationary Newton solve."""
        state = self.initial_state() if state0 is None else state0
        tau = self.params.tau
        failures = 0
        for _ in range(max_pseudo_steps):
            try:
                new_state, _ = self.step(state, tau, "fully_implicit")
            except NewtonDiverged:
                failures += 1
                if failures > self.params.max_tau_halvings:
                    raise
                tau *= 0.5
                continue
            failures = 0
            rate = np.abs(new_state.u - state.u).max() / tau
            state = new_state
            if rate <= rate_tol:
                break
            tau = min(tau * 2.0, 1e6)
        else:
            raise NewtonDiverged("pseudo-time continuation did not settle")
        x, _ = self._newton(self.pack(state), state.u, True, None,
                            "fully_implicit")
        state = self.unpack(x)
        state.check_finite()
        return state


# -- single-edge operations (reference semantics, used by tests/CLI) -------

def discrete_gradient(problem, u, phi, edge, quantity, species=None):
    """Owner-side discrete gradient D_K(v) across one edge.

    ``quantity``: "u" (needs species), "u0", or "phi".
    """
    uK, u0K, phiK, uO, u0O, phiO = problem.edge_values(u, phi)
    if quantity == "u":
        return float(uO[species, edge] - uK[species, edge])
    if quantity == "u0":
        return float(u0O[edge] - u0K[edge])
    if quantity == "phi":
        return float(phiO[edge] - phiK[edge])
    raise ValueError("quantity must be 'u', 'u0', or 'phi'")


def upwind_flux(problem, u, phi, edge, species):
    """Owner-side numerical flux across one edge for one species."""
    F, _ = problem.flux_terms(u, phi)
    return float(F[species, edge])


# -- convenience wrappers ---------------------------------------------------

def residual(state_new, state_old, mesh, system, params, scenario):
    prob = FvProblem(mesh, system, params, scenario)
    return prob.residual_vector(prob.pack(state_new), state_old.u)


def step(state_old, mesh, system, params, scenario, mode="fully_implicit"):
    return FvProblem(mesh, system, params, scenario, mode).step(state_old)


def solve_stationary(mesh, system, params, scenario, state0=None):
    return FvProblem(mesh, system, params, scenario).solve_stationary(state0)
