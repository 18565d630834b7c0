import numpy as np
import pytest

from crosspnp import fem
from crosspnp.fem import (FemParams, FemProblem, NewtonDiverged,
                          NonpositiveInitialData, interpolate_nodal)
from crosspnp.mesh import TriMesh
from crosspnp.model import (BoundaryData, ImmobileProfile, RegionValues,
                            SpeciesSystem, from_entropy)
from crosspnp.scenarios import (ScenarioConfig, TimeGrid, calcium_channel,
                                equilibrium_box)

from conftest import make_acute_pair, make_small_scenario


def single_triangle_mesh():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    tags = [(0, 1, "N"), (1, 2, "N"), (0, 2, "N")]
    return TriMesh(pts, tris, tags)


def equilibrium_problem(nx=4, phi_wall=0.3):
    mesh, config = equilibrium_box(nx=nx, phi_wall=phi_wall)
    params = FemParams(tau=config.time.tau)
    return FemProblem(mesh, config.system, params, config), config


# ---------------------------------------------------------------------------
# interpolate_nodal


def test_interpolate_affine_is_exact(acute_pair):
    vals = interpolate_nodal(lambda p: p[:, 0] + 2.0 * p[:, 1], acute_pair)
    expect = acute_pair.vertices[:, 0] + 2.0 * acute_pair.vertices[:, 1]
    np.testing.assert_array_equal(vals, expect)


def test_interpolate_constant_is_ones(acute_pair):
    vals = interpolate_nodal(lambda p: np.ones(len(p)), acute_pair)
    np.testing.assert_array_equal(vals, np.ones(acute_pair.num_vertices))


def test_interpolate_quadratic_samples_vertices():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    tags = [(0, 1, "N"), (1, 2, "N"), (2, 3, "N"), (3, 0, "N")]
    mesh = TriMesh(pts, tris, tags, cell_points="barycenter")
    vals = interpolate_nodal(lambda p: p[:, 0] ** 2, mesh)
    np.testing.assert_array_equal(vals, pts[:, 0] ** 2)


# ---------------------------------------------------------------------------
# initial_state


def test_initial_state_equilibrium_data_constant_w(two_species):
    mesh = make_acute_pair()
    sc = make_small_scenario(two_species, initial_value=0.2)
    prob = FemProblem(mesh, two_species, FemParams(tau=1e-2), sc)
    state = prob.initial_state()
    for i in range(two_species.n):
        assert np.ptp(state.w[i]) < 1e-12


def test_initial_state_calcium_profiles_finite():
    mesh, config = calcium_channel(level=0)
    prob = FemProblem(mesh, config.system, FemParams(tau=config.time.tau),
                      config)
    state = prob.initial_state()
    assert np.isfinite(state.w).all()
    assert np.isfinite(state.phi).all()
    assert np.isfinite(state.wbar).all()


def test_initial_state_rejects_vanishing_concentration(two_species):
    mesh = make_acute_pair()
    sc = make_small_scenario(two_species)

    def bad(points):
        vals = np.full((len(points), 2), 0.2)
        vals[0, 0] = 0.0
        return vals

    prob = FemProblem(mesh, two_species, FemParams(tau=1e-2), sc)
    with pytest.raises(NonpositiveInitialData):
        prob.initial_state(bad)


# ---------------------------------------------------------------------------
# residual


def test_residual_zero_at_discrete_equilibrium():
    mesh, config = equilibrium_box(nx=4)
    params = FemParams(tau=config.time.tau, newton_tol=1e-14)
    prob = FemProblem(mesh, config.system, params, config)
    state = prob.solve_stationary()
    r = fem.residual(state, state, mesh, config.system, params, config)
    assert np.abs(r).max() <= 1e-12


def test_residual_single_triangle_hand_quadrature():
    mesh = single_triangle_mesh()
    system = SpeciesSystem(z=(1.0,), D=(1.3,), beta=0.8, lambda2=0.6)
    eps = 1e-3
    params = FemParams(tau=0.05, eps=eps)
    immobile = ImmobileProfile(density=lambda p: 0.1 + 0.2 * p[:, 0],
                               charge_per_unit=-0.5)
    sc = ScenarioConfig(
        name="hand", system=system, immobile=immobile,
        boundary=BoundaryData(regions={}),
        initial=lambda p: np.full((len(p), 1), 0.2),
        time=TimeGrid(tau=0.05, num_steps=1))
    prob = FemProblem(mesh, system, params, sc)

    w_new = np.array([[0.1, -0.2, 0.3]])
    phi_new = np.array([0.05, 0.0, -0.1])
    w_old = np.array([[0.0, 0.1, -0.1]])
    phi_old = np.array([-0.02, 0.04, 0.0])
    # closed domain: the lifted boundary fields are identically zero
    wbar = np.zeros((1, 3))
    phibar = np.zeros(3)
    new = fem.NodalState(w=w_new, phi=phi_new, wbar=wbar, phibar=phibar)
    old = fem.NodalState(w=w_old, phi=phi_old, wbar=wbar, phibar=phibar)

    r = fem.residual(new, old, mesh, system, params, sc)

    # Quadrature nodes: the three edge midpoints, each with weight |T|/3.
    verts = mesh.vertices
    area = 0.5
    wq = area / 3.0
    mids = [(0, 1), (1, 2), (0, 2)]
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # hat gradients

    def hat_at_mid(j, pair):
        return 0.5 if j in pair else 0.0

    def fields(w, phi, pair):
        wm = 0.5 * (w[0, pair[0]] + w[0, pair[1]])
        pm = 0.5 * (phi[pair[0]] + phi[pair[1]])
        cm = float(immobile.c_at(
            (0.5 * (verts[pair[0]] + verts[pair[1]]))[None, :])[0])
        u, u0 = from_entropy(np.array([wm]), pm, system, c=cm)
        return float(u[0]), float(u0), wm, pm, cm

    expected = np.zeros(6)
    grad_w = grads.T @ w_new[0]
    grad_phi = grads.T @ phi_new
    for j in range(3):  # transport row of vertex j
        acc = 0.0
        for pair in mids:
            un, u0n, wmn, _, _ = fields(w_new, phi_new, pair)
            uo, _, _, _, _ = fields(w_old, phi_old, pair)
            hat = hat_at_mid(j, pair)
            acc += wq * hat * (un - uo) / params.tau
            acc += wq * system.D[0] * un * u0n * float(grad_w @ grads[j])
            wbarm = 0.5 * (wbar[0, pair[0]] + wbar[0, pair[1]])
            acc += wq * eps * (wmn - wbarm) * hat
        expected[j] = acc
    for j in range(3):  # Poisson row of vertex j
        acc = 0.0
        for pair in mids:
            un, _, _, _, cm = fields(w_new, phi_new, pair)
            fm = float(immobile.f_at(
                (0.5 * (verts[pair[0]] + verts[pair[1]]))[None, :])[0])
            hat = hat_at_mid(j, pair)
            acc += wq * system.lambda2 * float(grad_phi @ grads[j])
            acc -= wq * (system.z[0] * un + fm) * hat
        expected[3 + j] = acc
    # gauge pin on a closed domain: the first Poisson row reads phi_0
    expected[3] = phi_new[0]

    np.testing.assert_allclose(r, expected, atol=1e-13)


def test_residual_eps_linearity():
    prob0, _ = equilibrium_problem()
    mesh, config = equilibrium_box(nx=4)
    prob1 = FemProblem(mesh, config.system,
                       FemParams(tau=config.time.tau, eps=0.0), config)
    state = prob0.initial_state()
    r0 = fem.residual(state, state, mesh, config.system,
                      FemParams(tau=config.time.tau, eps=0.0), config)
    r1 = fem.residual(state, state, mesh, config.system,
                      FemParams(tau=config.time.tau, eps=1e-10), config)
    scale = np.abs(state.w - state.wbar).max()
    assert np.abs(r1 - r0).max() <= 1e-10 * max(scale, 1.0)
    assert prob1.params.eps == 0.0


# ---------------------------------------------------------------------------
# step


def test_step_fixed_point_at_equilibrium():
    prob, _ = equilibrium_problem()
    steady = prob.solve_stationary()
    after, info = prob.step(steady)
    assert np.abs(after.w - steady.w).max() <= 1e-10
    assert np.abs(after.phi - steady.phi).max() <= 1e-10


def test_step_calcium_base_mesh_stays_in_domain():
    mesh, config = calcium_channel(level=0)
    prob = FemProblem(mesh, config.system, FemParams(tau=2e-4), config)
    state, info = prob.step(prob.initial_state())
    u, u0 = prob.vertex_concentrations(state)
    c = prob.c_vertex if hasattr(prob, "c_vertex") else None
    assert (u > 0.0).all()
    assert (u0 > 0.0).all()
    assert info.newton_iters >= 1


def test_step_entropy_inequality_100_steps():
    from crosspnp.diagnostics import entropy_total
    prob, _ = equilibrium_problem(nx=4)
    steady = prob.solve_stationary()
    state = prob.initial_state()
    last = entropy_total(state, steady, prob)
    for _ in range(100):
        state, _ = prob.step(state)
        now = entropy_total(state, steady, prob)
        assert now <= last + 1e-10
        last = now


def test_step_newton_locally_quadratic():
    mesh, config = calcium_channel(level=0)
    prob = FemProblem(mesh, config.system,
                      FemParams(tau=2e-4, newton_tol=1e-12), config)
    _, info = prob.step(prob.initial_state())
    norms = info.residual_norms
    pairs = [(a, b) for a, b in zip(norms, norms[1:])
             if 1e-8 <= a <= 1e-2]
    if not pairs:
        pytest.skip("no residual pair in the quadratic window")
    for a, b in pairs:
        assert b <= 1e6 * a * a


def test_step_halves_tau_then_gives_up():
    mesh, config = calcium_channel(level=0)
    prob = FemProblem(mesh, config.system,
                      FemParams(tau=2e-4, newton_tol=1e-10,
                                newton_max_iter=1, max_tau_halvings=3),
                      config)
    with pytest.raises(NewtonDiverged):
        prob.step(prob.initial_state())


def test_step_reports_substeps():
    prob, _ = equilibrium_problem()
    _, info = prob.step(prob.initial_state())
    assert info.substeps >= 1


# ---------------------------------------------------------------------------
# solve_stationary


def test_stationary_equilibrium_is_constant_w():
    prob, _ = equilibrium_problem()
    steady = prob.solve_stationary()
    for i in range(prob.system.n):
        assert np.ptp(steady.w[i]) <= 1e-9
        assert np.abs(steady.w[i] - steady.wbar[i]).max() <= 1e-9


def test_stationary_extra_step_is_stationary():
    prob, _ = equilibrium_problem()
    steady = prob.solve_stationary()
    after, _ = prob.step(steady, tau=1.0)
    u_b, _ = prob.vertex_concentrations(steady)
    u_a, _ = prob.vertex_concentrations(after)
    assert np.abs(u_a - u_b).max() <= 1e-7
    assert np.abs(after.phi - steady.phi).max() <= 1e-7


def test_stationary_bipolar_on_state_fills_channel():
    from crosspnp.scenarios import bipolar_channel
    mesh, config = bipolar_channel(voltage=1.0)
    prob = FemProblem(mesh, config.system, FemParams(tau=1e-2), config)
    steady = prob.solve_stationary()
    u, _ = prob.vertex_concentrations(steady)
    mid = np.abs(prob.mesh.vertices[:, 0] - 10.0) < 3.0
    channel_avg = (u[mid, 0] + u[mid, 1]).mean()
    assert channel_avg > 0.0032


# ---------------------------------------------------------------------------
# invariants


def test_box_preservation_and_saturation_identity():
    mesh, config = calcium_channel(level=0)
    prob = FemProblem(mesh, config.system, FemParams(tau=2e-4), config)
    state = prob.initial_state()
    c = config.immobile.c_at(mesh.vertices)
    for _ in range(5):
        state, _ = prob.step(state)
        u, u0 = prob.vertex_concentrations(state)
        assert (u > 0.0).all()
        assert (u.sum(axis=1) + c < 1.0).all()
        np.testing.assert_allclose(u.sum(axis=1) + u0 + c, 1.0,
                                   atol=1e-12, rtol=0.0)


def test_jacobian_matches_directional_differences(two_species):
    mesh = make_acute_pair()
    sc = make_small_scenario(two_species)
    prob = FemProblem(mesh, two_species, FemParams(tau=1e-2, eps=1e-10), sc)
    rng = np.random.default_rng(42)
    state = prob.initial_state()
    x0 = prob.pack(state)
    u_old_e, _ = prob.edge_concentrations(state)
    for _ in range(5):
        x = x0 + rng.normal(0.0, 0.3, x0.shape)
        J = prob.jacobian_matrix(x)
        v = rng.normal(0.0, 1.0, x.shape)
        h = 1e-7
        rp = prob.residual_vector(x + h * v, u_old_e)
        rm = prob.residual_vector(x - h * v, u_old_e)
        fd = (rp - rm) / (2.0 * h)
        jv = J.matvec(v)
        denom = max(np.abs(fd).max(), 1.0)
        assert np.abs(jv - fd).max() / denom <= 1e-5
