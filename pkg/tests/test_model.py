import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosspnp.model import (BoundaryData, ImmobileProfile,
                            NonpositiveConcentration, RegionValues,
                            SaturatedState, SpeciesSystem, entropy_density,
                            from_entropy, jacobian_from_entropy,
                            to_entropy)


def test_parameter_validation():
    with pytest.raises(ValueError):
        SpeciesSystem(z=(1.0,), D=(1.0,), beta=0.0)
    with pytest.raises(ValueError):
        SpeciesSystem(z=(1.0,), D=(1.0,), lambda2=-1.0)
    with pytest.raises(ValueError):
        SpeciesSystem(z=(1.0, -1.0), D=(1.0,))


def test_single_species_symmetric_point():
    system = SpeciesSystem(z=(1.0,), D=(1.0,))
    u, u0 = from_entropy(np.array([0.0]), 0.0, system)
    assert np.isclose(u[0], 0.5)
    assert np.isclose(u0, 0.5)
    _, _, du_dw, _, _, _ = jacobian_from_entropy(np.array([0.0]), 0.0,
                                                 system)
    assert np.isclose(du_dw[0, 0], 0.25)


def test_tiny_concentration_has_finite_entropy_variable():
    system = SpeciesSystem(z=(1.0,), D=(1.0,))
    w = to_entropy(np.array([1e-300]), 0.0, system)
    assert np.isfinite(w).all()
    assert w[0] < -600


def test_to_entropy_domain_errors():
    system = SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.0))
    with pytest.raises(NonpositiveConcentration):
        to_entropy(np.array([0.0, 0.2]), 0.0, system)
    with pytest.raises(SaturatedState):
        to_entropy(np.array([0.5, 0.5]), 0.0, system)


def test_saturation_includes_immobile_fraction():
    system = SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.0))
    with pytest.raises(SaturatedState):
        to_entropy(np.array([0.4, 0.3]), 0.0, system, c=0.3)
    w = to_entropy(np.array([0.4, 0.2]), 0.0, system, c=0.3)
    assert np.isfinite(w).all()


def test_inverse_transform_saturates_never():
    system = SpeciesSystem(z=(2.0, 1.0, -1.0), D=(1.0, 1.0, 1.0),
                           beta=3.0)
    rng = np.random.default_rng(5)
    w = 40.0 * rng.standard_normal((200, 3))
    phi = 5.0 * rng.standard_normal(200)
    u, u0 = from_entropy(w, phi, system, c=0.3)
    assert (u > 0).all() and (u0 > 0).all()
    assert np.allclose(u.sum(axis=-1) + u0 + 0.3, 1.0, atol=1e-12)


def test_huge_entropy_values_do_not_overflow():
    system = SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.0))
    u, u0 = from_entropy(np.array([800.0, -800.0]), 0.0, system)
    assert np.isfinite(u).all() and np.isfinite(u0)
    assert np.isclose(u[0] + u0, 1.0, atol=1e-12)


def test_linear_mode_ignores_solvent():
    system = SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.0), linear=True)
    w = np.array([0.3, -0.2])
    u, u0 = from_entropy(w, 0.5, system)
    assert np.allclose(u, np.exp(w - system.beta * system.z * 0.5))
    assert np.allclose(u0, 1.0)
    back = to_entropy(u, 0.5, system)
    assert np.allclose(back, w, atol=1e-12)


def test_jacobian_matches_finite_differences():
    system = SpeciesSystem(z=(2.0, 1.0, -1.0), D=(1.0, 0.5, 2.0),
                           beta=1.7)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        w = 3.0 * rng.standard_normal(3)
        phi = rng.standard_normal()
        u, u0, du_dw, du_dphi, du0_dw, du0_dphi = jacobian_from_entropy(
            w, phi, system, c=0.3)
        h = 1e-6
        for m in range(3):
            dw = np.zeros(3)
            dw[m] = h
            up, _ = from_entropy(w + dw, phi, system, c=0.3)
            um, _ = from_entropy(w - dw, phi, system, c=0.3)
            fd = (up - um) / (2 * h)
            worst = max(worst, np.abs(fd - du_dw[:, m]).max()
                        / max(np.abs(fd).max(), 1e-12))
        up, u0p = from_entropy(w, phi + h, system, c=0.3)
        um, u0m = from_entropy(w, phi - h, system, c=0.3)
        fd = (up - um) / (2 * h)
        worst = max(worst, np.abs(fd - du_dphi).max()
                    / max(np.abs(fd).max(), 1e-12))
        fd0 = (u0p - u0m) / (2 * h)
        denom = max(abs(fd0), 1e-8)
        worst = max(worst, abs(fd0 - du0_dphi) / denom)
    assert worst < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1),
       st.sampled_from([0.0, 0.3, 0.7]))
def test_transform_roundtrip_property(seed, c):
    system = SpeciesSystem(z=(2.0, 1.0, -1.0), D=(1.0, 1.0, 1.0),
                           beta=2.0)
    rng = np.random.default_rng(seed)
    frac = rng.dirichlet(np.ones(4))
    u = (1.0 - c) * frac[:3] * 0.999 + 1e-12
    phi = 3.0 * rng.standard_normal()
    w = to_entropy(u, phi, system, c=c)
    u2, u02 = from_entropy(w, phi, system, c=c)
    assert np.abs(u2 - u).max() < 1e-12
    assert abs(u2.sum() + u02 + c - 1.0) < 1e-12


def test_entropy_density_basics():
    u = np.array([[0.2, 0.3, 0.5]])
    assert np.isclose(entropy_density(u, u)[0], 0.0)
    uref = np.array([[0.25, 0.25, 0.5]])
    assert entropy_density(u, uref)[0] > 0.0
    # 0 log 0 = 0: vanishing entries contribute u_ref
    z = np.array([[0.0, 0.5, 0.5]])
    val = entropy_density(z, uref)[0]
    assert np.isfinite(val)


def test_immobile_profile_charge():
    prof = ImmobileProfile(density=lambda p: p[:, 0],
                           charge_per_unit=-0.5)
    pts = np.array([[0.2, 0.0], [0.8, 0.0]])
    assert np.allclose(prof.c_at(pts), [0.2, 0.8])
    assert np.allclose(prof.f_at(pts), [-0.1, -0.4])


def test_boundary_data_check():
    system = SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.0))
    good = BoundaryData(regions={
        "left": RegionValues(u=np.array([0.2, 0.2]), phi=0.0)})
    good.check(system)
    bad = BoundaryData(regions={
        "left": RegionValues(u=np.array([0.6, 0.6]), phi=0.0)})
    with pytest.raises(Exception):
        bad.check(system)
