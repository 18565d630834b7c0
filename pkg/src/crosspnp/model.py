"""Mixture model and the change of variables between concentrations and
entropy variables.

Concentrations u_1..u_n of mobile species share the volume with an immobile
background c(x) and the solvent u_0 = 1 - sum_i u_i - c.  The entropy
variable of species i is w_i = log(u_i / u_0) + beta z_i Phi.  Its inverse is
a softmax that keeps every concentration positive and the total below 1 - c
no matter what w is, which is what the nonlinear solver relies on.

With ``linear=True`` the solvent factor is dropped (u_0 == 1, no volume
exclusion): w_i = log u_i + beta z_i Phi, the classical Nernst-Planck model.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelError", "NonpositiveConcentration", "SaturatedState",
    "NegativeConcentration", "SpeciesSystem", "ImmobileProfile",
    "RegionValues", "BoundaryData", "to_entropy", "from_entropy",
    "jacobian_from_entropy", "entropy_density",
]


class ModelError(Exception):
    pass


class NonpositiveConcentration(ModelError):
    pass


class SaturatedState(ModelError):
    pass


class NegativeConcentration(ModelError):
    pass


@dataclass(frozen=True)
class SpeciesSystem:
    """Charges, scaled diffusivities and the two dimensionless groups."""
    z: np.ndarray
    D: np.ndarray
    beta: float = 1.0
    lambda2: float = 1.0
    linear: bool = False

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        object.__setattr__(self, "D", np.asarray(self.D, dtype=float))
        if self.z.ndim != 1 or self.D.shape != self.z.shape:
            raise ValueError("z and D must be 1d arrays of equal length")
        if len(self.z) < 1:
            raise ValueError("need at least one species")
        if (self.D <= 0).any():
            raise ValueError("diffusivities must be positive")
        if self.beta <= 0 or self.lambda2 <= 0:
            raise ValueError("beta and lambda2 must be positive")

    @property
    def n(self):
        return len(self.z)


def _drift(w, phi, system):
    # w_i - beta z_i Phi, species axis last
    return w - system.beta * np.asarray(phi)[..., None] * system.z


def to_entropy(u, phi, system, c=0.0):
    """Concentrations -> entropy variables.  Raises on u_i <= 0 and, in the
    nonlinear model, on saturated states (u_0 <= 0)."""
    u = np.asarray(u, dtype=float)
    if (u <= 0).any():
        raise NonpositiveConcentration("u_i must be positive, min %.3e" % u.min())
    if system.linear:
        logr = np.log(u)
    else:
        u0 = 1.0 - u.sum(axis=-1) - c
        if (u0 <= 0).any():
            raise SaturatedState("u_0 must be positive, min %.3e" % np.min(u0))
        logr = np.log(u) - np.log(u0)[..., None]
    return logr + system.beta * np.asarray(phi)[..., None] * system.z


def from_entropy(w, phi, system, c=0.0):
    """Entropy variables -> (u, u_0).  Overflow-safe for any w."""
    a = _drift(np.asarray(w, dtype=float), phi, system)
    if system.linear:
        u = np.exp(a)
        return u, np.ones(u.shape[:-1])
    m = np.maximum(a.max(axis=-1), 0.0)
    e = np.exp(a - m[..., None])
    e0 = np.exp(-m)
    denom = e0 + e.sum(axis=-1)
    free = (1.0 - np.asarray(c)) / denom
    return free[..., None] * e, free * e0


def jacobian_from_entropy(w, phi, system, c=0.0):
    """Concentrations and their derivatives in the entropy variables.

    Returns (u, u0, du_dw, du_dphi, du0_dw, du0_dphi) with species axes
    last: du_dw[..., i, j] = d u_i / d w_j.
    """
    u, u0 = from_entropy(w, phi, system, c)
    n = system.n
    eye = np.eye(n)
    if system.linear:
        du_dw = eye * u[..., :, None]
        du_dphi = -system.beta * system.z * u
        zero = np.zeros(u.shape[:-1])
        return u, u0, du_dw, du_dphi, np.zeros(u.shape), zero
    free = 1.0 - np.asarray(c)
    frac = u / free[..., None]                       # u_j / (1 - c)
    du_dw = u[..., :, None] * (eye - frac[..., None, :])
    s = (u * system.z).sum(axis=-1)
    du_dphi = -system.beta * u * (system.z - (s / free)[..., None])
    du0_dw = -u0[..., None] * frac
    du0_dphi = system.beta * u0 * s / free
    return u, u0, du_dw, du_dphi, du0_dw, du0_dphi


def entropy_density(u, uref):
    """Sum over the last axis of u log(u/uref) - u + uref, with 0 log 0 = 0.

    ``u`` may contain the solvent as an extra column; ``uref`` must be
    positive everywhere.
    """
    u = np.asarray(u, dtype=float)
    uref = np.asarray(uref, dtype=float)
    if (u < 0).any():
        raise NegativeConcentration("entropy needs u >= 0, min %.3e" % u.min())
    if (uref <= 0).any():
        raise ValueError("reference concentrations must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(u > 0, u * (np.log(u) - np.log(uref)), 0.0)
    return (term - u + uref).sum(axis=-1)


@dataclass(frozen=True)
class ImmobileProfile:
    """Immobile background: volume-filling density c(x) and the permanent
    charge f(x) it carries.  Both callables take (..., 2) points."""
    density: object
    charge_per_unit: float = 0.0
    charge_density: object = None

    def c_at(self, points):
        return _eval_field(self.density, points)

    def f_at(self, points):
        if self.charge_density is not None:
            return _eval_field(self.charge_density, points)
        return self.charge_per_unit * self.c_at(points)

    @staticmethod
    def none():
        return ImmobileProfile(density=lambda x: np.zeros(x.shape[:-1]))


def _eval_field(fn, points):
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    out = np.asarray(fn(flat), dtype=float)
    return out.reshape(pts.shape[:-1] + out.shape[1:])


@dataclass(frozen=True)
class RegionValues:
    u: np.ndarray
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))


@dataclass(frozen=True)
class BoundaryData:
    """Fixed bath values per Dirichlet region name."""
    regions: dict = field(default_factory=dict)

    def check(self, system, c_on_boundary=0.0, margin=1e-6):
        """Bath states must sit strictly inside the admissible set."""
        for name, rv in self.regions.items():
            if rv.u.shape != (system.n,):
                raise ValueError("region %r has %d species, system has %d"
                                 % (name, rv.u.size, system.n))
            if (rv.u < margin).any():
                raise NonpositiveConcentration("region %r: bath value below margin" % name)
            if not system.linear and rv.u.sum() > 1.0 - c_on_boundary - margin:
                raise SaturatedState("region %r: bath occupies the whole volume" % name)
