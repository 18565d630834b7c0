"""Prebuilt experiment setups.

Two ion-channel benchmarks (a calcium-selective channel and a bipolar
channel) plus a manufactured Poisson problem and structured box meshes for
verification runs.  Each constructor returns a mesh together with a
:class:`ScenarioConfig` carrying species data, immobile background, boundary
values, the initial profile, and the time grid.
"""

from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .mesh import TriMesh, read_mesh, regular_refine
from .model import (
    BoundaryData,
    ImmobileProfile,
    RegionValues,
    SpeciesSystem,
)

__all__ = [
    "ScenarioConfig",
    "TimeGrid",
    "PoissonProblem",
    "calcium_channel",
    "bipolar_channel",
    "manufactured_poisson",
    "rectangle_lattice_mesh",
    "neumann_box",
    "equilibrium_box",
    "CALCIUM_UOX_MAX",
]

# Oxygen cage density: 52 mol/L in a calcium channel at a typical
# concentration of 3.7037e25 / L, i.e. (6.022e23 * 52) / 3.7037e25.
CALCIUM_UOX_MAX = 6.022e23 * 52.0 / 3.7037e25

# Mobility and permittivity for a thermal voltage of 0.1 V at 298 K; the
# permittivity value corresponds to a 1 nm typical length.
_CALCIUM_BETA = 3.8922
_CALCIUM_LAMBDA2 = 1.1713e-2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform implicit-Euler time grid."""

    tau: float
    num_steps: int
    output_every: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.num_steps < 0:
            raise ValueError("num_steps must be nonnegative")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a solver needs besides the mesh."""

    name: str
    system: SpeciesSystem
    immobile: ImmobileProfile
    boundary: BoundaryData
    initial: object  # callable (m, 2) points -> (m, n) concentrations
    time: TimeGrid
    extra: dict = field(default_factory=dict)

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)


@dataclass(frozen=True)
class PoissonProblem:
    """Pure Poisson verification problem with a known solution."""

    lambda2: float
    rhs: object       # callable (m, 2) -> (m,)
    exact: object     # callable (m, 2) -> (m,)
    dirichlet: object  # callable (m, 2) -> (m,)


def _load_base_mesh(name):
    ref = resources.files("crosspnp.data").joinpath(name)
    with resources.as_file(ref) as path:
        return read_mesh(str(path))


def _linear_in_x(mesh_xlim, left_u, right_u):
    x0, x1 = mesh_xlim
    left_u = np.asarray(left_u, dtype=float)
    right_u = np.asarray(right_u, dtype=float)

    def profile(points):
        s = (points[:, 0] - x0) / (x1 - x0)
        return left_u[None, :] + s[:, None] * (right_u - left_u)[None, :]

    return profile


def calcium_oxygen_profile(points):
    """Piecewise-linear oxygen cage density along the channel axis.

    Ramps up on [0.35, 0.45], plateaus at 1 on [0.45, 0.55], ramps down on
    [0.55, 0.65]; zero elsewhere; scaled by :data:`CALCIUM_UOX_MAX`.
    """
    x = np.asarray(points, dtype=float)[:, 0]
    shape = np.minimum(10.0 * (x - 0.35), 10.0 * (0.65 - x))
    return CALCIUM_UOX_MAX * np.clip(shape, 0.0, 1.0)


def calcium_channel(level=0):
    """Calcium-selective channel: two tapered reservoirs joined by a neck.

    The neck spans x in [0.35, 0.65]; left/right vertical walls carry
    Dirichlet bath data, the rest is insulating.  Species: Ca2+ (z=+2),
    Na+ (z=+1), Cl- (z=-1).  ``level`` red-refinements of the frozen
    74-triangle base mesh.
    """
    if not 0 <= int(level) <= 4:
        raise ValueError("refinement level must be in 0..4")
    mesh = _load_base_mesh("calcium_base.msh")
    for _ in range(int(level)):
        mesh = regular_refine(mesh)

    system = SpeciesSystem(
        z=np.array([2.0, 1.0, -1.0]),
        D=np.array([0.59, 1.0, 1.52]),
        beta=_CALCIUM_BETA,
        lambda2=_CALCIUM_LAMBDA2,
    )
    immobile = ImmobileProfile(
        density=calcium_oxygen_profile,
        charge_per_unit=-0.5,
    )
    # Electro-neutral CaCl2/NaCl bath in units of the saturation
    # concentration, with a small applied voltage across the contacts.
    # The baths must be concentrated enough that the diffusive supply
    # from the reservoirs screens the oxide charge on an O(1) time
    # horizon: the channel then shows pronounced cation peaks at
    # t ~ 0.1.  With physiological ~mM baths the same filling transient
    # stretches over hundreds of time units and nothing happens at
    # short runs.  The bias (2 in units of 1/beta, i.e. ~51 mV) drives
    # a measurable ionic current through the neck without destroying
    # the equilibrium structure of the depletion layers.
    u_ca = 2.0e-2
    u_na = 2.0e-2
    u_cl = 2.0 * u_ca + u_na
    bath = np.array([u_ca, u_na, u_cl])
    boundary = BoundaryData(regions={
        "left": RegionValues(u=bath, phi=0.0),
        "right": RegionValues(u=bath, phi=2.0),
    })
    config = ScenarioConfig(
        name="calcium",
        system=system,
        immobile=immobile,
        boundary=boundary,
        initial=_linear_in_x((0.0, 1.0), bath, bath),
        time=TimeGrid(tau=2.0e-4, num_steps=600),
        extra={"level": int(level)},
    )
    return mesh, config


_DISK_RADIUS = 1.4
_POSITIVE_DISKS = [(5.5, 1.5), (5.5, -1.5), (8.3, 1.5), (8.3, -1.5)]
_NEGATIVE_DISKS = [(11.7, 1.5), (11.7, -1.5), (14.5, 1.5), (14.5, -1.5)]


def _disk_indicator(points, centers):
    pts = np.asarray(points, dtype=float)
    inside = np.zeros(len(pts), dtype=bool)
    for cx, cy in centers:
        inside |= (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2 <= _DISK_RADIUS ** 2
    return inside


def bipolar_channel(voltage=1.0, c_max=0.2971, linear=False):
    """Bipolar pore: a long channel with four positive confined-ion disks
    upstream and four negative ones downstream.

    ``voltage`` is the right-contact potential (left contact at 0); +1 is
    the on-state, -1 the off-state.  ``linear=True`` switches off volume
    exclusion (ideal-solution transport).
    """
    mesh = _load_base_mesh("bipolar_base.msh")
    system = SpeciesSystem(
        z=np.array([1.0, -1.0]),
        D=np.array([1.0, 1.0]),
        beta=3.8922,
        lambda2=1.1713,
        linear=bool(linear),
    )

    def density(points):
        pos = _disk_indicator(points, _POSITIVE_DISKS)
        neg = _disk_indicator(points, _NEGATIVE_DISKS)
        return c_max * (pos | neg).astype(float)

    def charge(points):
        pos = _disk_indicator(points, _POSITIVE_DISKS)
        neg = _disk_indicator(points, _NEGATIVE_DISKS)
        return 0.5 * c_max * (pos.astype(float) - neg.astype(float))

    immobile = ImmobileProfile(density=density, charge_density=charge)
    bath = np.array([0.0016, 0.0016])
    boundary = BoundaryData(regions={
        "left": RegionValues(u=bath, phi=0.0),
        "right": RegionValues(u=bath, phi=float(voltage)),
    })
    config = ScenarioConfig(
        name="bipolar",
        system=system,
        immobile=immobile,
        boundary=boundary,
        initial=_linear_in_x((0.0, 20.0), bath, bath),
        time=TimeGrid(tau=1.0e-3, num_steps=1000),
        extra={"voltage": float(voltage), "c_max": float(c_max),
               "cross_section_x": 10.0},
    )
    return mesh, config


def manufactured_poisson(mesh_level=0):
    """Unit-square Poisson problem with exact solution sin(pi x) sin(pi y).

    Returns ``(mesh, PoissonProblem)``; the mesh is an admissible offset
    lattice with 8 * 2**mesh_level intervals per side.
    """
    nx = 8 * 2 ** int(mesh_level)
    mesh = rectangle_lattice_mesh(nx, nx, dirichlet="all")

    def exact(points):
        return np.sin(np.pi * points[:, 0]) * np.sin(np.pi * points[:, 1])

    def rhs(points):
        return 2.0 * np.pi ** 2 * exact(points)

    problem = PoissonProblem(
        lambda2=1.0,
        rhs=rhs,
        exact=exact,
        dirichlet=lambda points: np.zeros(len(points)),
    )
    return mesh, problem


def rectangle_lattice_mesh(nx, ny=None, width=1.0, height=1.0,
                           dirichlet="none"):
    """Admissible structured triangulation of a rectangle.

    Rows of vertices are offset by half a spacing so every triangle is
    acute away from the walls and the wall triangles are right with the
    right angle at the wall: every circumcenter distance stays positive.

    ``dirichlet``: "none" (all walls insulating), "all" (every wall is the
    Dirichlet region "wall"), or "leftright" (regions "left"/"right",
    horizontal walls insulating).
    """
    nx = int(nx)
    ny = int(nx if ny is None else ny)
    if nx < 1 or ny < 1:
        raise ValueError("need at least one interval per direction")
    dx = width / nx
    dy = height / ny

    index = {}
    verts = []
    for j in range(ny + 1):
        shift = 0.5 * dx if j % 2 == 1 else 0.0
        xs = [0.0] if shift else []
        xs += [min(i * dx + shift, width) for i in range(nx)]
        xs += [width]
        row = [(x, j * dy) for x in xs]
        index[j] = [len(verts) + k for k in range(len(row))]
        verts.extend(row)
    verts = np.array(verts)

    tris = []
    for j in range(ny):
        lower = index[j]
        upper = index[j + 1]
        li = ui = 0
        # merge the two sorted rows into a triangle strip
        while li < len(lower) - 1 or ui < len(upper) - 1:
            if li == len(lower) - 1:
                tris.append((lower[li], upper[ui + 1], upper[ui]))
                ui += 1
            elif ui == len(upper) - 1:
                tris.append((lower[li], lower[li + 1], upper[ui]))
                li += 1
            else:
                xl = verts[lower[li + 1], 0]
                xu = verts[upper[ui + 1], 0]
                if abs(xl - xu) < 1e-12 * max(1.0, width):
                    # tie at the wall column: advance the coarser side so
                    # the wall triangle keeps its right angle at the wall
                    take_lower = verts[lower[li], 0] <= verts[upper[ui], 0]
                else:
                    take_lower = xl < xu
                if take_lower:
                    tris.append((lower[li], lower[li + 1], upper[ui]))
                    li += 1
                else:
                    tris.append((lower[li], upper[ui + 1], upper[ui]))
                    ui += 1
    tris = np.array(tris)

    tags = []
    raw = tris[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    pairs = np.sort(raw, axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    for a, b in uniq[counts == 1]:
        mid = 0.5 * (verts[a] + verts[b])
        if dirichlet == "all":
            tag = "D:wall"
        elif dirichlet == "leftright" and np.isclose(mid[0], 0.0):
            tag = "D:left"
        elif dirichlet == "leftright" and np.isclose(mid[0], width):
            tag = "D:right"
        else:
            tag = "N"
        tags.append((int(a), int(b), tag))
    return TriMesh(verts, tris, tags)


def neumann_box(nx=8, system=None, immobile=None, initial=None,
                tau=1.0e-3, num_steps=100):
    """All-insulating unit box: the regime where mass conservation and the
    no-drift entropy inequality are exact.
    """
    mesh = rectangle_lattice_mesh(nx, nx, dirichlet="none")
    if system is None:
        # z = 0 decouples the species from the potential: no drift, the
        # regime where the upwind scheme dissipates entropy exactly.
        system = SpeciesSystem(z=np.array([0.0, 0.0]),
                               D=np.array([1.0, 1.0]),
                               beta=1.0, lambda2=1.0)
    if immobile is None:
        immobile = ImmobileProfile.none()
    if initial is None:
        def initial(points):
            x, y = points[:, 0], points[:, 1]
            bumps = np.stack([
                0.2 + 0.15 * np.sin(np.pi * x) * np.sin(np.pi * y),
                0.25 - 0.1 * np.sin(2.0 * np.pi * x) * np.sin(np.pi * y),
            ], axis=1)
            return bumps[:, : system.n]
    config = ScenarioConfig(
        name="neumann-box",
        system=system,
        immobile=immobile,
        boundary=BoundaryData(regions={}),
        initial=initial,
        time=TimeGrid(tau=tau, num_steps=num_steps),
    )
    return mesh, config


def equilibrium_box(nx=8, tau=1.0e-3, num_steps=200, phi_wall=0.3):
    """Box with one Dirichlet wall holding thermal-equilibrium bath data.

    The bath state has spatially constant entropy variables, the regime
    where the nodal scheme dissipates the free energy exactly.
    """
    mesh = rectangle_lattice_mesh(nx, nx, dirichlet="leftright")
    system = SpeciesSystem(z=np.array([1.0, -1.0]),
                           D=np.array([1.0, 1.3]),
                           beta=1.0, lambda2=1.0)
    bath = np.array([0.18, 0.22])
    boundary = BoundaryData(regions={
        "left": RegionValues(u=bath, phi=phi_wall),
        "right": RegionValues(u=bath, phi=phi_wall),
    })

    def initial(points):
        x, y = points[:, 0], points[:, 1]
        return np.stack([
            0.18 + 0.1 * np.sin(np.pi * x) * np.sin(np.pi * y),
            0.22 - 0.08 * np.sin(np.pi * x) * np.sin(2.0 * np.pi * y),
        ], axis=1)

    config = ScenarioConfig(
        name="equilibrium-box",
        system=system,
        immobile=ImmobileProfile.none(),
        boundary=boundary,
        initial=initial,
        time=TimeGrid(tau=tau, num_steps=num_steps),
    )
    return mesh, config
