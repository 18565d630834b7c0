"""Command-line entry point: run scenarios, convergence studies, voltage
sweeps, mesh reports, and invariant checks; write CSV and VTK artifacts.

All numeric output uses the shortest round-trip decimal representation, so
a manifest run twice produces bitwise-identical files.
"""

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import diagnostics as dg
from . import fem, fvm, scenarios
from .linsys import SingularMatrix
from .mesh import (DIRICHLET, MeshError, check_admissibility, read_mesh,
                   regular_refine)
from .model import BoundaryData, ModelError, RegionValues

SCHEMES = ("fe", "fv", "fv-semi")
SCENARIO_NAMES = ("calcium", "bipolar", "neumann-box", "equilibrium-box")
MODELS = ("nonlinear", "linear")

_SOLVER_ERRORS = (fem.FemError, fvm.FvError, SingularMatrix, ModelError,
                  MeshError, dg.DiagnosticsError)


@dataclass
class RunManifest:
    """Everything a run needs; every field has a flag-form override."""

    scenario: str = "calcium"
    scheme: str = "fe"
    level: int = 0
    tau: float = None            # None: scenario default
    steps: int = None            # None: scenario default
    eps: float = 1.0e-10
    newton_tol: float = 1.0e-10
    newton_max_iter: int = 50
    out: str = "out"
    output_every: int = 1
    mode: str = None             # finite-volume Poisson coupling
    voltage: float = None        # bipolar scenario
    c_max: float = None          # bipolar scenario
    model: str = "nonlinear"     # bipolar scenario
    mesh_file: str = None        # geometry override
    seed: int = 0


def _fmt(value):
    """Shortest decimal that round-trips; integers stay integers."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


# --------------------------------------------------------------------------
# manifest assembly: defaults < config file < command-line flags


def _coerce(name, text):
    ftype = {f.name: f.type for f in fields(RunManifest)}[name]
    if ftype is int or name in ("level", "steps", "newton_max_iter",
                                "output_every", "seed"):
        return int(text)
    if name in ("tau", "eps", "newton_tol", "voltage", "c_max"):
        return float(text)
    return text


def load_manifest(config_path, flag_values):
    manifest = RunManifest()
    boundary_overrides = {}
    explicit = set()
    known = {f.name for f in fields(RunManifest)}
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise UsageError("config file not found: %s" % config_path)
        if parser.has_section("run"):
            for key, text in parser.items("run"):
                key = key.replace("-", "_")
                if key not in known:
                    raise UsageError("unknown config key [run] %s" % key)
                setattr(manifest, key, _coerce(key, text))
                explicit.add(key)
        if parser.has_section("boundary"):
            for key, text in parser.items("boundary"):
                region, _, what = key.rpartition(".")
                if what not in ("u", "phi") or not region:
                    raise UsageError(
                        "boundary keys look like <region>.u or "
                        "<region>.phi, got %r" % key)
                entry = boundary_overrides.setdefault(region, {})
                if what == "phi":
                    entry["phi"] = float(text)
                else:
                    entry["u"] = np.array(
                        [float(v) for v in text.split(",")])
    for key, value in flag_values.items():
        if value is not None and key in known:
            setattr(manifest, key, value)
            explicit.add(key)
    if manifest.scheme not in SCHEMES:
        raise UsageError("unknown scheme %r" % manifest.scheme)
    if manifest.scheme == "fe" and manifest.mode is not None:
        raise UsageError("the finite-element scheme solves the potential "
                         "monolithically; --mode applies to fv only")
    if manifest.scheme == "fv-semi":
        manifest.scheme = "fv"
        manifest.mode = "semi_implicit"
    if manifest.mode is not None and manifest.mode not in fvm.MODES:
        raise UsageError("unknown mode %r" % manifest.mode)
    if manifest.model not in MODELS:
        raise UsageError("unknown model %r" % manifest.model)
    if manifest.scenario not in SCENARIO_NAMES:
        raise UsageError("unknown scenario %r" % manifest.scenario)
    return manifest, boundary_overrides, explicit


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# scenario construction


def build_scenario(manifest, boundary_overrides=None, level=None):
    """(mesh, config) for the manifest, with overrides applied."""
    level = manifest.level if level is None else level
    name = manifest.scenario
    if name == "calcium":
        mesh, config = scenarios.calcium_channel(level=level)
    elif name == "bipolar":
        kwargs = {"linear": manifest.model == "linear"}
        if manifest.voltage is not None:
            kwargs["voltage"] = manifest.voltage
        if manifest.c_max is not None:
            kwargs["c_max"] = manifest.c_max
        mesh, config = scenarios.bipolar_channel(**kwargs)
        for _ in range(level):
            mesh = regular_refine(mesh)
    elif name == "neumann-box":
        mesh, config = scenarios.neumann_box(nx=8)
        for _ in range(level):
            mesh = regular_refine(mesh)
    else:
        mesh, config = scenarios.equilibrium_box(nx=8)
        for _ in range(level):
            mesh = regular_refine(mesh)
    if manifest.mesh_file:
        if not os.path.exists(manifest.mesh_file):
            raise UsageError("mesh file not found: %s" % manifest.mesh_file)
        mesh = read_mesh(manifest.mesh_file)
        for _ in range(level):
            mesh = regular_refine(mesh)
    overrides = {}
    if manifest.tau is not None or manifest.steps is not None \
            or manifest.output_every != 1:
        overrides["time"] = scenarios.TimeGrid(
            tau=manifest.tau if manifest.tau is not None
            else config.time.tau,
            num_steps=manifest.steps if manifest.steps is not None
            else config.time.num_steps,
            output_every=manifest.output_every)
    if boundary_overrides:
        regions = dict(config.boundary.regions)
        for region, entry in boundary_overrides.items():
            base = regions.get(region)
            regions[region] = RegionValues(
                u=entry.get("u", base.u if base else None),
                phi=entry.get("phi", base.phi if base else 0.0))
        overrides["boundary"] = BoundaryData(regions=regions)
    if overrides:
        config = config.with_overrides(**overrides)
    return mesh, config


def build_problem(manifest, boundary_overrides=None, level=None):
    mesh, config = build_scenario(manifest, boundary_overrides, level)
    params = fem.FemParams(
        tau=config.time.tau, eps=manifest.eps,
        newton_tol=manifest.newton_tol,
        newton_max_iter=manifest.newton_max_iter)
    if manifest.scheme == "fe":
        return fem.FemProblem(mesh, config.system, params, config), config
    mode = manifest.mode or "fully_implicit"
    return fvm.FvProblem(mesh, config.system, params, config,
                         mode=mode), config


# --------------------------------------------------------------------------
# writers


def write_timeseries_csv(path, records, n):
    header = ["step", "time", "entropy_rel"]
    header += ["mass_%d" % (i + 1) for i in range(n)]
    header += ["l1_dist_%d" % (i + 1) for i in range(n)]
    header += ["min_u0", "max_sum_u", "newton_iters"]
    lines = [",".join(header)]
    for r in records:
        row = [r.step, r.time, r.entropy_rel, *r.masses, *r.l1_dists,
               r.min_u0, r.max_sum_u, r.newton_iters]
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def write_vtk(path, mesh, point_data=None, cell_data=None,
              title="crosspnp fields"):
    """Legacy ASCII unstructured-grid file (triangles, scalars)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             "POINTS %d double" % mesh.num_vertices]
    for x, y in mesh.vertices:
        lines.append("%s %s 0.0" % (_fmt(x), _fmt(y)))
    lines.append("CELLS %d %d" % (mesh.num_triangles,
                                  4 * mesh.num_triangles))
    for a, b, c in mesh.triangles:
        lines.append("3 %d %d %d" % (a, b, c))
    lines.append("CELL_TYPES %d" % mesh.num_triangles)
    lines.extend(["5"] * mesh.num_triangles)

    def scalar_block(kind, count, data):
        lines.append("%s %d" % (kind, count))
        for name, values in data:
            lines.append("SCALARS %s double 1" % name)
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in np.asarray(values))

    if point_data:
        scalar_block("POINT_DATA", mesh.num_vertices, point_data)
    if cell_data:
        scalar_block("CELL_DATA", mesh.num_triangles, cell_data)
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def _state_fields(problem, state):
    """(point_data, cell_data) name/value pairs for a solver state."""
    n = problem.system.n
    if isinstance(state, fvm.CellState):
        data = [("u_%d" % (i + 1), state.u[i]) for i in range(n)]
        data.append(("u0", problem.u0_of(state.u)))
        data.append(("phi", state.phi))
        return None, data
    u, u0 = problem.vertex_concentrations(state)
    data = [("u_%d" % (i + 1), u[:, i]) for i in range(n)]
    data.append(("u0", u0))
    data.append(("phi", state.phi))
    data += [("w_%d" % (i + 1), state.w[i]) for i in range(n)]
    return data, None


def _write_summary(path, manifest, mesh, extra_lines):
    lines = ["crosspnp summary"]
    for f in fields(RunManifest):
        lines.append("%s=%s" % (f.name, getattr(manifest, f.name)))
    lines.append("mesh_vertices=%d" % mesh.num_vertices)
    lines.append("mesh_triangles=%d" % mesh.num_triangles)
    lines.append("mesh_edges=%d" % mesh.num_edges)
    lines.append("mesh_h=%s" % _fmt(mesh.h))
    lines.extend(extra_lines)
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_run(manifest, boundary_overrides):
    problem, config = build_problem(manifest, boundary_overrides)
    os.makedirs(manifest.out, exist_ok=True)
    steady = problem.solve_stationary()
    state0 = problem.initial_state()
    records, final = dg.simulate(
        problem, state0, config.time.num_steps, reference=steady,
        output_every=config.time.output_every)
    n = problem.system.n
    csv_path = os.path.join(manifest.out, "timeseries.csv")
    write_timeseries_csv(csv_path, records, n)
    for tag, state in (("final", final), ("steady", steady)):
        pd, cd = _state_fields(problem, state)
        write_vtk(os.path.join(manifest.out, "fields_%s.vtk" % tag),
                  problem.mesh, point_data=pd, cell_data=cd,
                  title="crosspnp %s state" % tag)
    last = records[-1]
    extra = ["steps_run=%d" % config.time.num_steps,
             "tau=%s" % _fmt(config.time.tau),
             "final_entropy_rel=%s" % _fmt(last.entropy_rel),
             "final_min_u0=%s" % _fmt(last.min_u0),
             "final_max_sum_u=%s" % _fmt(last.max_sum_u)]
    extra += ["final_mass_%d=%s" % (i + 1, _fmt(last.masses[i]))
              for i in range(n)]
    _write_summary(os.path.join(manifest.out, "summary.txt"),
                   manifest, problem.mesh, extra)
    print("wrote %s (%d rows)" % (csv_path, len(records)))
    print("wrote %s" % os.path.join(manifest.out, "fields_final.vtk"))
    print("wrote %s" % os.path.join(manifest.out, "summary.txt"))
    return 0


def cmd_converge(manifest, boundary_overrides, levels, ref_level,
                 checkpoints):
    if not levels:
        raise UsageError("--levels must name at least one level")
    if ref_level <= max(levels):
        raise UsageError("--ref-level must exceed every study level")
    os.makedirs(manifest.out, exist_ok=True)

    def builder(level):
        problem, _ = build_problem(manifest, boundary_overrides,
                                   level=level)
        return problem

    n = build_scenario(manifest, boundary_overrides,
                       level=min(levels))[1].system.n
    rows = tuple(range(min(n, 2))) + (-1,)
    labels = tuple("u_%d" % (i + 1) for i in range(min(n, 2))) + ("phi",)
    tables = dg.nested_convergence(
        builder, levels, ref_level, checkpoints, rows=rows, labels=labels,
        mode=manifest.mode)
    for k, table in tables.items():
        path = os.path.join(manifest.out, "convergence_k%d.csv" % k)
        lines = [",".join(["h"] + ["err_%s" % l for l in table.labels])]
        for row in range(len(table.hs)):
            vals = [table.hs[row], *table.errors[row]]
            lines.append(",".join(_fmt(v) for v in vals))
        with open(path, "w") as handle:
            handle.write("\n".join(lines) + "\n")
        spath = os.path.join(manifest.out, "slopes_k%d.csv" % k)
        slines = ["quantity,slope"]
        if table.slopes is not None:
            slines += ["%s,%s" % (l, _fmt(s))
                       for l, s in zip(table.labels, table.slopes)]
        with open(spath, "w") as handle:
            handle.write("\n".join(slines) + "\n")
        print("checkpoint %d:" % k)
        for q, label in enumerate(table.labels):
            slope = "n/a" if table.slopes is None \
                else "%.3f" % table.slopes[q]
            print("  %-6s errors %s  slope %s"
                  % (label, " ".join("%.3e" % e
                                     for e in table.errors[:, q]), slope))
        print("wrote %s" % path)
    return 0


def _sweep_point(manifest, boundary_overrides, voltage):
    point = RunManifest(**{f.name: getattr(manifest, f.name)
                           for f in fields(RunManifest)})
    point.voltage = voltage
    problem, config = build_problem(point, boundary_overrides)
    steady = problem.solve_stationary()
    section = config.extra.get("cross_section_x", 10.0)
    return dg.current(steady, problem, section)


def cmd_sweep(manifest, boundary_overrides, voltages, jobs):
    if manifest.scenario != "bipolar":
        raise UsageError("sweep is defined for the bipolar scenario")
    if not voltages:
        raise UsageError("--voltages must name at least one voltage")
    os.makedirs(manifest.out, exist_ok=True)
    results = [None] * len(voltages)

    def solve_point(idx):
        try:
            current = _sweep_point(manifest, boundary_overrides,
                                   voltages[idx])
            results[idx] = ("ok", current, "")
        except _SOLVER_ERRORS as err:
            results[idx] = ("failed", None,
                            "%s: %s" % (type(err).__name__, err))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(solve_point, range(len(voltages))))
    else:
        for idx in range(len(voltages)):
            solve_point(idx)

    currents = {voltages[i]: results[i][1]
                for i in range(len(voltages)) if results[i][0] == "ok"}
    ratios = {}
    for u, i_u in currents.items():
        if u > 0 and -u in currents and currents[-u] != 0.0:
            ratios[u] = abs(i_u / currents[-u])
    path = os.path.join(manifest.out, "cv_sweep.csv")
    lines = ["voltage,current,rectification,status,message"]
    for idx, u in enumerate(voltages):
        status, current, message = results[idx]
        lines.append(",".join([
            _fmt(u),
            "" if current is None else _fmt(current),
            _fmt(ratios[u]) if u in ratios else "",
            status, message.replace(",", ";")]))
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print("wrote %s" % path)
    return 0 if all(r[0] == "ok" for r in results) else 1


def cmd_meshinfo(manifest, boundary_overrides):
    mesh, _ = build_scenario(manifest, boundary_overrides)
    print("vertices=%d triangles=%d edges=%d" %
          (mesh.num_vertices, mesh.num_triangles, mesh.num_edges))
    print("h=%s" % _fmt(mesh.h))
    print("triangle_area_min=%s max=%s"
          % (_fmt(mesh.tri_areas.min()), _fmt(mesh.tri_areas.max())))
    print("orthogonality_defect_max=%s"
          % _fmt(float(mesh.orthogonality_defect.max())))
    kinds = {0: "internal", 1: "dirichlet", 2: "neumann"}
    for kind, name in kinds.items():
        print("%s_edges=%d" % (name, int((mesh.edge_kind == kind).sum())))
    counts = {}
    for e in np.flatnonzero(mesh.edge_kind == DIRICHLET):
        name = mesh.edge_tag_names[e]
        counts[name] = counts.get(name, 0) + 1
    for name in sorted(counts):
        print("dirichlet_tag %s edges=%d" % (name, counts[name]))
    report = check_admissibility(mesh)
    if not report.ok:
        print("admissible=False (%d violations)"
              % len(report.violations))
        for item in report.violations[:10]:
            print("  edge %d %s (%.3e)" % item)
        return 1
    print("admissible=True")
    return 0


def cmd_check(manifest, boundary_overrides):
    problem, config = build_problem(manifest, boundary_overrides)
    rng = np.random.default_rng(manifest.seed)
    failures = []

    def report(name, ok, detail=""):
        print("%s: %s%s" % ("ok" if ok else "FAIL", name,
                            " (%s)" % detail if detail else ""))
        if not ok:
            failures.append(name)

    report("boundary data valid",
           _try(lambda: config.boundary.check(config.system)))
    admissible = check_admissibility(problem.mesh).ok
    if manifest.scheme == "fe":
        report("mesh admissible (informational for fe)", True,
               "yes" if admissible else "no")
    else:
        report("mesh admissible", admissible)
    state0 = problem.initial_state()
    state0.check_finite()
    report("initial state finite", True)
    state1, info = problem.step(state0)
    state1.check_finite()
    report("one implicit Euler step", True,
           "%d Newton iterations" % info.newton_iters)
    _, min_u0, max_sum_u, min_u, _, _ = dg._state_monitors(problem, state1)
    report("positivity after one step", bool(min_u.min() > -1e-12),
           "min u_i = %.3e" % min_u.min())
    report("saturation bound after one step",
           bool(max_sum_u <= 1.0 + 1e-12), "max sum = %.6f" % max_sum_u)
    if manifest.scheme == "fe":
        u, u0 = problem.vertex_concentrations(state1)
        gap = np.abs(u.sum(axis=1) + u0 + problem.c_vert - 1.0).max()
        report("volume-filling identity", bool(gap < 1e-12),
               "max gap %.2e" % gap)
    else:
        worst = 0.0
        for _ in range(5):
            u = rng.uniform(0.05, 0.2, size=state1.u.shape)
            phi = rng.standard_normal(state1.phi.shape)
            F, _ = problem.flux_terms(u, phi)
            # conservativity: re-derive the flux from the far side
            Fr = _far_side_flux(problem, u, phi)
            inner = problem.internal
            worst = max(worst,
                        float(np.abs(F[:, inner] + Fr[:, inner]).max()))
        report("flux conservativity on random states",
               worst <= 1e-13, "max |F_K + F_L| = %.2e" % worst)
    return 1 if failures else 0


def _try(thunk):
    try:
        thunk()
        return True
    except Exception:
        return False


def _far_side_flux(problem, u, phi):
    """Fluxes evaluated from the neighbouring cell's point of view."""
    system = problem.system
    uK, u0K, phiK, uO, u0O, phiO = problem.edge_values(u, phi)
    du = uK - uO
    du0 = u0K - u0O
    dphi = phiK - phiO
    s = system.z[:, None] * dphi[None, :]
    u0hat = np.where(s >= 0.0, u0O[None, :], u0K[None, :])
    V = du0[None, :] - u0hat * system.beta * s
    u_up = np.where(V >= 0.0, uO, uK)
    u0max = np.maximum(u0O, u0K)
    F = -problem.tau_e[None, :] * system.D[:, None] \
        * (u0max[None, :] * du - u_up * V)
    return np.where(problem.active[None, :], F, 0.0)


# --------------------------------------------------------------------------
# argument parsing


def _add_manifest_flags(sub):
    sub.add_argument("--config", help="INI manifest file ([run] section; "
                     "optional [boundary] overrides)")
    sub.add_argument("--scenario", choices=SCENARIO_NAMES)
    sub.add_argument("--scheme", choices=SCHEMES)
    sub.add_argument("--level", type=int)
    sub.add_argument("--tau", type=float)
    sub.add_argument("--steps", type=int)
    sub.add_argument("--eps", type=float)
    sub.add_argument("--newton-tol", type=float, dest="newton_tol")
    sub.add_argument("--newton-max-iter", type=int, dest="newton_max_iter")
    sub.add_argument("--out")
    sub.add_argument("--output-every", type=int, dest="output_every")
    sub.add_argument("--mode", choices=fvm.MODES)
    sub.add_argument("--voltage", type=float)
    sub.add_argument("--c-max", type=float, dest="c_max")
    sub.add_argument("--model", choices=MODELS)
    sub.add_argument("--mesh-file", dest="mesh_file")
    sub.add_argument("--seed", type=int)


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crosspnp",
        description="Solvers and diagnostics for degenerate "
                    "Poisson--Nernst--Planck ion transport.")
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="time-step a scenario, write CSV "
                                      "and field files")
    _add_manifest_flags(run)

    conv = subs.add_parser("converge",
                           help="nested-mesh convergence study")
    _add_manifest_flags(conv)
    conv.add_argument("--levels", type=_int_list, default=[0, 1, 2])
    conv.add_argument("--ref-level", type=int, dest="ref_level", default=3)
    conv.add_argument("--checkpoints", type=_int_list, default=[600])

    sweep = subs.add_parser("sweep", help="stationary current-voltage "
                                          "sweep (bipolar scenario)")
    _add_manifest_flags(sweep)
    sweep.add_argument("--voltages", type=_float_list,
                       default=[-1.0, -0.5, 0.5, 1.0])
    sweep.add_argument("--jobs", type=int, default=1)

    info = subs.add_parser("meshinfo", help="mesh size, dual geometry, "
                                            "and admissibility report")
    _add_manifest_flags(info)

    check = subs.add_parser("check", help="run the invariant battery on "
                                          "a scenario")
    _add_manifest_flags(check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flag_values = {f.name: getattr(args, f.name, None)
                   for f in fields(RunManifest)}
    try:
        manifest, boundary_overrides, explicit = load_manifest(
            getattr(args, "config", None), flag_values)
        if args.command == "sweep" and "scenario" not in explicit:
            manifest.scenario = "bipolar"
        if args.command == "run":
            return cmd_run(manifest, boundary_overrides)
        if args.command == "converge":
            return cmd_converge(manifest, boundary_overrides, args.levels,
                                args.ref_level, args.checkpoints)
        if args.command == "sweep":
            return cmd_sweep(manifest, boundary_overrides, args.voltages,
                             args.jobs)
        if args.command == "meshinfo":
            return cmd_meshinfo(manifest, boundary_overrides)
        return cmd_check(manifest, boundary_overrides)
    except UsageError as err:
        parser.error(str(err))            # exits with status 2
    except _SOLVER_ERRORS as err:
        sys.stderr.write(json.dumps(
            {"error": type(err).__name__, "message": str(err)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
