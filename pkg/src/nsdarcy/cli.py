"""Command-line front end: solve, verify, mms, mesh-info.

Configuration is a flat JSON document; command-line flags override file
keys.  All outputs are deterministic for a fixed config and seed, and are
written only after the computation succeeds (a failing run leaves no
partial files).

Exit codes: 0 success, 1 verification failure, 2 solver failure,
3 configuration error.
"""

import argparse
import json
import math
import os
import re
import sys

import numpy as np

from . import analysis, assembly, mms, solver
from .fem import CoupledSpace, InterpolationError, SingularLinearSystem, SpaceError
from .mesh import (MeshError, build_rectangle_mesh, dump_mesh, load_gmsh_subset,
                   load_mesh, refine_uniform, FLUID, POROUS)
from .vtk import write_legacy_vtk

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_SOLVER = 2
EXIT_CONFIG = 3

# dense inf-sup eigensolves stay cheap up to roughly this many pressure dofs
_INF_SUP_DOF_CAP = 2000


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; ours means a solver
    failure, so usage errors are remapped to the config-error code."""

    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# forcing presets
# ---------------------------------------------------------------------------

def _driven_f(x, y):
    return (np.sin(np.pi * x) * (2 - y), x * np.cos(np.pi * y))


def _driven_p(x, y):
    return np.sin(np.pi * x) * y


def _scaled(fn, a):
    def wrapped(x, y):
        v = fn(x, y)
        return a * v if np.isscalar(v) else tuple(a * c for c in v)
    return wrapped


FORCINGS = {
    "none": (None, None),
    "driven": (_driven_f, _driven_p),
    "small": (_scaled(_driven_f, 0.02), _scaled(_driven_p, 0.02)),
    "head-driven": (None, _driven_p),
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "mesh": "builtin:4x8",
    "levels": None,
    "nu": 1.0,
    "K": 1.0,
    "G": 1.0,
    "sigma": None,
    "forcing": "driven",
    "case": None,
    "c_mult": 4.0,
    "seed": 0,
    "out": ".",
    "no_convection": False,
    "vtk": False,
    "velocity_degree": 2,
    "head_degree": 1,
    "tol": 1e-10,
    "max_iter": 25,
    "scheme": "picard_then_newton",
    "linear_solver": "lu",
    "pressure_gauge": "mean",
    "unstable_pair": False,
    "no_assert": False,
    "dump": False,
}

_FLAG_KEYS = ("mesh", "levels", "c_mult", "seed", "out", "sigma", "case")
_TRUE_FLAGS = ("no_convection", "vtk", "unstable_pair", "no_assert", "dump")


def load_config(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in _TRUE_FLAGS:
        if getattr(args, key, False):
            cfg[key] = True
    if cfg["levels"] is not None and int(cfg["levels"]) < 1:
        raise ConfigError("levels must be at least 1")
    if cfg["case"] is not None and cfg["case"] not in mms.CASE_NAMES:
        raise ConfigError(f"unknown case {cfg['case']!r}; "
                          f"available: {', '.join(mms.CASE_NAMES)}")
    if cfg["forcing"] not in FORCINGS:
        raise ConfigError(f"unknown forcing {cfg['forcing']!r}; "
                          f"available: {', '.join(sorted(FORCINGS))}")
    return cfg


def resolve_mesh(spec):
    m = re.fullmatch(r"builtin:(\d+)x(\d+)", str(spec))
    if m:
        return build_rectangle_mesh(int(m.group(1)), int(m.group(2)), 1.0)
    if str(spec).startswith("builtin:"):
        raise ConfigError(f"bad builtin mesh spec {spec!r} (want builtin:WxH)")
    try:
        if str(spec).endswith(".msh"):
            return load_gmsh_subset(spec)
        with open(spec) as fh:
            return load_mesh(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read mesh {spec!r}: {exc}") from exc
    except MeshError as exc:
        raise ConfigError(f"bad mesh file {spec!r}: {exc}") from exc


def _solver_config(cfg):
    return solver.SolverConfig(
        tol=cfg["tol"], max_iter=cfg["max_iter"], scheme=cfg["scheme"],
        include_convection=not cfg["no_convection"],
        linear_solver=cfg["linear_solver"],
        pressure_gauge=cfg["pressure_gauge"])


def _sanitize(obj):
    """NaN is not valid JSON; emit null instead."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_sanitize(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _mesh_summary(mesh):
    tags = {}
    for tag in np.unique(mesh.boundary_tags):
        tags[str(int(tag))] = int(np.sum(mesh.boundary_tags == tag))
    return {
        "num_vertices": mesh.num_vertices,
        "num_triangles": mesh.num_triangles,
        "fluid_triangles": int(len(mesh.fluid_triangles())),
        "porous_triangles": int(len(mesh.porous_triangles())),
        "interface_edges": int(len(mesh.interface_edges)),
        "boundary_edges_by_tag": tags,
        "fluid_area": mesh.subdomain_area(FLUID),
        "porous_area": mesh.subdomain_area(POROUS),
        "h": mesh.h,
    }


def _outdir(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(cfg):
    mesh = resolve_mesh(cfg["mesh"])
    space = CoupledSpace(mesh, velocity_degree=int(cfg["velocity_degree"]),
                         head_degree=int(cfg["head_degree"]))
    case = mms.get_case(cfg["case"]) if cfg["case"] else None
    if case is not None:
        params = case.params(mesh, sigma=cfg["sigma"])
        extra = case.interface_loads(space)
        dirichlet = case.dirichlet
    else:
        g_f, g_p = FORCINGS[cfg["forcing"]]
        params = assembly.ModelParams(mesh, nu=cfg["nu"], K=cfg["K"],
                                      G=cfg["G"], sigma=cfg["sigma"],
                                      g_f=g_f, g_p=g_p)
        extra, dirichlet = None, None

    state = solver.solve_coupled(space, params, _solver_config(cfg),
                                 dirichlet=dirichlet, extra_loads=extra)
    report = analysis.verify_energy_estimate(
        space, params, state, c_mult=cfg["c_mult"],
        with_inf_sup=space.num_pressure_dofs <= _INF_SUP_DOF_CAP,
        with_companion=dirichlet is None)

    payload = {
        "command": "solve",
        "mesh": _mesh_summary(mesh),
        "forcing": None if case else cfg["forcing"],
        "case": cfg["case"],
        "solver": {
            "converged": state.converged,
            "iterations": state.iterations,
            "residual": state.residual,
            "include_convection": not cfg["no_convection"],
            "scheme": cfg["scheme"],
            "pressure_gauge": cfg["pressure_gauge"],
        },
        "transcript": state.transcript,
        "energy": report.to_dict(),
    }
    if case is not None:
        payload["errors"] = mms.solution_errors(space, case, state)

    out = _outdir(cfg)
    report_path = os.path.join(out, "report.json")
    _write_json(report_path, payload)
    if cfg["vtk"]:
        write_legacy_vtk(os.path.join(out, "fields.vtk"), space, state)
    print(f"wrote {report_path}")
    print(f"converged={state.converged} iterations={state.iterations} "
          f"residual={state.residual!r}")
    return EXIT_OK


def _energy_suite(cfg):
    return [
        {"name": "driven", "nu": 1.0, "K": 1.0, "forcing": "driven"},
        {"name": "viscous", "nu": 0.5, "K": 2.0, "forcing": "driven"},
        {"name": "head-driven", "nu": 1.0, "K": 1.0, "forcing": "head-driven"},
    ]


def cmd_verify(cfg):
    levels = int(cfg["levels"]) if cfg["levels"] is not None else 3
    c_mult = float(cfg["c_mult"])
    base_mesh = resolve_mesh(cfg["mesh"])
    config = _solver_config(cfg)
    checks = []

    # a priori energy bound, balance equality, and pressure bound per dataset
    balance_max = 0.0
    pressure_max = 0.0
    ratio_rows = []
    bound_ok = balance_ok = pressure_ok = True
    for spec in _energy_suite(cfg):
        g_f, g_p = FORCINGS[spec["forcing"]]
        mesh = base_mesh
        ratios = []
        for level in range(levels):
            space = CoupledSpace(mesh)
            params = assembly.ModelParams(mesh, nu=spec["nu"], K=spec["K"],
                                          sigma=cfg["sigma"], g_f=g_f, g_p=g_p)
            state = solver.solve_coupled(space, params, config)
            rep = analysis.verify_energy_estimate(
                space, params, state, c_mult=c_mult,
                with_inf_sup=space.num_pressure_dofs <= _INF_SUP_DOF_CAP,
                with_companion=True)
            ratios.append(rep.bound_ratio)
            balance_max = max(balance_max, rep.balance_defect_rel)
            bound_ok &= rep.bound_ok
            balance_ok &= rep.balance_defect_rel <= 1e-9
            if np.isfinite(rep.beta):
                p_ratio = (rep.beta * rep.pressure_norm
                           / max(rep.pressure_dual, 1e-30))
                pressure_max = max(pressure_max, p_ratio)
                pressure_ok &= p_ratio <= c_mult
            mesh = refine_uniform(mesh)
        spread = ((max(ratios) - min(ratios)) / min(ratios)
                  if min(ratios) > 0 else 0.0)
        bound_ok &= spread < 0.10
        ratio_rows.append({"dataset": spec["name"], "bound_ratios": ratios,
                           "spread": spread})
    checks.append({"name": "energy_balance", "passed": bool(balance_ok),
                   "details": {"max_balance_defect_rel": balance_max,
                               "tolerance": 1e-9}})
    checks.append({"name": "energy_bound", "passed": bool(bound_ok),
                   "details": {"c_mult": c_mult, "datasets": ratio_rows}})
    checks.append({"name": "pressure_bound", "passed": bool(pressure_ok),
                   "details": {"max_ratio": pressure_max, "c_mult": c_mult}})

    # inf-sup sweep (the dense eigensolve caps the level count)
    vdeg = 1 if cfg["unstable_pair"] else 2
    betas = []
    mesh = base_mesh
    for level in range(min(levels, 3)):
        space = CoupledSpace(mesh, velocity_degree=vdeg)
        betas.append(analysis.compute_inf_sup(space).beta)
        mesh = refine_uniform(mesh)
    spread = ((max(betas) - min(betas)) / min(betas)
              if min(betas) > 0 else np.inf)
    infsup_ok = all(b > 0.2 for b in betas) and (len(betas) < 2
                                                 or spread < 0.10)
    checks.append({"name": "inf_sup", "passed": bool(infsup_ok),
                   "details": {"velocity_degree": vdeg, "betas": betas,
                               "spread": None if np.isinf(spread) else spread}})

    # compensation refinement sweep
    g_f, g_p = FORCINGS["driven"]
    mesh = base_mesh
    residuals = []
    for level in range(levels):
        space = CoupledSpace(mesh)
        params = assembly.ModelParams(mesh, nu=cfg["nu"], K=cfg["K"],
                                      sigma=cfg["sigma"], g_f=g_f, g_p=g_p)
        state = solver.solve_coupled(space, params, config)
        residuals.append(
            analysis.compensation_residual(space, params, state=state).residual)
        mesh = refine_uniform(mesh)
    if levels < 2:
        checks.append({"name": "compensation", "passed": True,
                       "details": {"status": "insufficient levels",
                                   "residuals": residuals}})
    else:
        decreasing = all(b <= 1.2 * a for a, b in zip(residuals, residuals[1:]))
        comp_ok = decreasing and residuals[-1] < residuals[0]
        checks.append({"name": "compensation", "passed": bool(comp_ok),
                       "details": {"residuals": residuals}})

    # two-start uniqueness on small data
    g_f, g_p = FORCINGS["small"]
    space = CoupledSpace(base_mesh)
    params = assembly.ModelParams(base_mesh, nu=cfg["nu"], K=cfg["K"],
                                  sigma=cfg["sigma"], g_f=g_f, g_p=g_p)
    unique = analysis.check_uniqueness(space, params, c_mult=c_mult,
                                       seed=int(cfg["seed"]), config=config)
    checks.append({"name": "uniqueness", "passed": unique.verdict == "unique",
                   "details": unique.to_dict()})

    bundle = {"command": "verify", "passed": all(c["passed"] for c in checks),
              "levels": levels, "checks": checks}
    out = _outdir(cfg)
    path = os.path.join(out, "verification.json")
    _write_json(path, bundle)
    print(f"wrote {path}")
    for check in checks:
        print(f"{check['name']}: {'pass' if check['passed'] else 'FAIL'}")
    if not bundle["passed"]:
        failing = [c["name"] for c in checks if not c["passed"]]
        print(f"failing checks: {', '.join(failing)}", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


_RATE_BANDS = {"rate_u_h1": (2.0, 0.25), "rate_u_l2": (3.0, 0.3),
               "rate_p_l2": (2.0, 0.3)}


def cmd_mms(cfg):
    case_name = cfg["case"] or "smooth"
    case = mms.get_case(case_name)
    assert_rates = case_name == "smooth" and not cfg["no_assert"]
    if cfg["levels"] is not None:
        levels = int(cfg["levels"])
    else:
        levels = 4 if case_name == "smooth" else 2
    if assert_rates and levels < 3:
        raise ConfigError("rate assertion needs at least 3 levels "
                          "(pass --no-assert to run fewer)")

    m = re.fullmatch(r"builtin:(\d+)x(\d+)", str(cfg["mesh"]))
    if not m:
        raise ConfigError("mms runs on builtin meshes (builtin:WxH)")
    base = (int(m.group(1)), int(m.group(2)))
    study = mms.convergence_study(case, num_levels=levels, base=base,
                                  config=_solver_config(cfg),
                                  velocity_degree=int(cfg["velocity_degree"]),
                                  head_degree=int(cfg["head_degree"]))

    failures = []
    rates = study.final_rates() if levels >= 2 else {}
    if assert_rates:
        bands = dict(_RATE_BANDS)
        bands["rate_phi_h1"] = ((1.0, 0.2) if int(cfg["head_degree"]) == 1
                                else (2.0, 0.3))
        for key, (target, tol) in sorted(bands.items()):
            if abs(rates[key] - target) > tol:
                failures.append(f"{key}={rates[key]:.3f} outside "
                                f"{target}+-{tol}")
    if case_name == "representable" and not cfg["no_assert"]:
        for row in study.rows:
            for key in ("err_u_h1", "err_u_l2", "err_p_l2", "err_phi_h1"):
                if row[key] > 1e-9:
                    failures.append(f"level {row['level']}: {key}="
                                    f"{row[key]:.3e} above 1e-9")

    out = _outdir(cfg)
    csv_path = os.path.join(out, "rates.csv")
    study.to_csv(csv_path)
    payload = {"command": "mms", "case": case_name, "levels": levels,
               "rows": study.rows, "final_rates": rates,
               "passed": not failures, "failures": failures}
    json_path = os.path.join(out, "mms.json")
    _write_json(json_path, payload)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    for row in study.rows:
        print(f"level {row['level']}: h={row['h']!r} "
              f"err_u_h1={row['err_u_h1']!r}")
    if failures:
        for line in failures:
            print(line, file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_mesh_info(cfg):
    mesh = resolve_mesh(cfg["mesh"])
    if cfg["dump"]:
        sys.stdout.write(dump_mesh(mesh))
        return EXIT_OK
    print(json.dumps(_sanitize(_mesh_summary(mesh)), indent=2,
                     sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="nsdarcy",
                     description="Coupled Navier-Stokes/Darcy solver and "
                                 "verification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--mesh", help="builtin:WxH or a mesh file path")
        p.add_argument("--levels", type=int, help="refinement levels")
        p.add_argument("--c-mult", dest="c_mult", type=float,
                       help="multiplier for generic-constant checks")
        p.add_argument("--seed", type=int, help="seed for randomized checks")
        p.add_argument("--out", help="output directory")
        p.add_argument("--sigma", type=float,
                       help="companion viscosity (default nu*h)")
        p.add_argument("--no-convection", dest="no_convection",
                       action="store_true",
                       help="linear Stokes-Darcy configuration")

    p_solve = sub.add_parser("solve", help="solve one coupled problem")
    common(p_solve)
    p_solve.add_argument("--case", help="manufactured case instead of a "
                                        "forcing preset")
    p_solve.add_argument("--vtk", action="store_true",
                         help="also write fields.vtk")
    p_solve.set_defaults(func=cmd_solve)

    p_verify = sub.add_parser("verify", help="run the verification bundle")
    common(p_verify)
    p_verify.add_argument("--unstable-pair", dest="unstable_pair",
                          action="store_true",
                          help="negative control: equal-order velocity/"
                               "pressure pair in the inf-sup check")
    p_verify.set_defaults(func=cmd_verify)

    p_mms = sub.add_parser("mms", help="manufactured-solution rate study")
    common(p_mms)
    p_mms.add_argument("--case", help="smooth (default) or representable")
    p_mms.add_argument("--no-assert", dest="no_assert", action="store_true",
                       help="report rates without gating the exit code")
    p_mms.set_defaults(func=cmd_mms)

    p_info = sub.add_parser("mesh-info", help="inspect a mesh")
    common(p_info)
    p_info.add_argument("--dump", action="store_true",
                        help="print the canonical text form instead of a "
                             "summary")
    p_info.set_defaults(func=cmd_mesh_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return args.func(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (assembly.ParameterError, SpaceError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except solver.NonConvergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (SingularLinearSystem, InterpolationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
