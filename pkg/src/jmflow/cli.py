"""Command-line entry point ``jmflow``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from .acceptance import compare_dirs, run_criteria, write_csv, write_json
from .action import DEFAULT, ActionOptions, PhiCache, phi_free
from .core import CollisionError, MassSystem, PhaseState, energy, mass_norm
from .dynamics import SingularityReport, StepFailure, integrate
from .horofunctions import Lattice, busemann_estimate, cone_lattice, viscosity_residual, \
    HorofunctionField
from .rays import MembershipError, RayOptions, compactness_experiment, dilation_sequence, \
    gr_membership
from .scenario import ScenarioError, load_scenario
from .shape import ConeSpec, NonConvergence, ConeExit, limit_shape, solve_many
from .slice import box_counting_dimension, differential_of_field, flow_saturate, \
    hausdorff_measure_patch, phase_coordinates, solved_field

COMMANDS = ("phi", "ray", "busemann", "viscosity", "limit-shape", "shape-solve", "slice",
            "dimension", "compactness", "verify-all")
DOMAIN_ERRORS = (ValueError, CollisionError, ScenarioError, RuntimeError, StepFailure,
                 MembershipError, NonConvergence, ConeExit, FileNotFoundError, KeyError)


# ---------------------------------------------------------------- io helpers

def read_matrix(path) -> np.ndarray:
    """Numeric CSV rows; non-numeric rows (headers) are skipped."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.reader(fh):
            try:
                rows.append([float(x) for x in r if x.strip() != ""])
            except ValueError:
                continue
    if not rows:
        raise ValueError(f"{path}: no numeric rows")
    return np.array(rows)


def read_vector(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".json":
        return np.asarray(json.loads(p.read_text()), float).ravel()
    return read_matrix(p).ravel()


class Run:
    """Collects outputs of one command and appends the run ledger entry."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.t0 = time.perf_counter()
        self.scenario = load_scenario(args.scenario) if args.scenario else None

    def path(self, name):
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def cache(self):
        return PhiCache()

    def record(self):
        params = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        rec = {"command": self.args.command,
               "scenario_sha256": self.scenario.sha256 if self.scenario else None,
               "scenario": self.scenario.source if self.scenario else None,
               "parameters": params, "outputs": self.outputs,
               "wall_time": time.perf_counter() - self.t0, "version": __version__}
        ledger = self.out / "runs.jsonl"
        with FileLock(str(ledger) + ".lock"):
            with open(ledger, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
        return rec


def _need_scenario(run):
    if run.scenario is None:
        raise ValueError("this command needs --scenario")
    return run.scenario


def _config(sc, ref):
    """A configuration named by a state (name or index), or 'origin'."""
    if ref == "origin":
        return np.zeros(sc.ms.n)
    return sc.state(ref).q


def _emit(run, obj):
    if run.args.json:
        print(json.dumps(obj, sort_keys=True, default=_default))
    return obj


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


# ---------------------------------------------------------------- commands

def cmd_phi(run):
    sc = _need_scenario(run)
    a = run.args
    opts = ActionOptions(m_final=a.M)
    cache = run.cache()
    if a.pairs:
        P = read_matrix(a.pairs)
        n = sc.ms.n
        rows = []
        for r in P:
            h = r[2 * n] if r.size > 2 * n else a.h
            res = phi_free(sc.ms, h, r[:n], r[n:2 * n], opts, cache)
            rows.append((h, res.value, res.T_star, res.status))
        write_csv(run.path("phi.csv"), ["h", "value", "T_star", "status"], rows)
        return _emit(run, {"count": len(rows)})
    res = phi_free(sc.ms, a.h, _config(sc, a.from_), _config(sc, a.to), opts, cache)
    d = res.to_dict()
    write_json(run.path("phi.json"), d)
    return _emit(run, d)


def cmd_ray(run):
    sc = _need_scenario(run)
    a = run.args
    cert = gr_membership(sc.ms, sc.state(a.state), RayOptions(T_max=a.tmax, threads=a.threads),
                         DEFAULT, run.cache())
    d = cert.to_dict()
    write_json(run.path("ray.json"), d)
    return _emit(run, d)


def _ray_state(run):
    """Initial state from --ray (trajectory CSV, first row) or --state."""
    sc = _need_scenario(run)
    a = run.args
    if a.ray:
        row = read_matrix(a.ray)[0]
        n = sc.ms.n
        return PhaseState(sc.ms, row[1:1 + n], row[1 + n:1 + 2 * n])
    return sc.state(a.state)


def _lattice_to_dict(lat: Lattice):
    return {"center": lat.center, "basis": lat.basis, "spacing": lat.spacing,
            "shape": list(lat.shape)}


def cmd_busemann(run):
    sc = _need_scenario(run)
    a = run.args
    ms = sc.ms
    s0 = _ray_state(run)
    h = energy(ms, s0)
    if a.grid:
        grid, lat = read_matrix(a.grid), None
    else:
        g = sc.grids[a.grid_name]
        lat = g if isinstance(g, Lattice) else None
        grid = sc.grid_points(a.grid_name)
    sched = tuple(float(t) for t in a.truncations.split(","))
    ray = integrate(ms, s0, sched[-1] + 10.0)
    if isinstance(ray, SingularityReport):
        raise RuntimeError(f"ray hits a collision approach at t = {ray.t_star:.6g}")
    fld = busemann_estimate(ms, ray, h, grid, sched, a.tol, DEFAULT, run.cache(), a.threads,
                            lat)
    write_csv(run.path("busemann.csv"), [f"x{c}" for c in range(ms.n)] + ["u", "increment"],
              fld.to_rows())
    d = {"h": fld.h, "values": fld.values, "increments": fld.increments,
         "truncations": list(fld.truncations), "converged": fld.converged,
         "status": fld.status, "grid": fld.grid, "masses": ms.masses, "dim": ms.dim,
         "lattice": _lattice_to_dict(lat) if lat is not None else None}
    write_json(run.path("busemann.json"), d)
    return _emit(run, {"converged": fld.converged, "max_increment": fld.max_increment})


def cmd_viscosity(run):
    a = run.args
    doc = json.loads(Path(a.field).read_text())
    ms = MassSystem(doc["masses"], doc["dim"])
    lt = doc.get("lattice")
    if not lt:
        raise ValueError("field file has no lattice; viscosity needs a regular lattice")
    lat = Lattice(np.array(lt["center"]), np.array(lt["basis"]), lt["spacing"],
                  tuple(lt["shape"]))
    vals = np.array(doc["values"], float)
    fld = HorofunctionField(np.array(doc["grid"]), vals, doc["h"], tuple(doc["truncations"]),
                            np.zeros_like(vals), vals[None, :], True, lattice=lat)
    rep = viscosity_residual(ms, fld)
    rows = [list(g) + [r, int(m)] for g, r, m in zip(fld.grid, rep.residuals, rep.mask)]
    write_csv(run.path("viscosity.csv"),
              [f"x{c}" for c in range(ms.n)] + ["residual", "masked"], rows)
    return _emit(run, rep.summary())


def cmd_limit_shape(run):
    sc = _need_scenario(run)
    a = run.args
    e = limit_shape(sc.ms, sc.state(a.state), a.horizon)
    d = {"a": e.a, "p": e.p, "fit_residual": e.fit_residual, "horizon": e.horizon,
         "h": e.h, "energy_gap": e.energy_gap, "method": e.method}
    write_json(run.path("limit_shape.json"), d)
    return _emit(run, d)


def _cone(run):
    sc = _need_scenario(run)
    a = run.args
    if a.a:
        vec = read_vector(a.a)
        alpha, r = a.alpha, a.r
    else:
        sh = sc.shapes[a.shape] if a.shape else next(iter(sc.shapes.values()))
        vec = sh.a
        alpha = a.alpha if a.alpha is not None else sh.alpha
        r = a.r if a.r is not None else sh.r
    return ConeSpec(sc.ms, vec, 0.9 if alpha is None else alpha, 1.0 if r is None else r)


def _grid_spec(ms, cone, spec):
    """'scale,spacing,per_axis': lattice centred at scale * a/|a|."""
    scale, spacing, per = spec.split(",")
    center = float(scale) * cone.a / mass_norm(ms, cone.a)
    return cone_lattice(ms, center, float(spacing), int(per))


def cmd_shape_solve(run):
    sc = _need_scenario(run)
    a = run.args
    cone = _cone(run)
    pts = read_matrix(a.points) if a.points else _grid_spec(sc.ms, cone, a.grid_spec).points()
    sols = solve_many(sc.ms, cone, pts, threads=a.threads)
    n = sc.ms.n
    write_csv(run.path("shape_solve.csv"),
              [f"x{c}" for c in range(n)] + [f"v{c}" for c in range(n)] + ["residual", "status"],
              [list(s.x) + list(s.v) + [s.residual, s.status] for s in sols])
    conv = sum(s.converged for s in sols)
    return _emit(run, {"points": len(sols), "converged": conv})


def cmd_slice(run):
    sc = _need_scenario(run)
    a = run.args
    ms = sc.ms
    cone = _cone(run)
    lat = _grid_spec(ms, cone, a.grid_spec)
    patch = differential_of_field(ms, lat.points(), solved_field(ms, cone), a.fd_step,
                                  threads=a.threads, lattice=lat, cone=cone)
    meas = hausdorff_measure_patch(patch, lat.spacing ** lat.basis.shape[1])
    write_csv(run.path("slice.csv"),
              [f"x{c}" for c in range(ms.n)] + [f"v{c}" for c in range(ms.n)]
              + ["jacobian", "asymmetry", "dropped"], patch.rows())
    d = {"measure": meas.value, "volume": meas.volume, "max_jacobian": meas.max_jacobian,
         "dropped_fraction": meas.dropped_fraction, "reliable": meas.reliable,
         "min_jacobian": float(np.nanmin(patch.jacobians)) if patch.kept.any() else None}
    if a.saturate is not None:
        q, v = patch.graph()
        cloud = flow_saturate(ms, q, v, a.saturate, threads=a.threads)
        D = lat.spacing * (max(lat.shape) - 1)
        pc = phase_coordinates(ms, cloud.q, cloud.v, D / mass_norm(ms, cone.a))
        k = pc.shape[1] // 2
        write_csv(run.path("cloud.csv"), [f"q{c}" for c in range(k)] + [f"w{c}" for c in range(k)],
                  pc.tolist())
        d["cloud_points"] = len(pc)
        d["backward_failures"] = [list(f) for f in cloud.failures]
    write_json(run.path("slice.json"), d)
    return _emit(run, d)


def cmd_dimension(run):
    a = run.args
    cloud = read_matrix(a.cloud)
    est = box_counting_dimension(cloud, a.scales, window=not a.no_window, seed=a.seed,
                                 threads=a.threads)
    d = est.to_dict()
    write_json(run.path("dimension.json"), d)
    return _emit(run, d)


def cmd_compactness(run):
    sc = _need_scenario(run)
    a = run.args
    ms = sc.ms
    s0 = sc.state(a.state)
    if a.sequence:
        S = read_matrix(a.sequence)
        seq = [PhaseState(ms, r[:ms.n], r[ms.n:2 * ms.n]) for r in S]
        ns = list(range(1, len(seq) + 1))
    else:
        ns = [int(x) for x in a.ns.split(",")]
        seq = dilation_sequence(ms, s0, a.eps, ns)
    if a.grid:
        grid = read_matrix(a.grid)
    else:
        grid = sc.grid_points(a.grid_name)
    rep = compactness_experiment(ms, seq, s0, grid, ns, None, a.t_trunc,
                                 ray_opts=RayOptions(T_max=a.tmax, threads=a.threads),
                                 cache=run.cache())
    d = rep.to_dict()
    write_json(run.path("compactness.json"), d)
    write_csv(run.path("compactness_grid.csv"), ["n"] + [f"g{j}" for j in range(len(grid))],
              [[n] + list(v) for n, v in zip(ns, rep.grid_values)])
    return _emit(run, d)


def cmd_verify_all(run):
    a = run.args
    nums = [int(x) for x in a.criteria.split(",")] if a.criteria else None
    echo = None if a.json else print
    res = run_criteria(run.out / "verify", a.seed, a.threads, nums, echo=echo)
    run.outputs.append(str(run.out / "verify"))
    ok = all(r.passed for r in res)
    d = {"passed": ok, "criteria": {str(r.number): r.passed for r in res}}
    if a.twice:
        run_criteria(run.out / "verify-repeat", a.seed, a.threads, nums)
        diff = compare_dirs(run.out / "verify", run.out / "verify-repeat")
        d["criteria"]["11"] = not diff
        d["differing"] = diff
        ok = ok and not diff
        if echo:
            echo(f"criterion 11 {'PASS' if not diff else 'FAIL'}  determinism  {diff}")
    d["passed"] = ok
    _emit(run, d)
    return d


HANDLERS = {"phi": cmd_phi, "ray": cmd_ray, "busemann": cmd_busemann,
            "viscosity": cmd_viscosity, "limit-shape": cmd_limit_shape,
            "shape-solve": cmd_shape_solve, "slice": cmd_slice, "dimension": cmd_dimension,
            "compactness": cmd_compactness, "verify-all": cmd_verify_all}


# ---------------------------------------------------------------- parser

def _globals(defaults: bool):
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--scenario", default=d(None), help="bundled name or path")
    p.add_argument("--out", default=d("jmflow-out"), help="output directory")
    p.add_argument("--threads", type=int, default=d(1))
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--json", action="store_true", default=d(False),
                   help="print the result as JSON")
    return p


def build_parser():
    root = argparse.ArgumentParser(prog="jmflow", parents=[_globals(True)],
                                   description="Jacobi-Maupertuis / weak KAM experiments "
                                               "for the Newtonian N-body problem")
    root.add_argument("--version", action="version", version=__version__)
    sub = root.add_subparsers(dest="command", required=True, metavar="COMMAND")
    g = [_globals(False)]

    p = sub.add_parser("phi", parents=g, help="free-time action potential")
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("--from", dest="from_", default="origin")
    p.add_argument("--to", default="0")
    p.add_argument("--pairs", help="CSV of endpoint pairs (x, y[, h]) for batch mode")
    p.add_argument("--M", type=int, default=DEFAULT.m_final)

    p = sub.add_parser("ray", parents=g, help="certify a ray by dyadic windows")
    p.add_argument("--state", default="0")
    p.add_argument("--tmax", type=float, default=100.0)

    p = sub.add_parser("busemann", parents=g, help="truncated Busemann function on a grid")
    p.add_argument("--state", default="0")
    p.add_argument("--ray", help="trajectory CSV; its first row is the initial state")
    p.add_argument("--grid", help="CSV of configurations")
    p.add_argument("--grid-name", default="busemann")
    p.add_argument("--truncations", default="5,10,20,40,80,160")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("viscosity", parents=g, help="Hamilton-Jacobi residual of a field")
    p.add_argument("--field", required=True, help="busemann.json written on a lattice")

    p = sub.add_parser("limit-shape", parents=g, help="asymptotic shape of a datum")
    p.add_argument("--state", default="0")
    p.add_argument("--horizon", type=float, default=200.0)

    for name in ("shape-solve", "slice"):
        p = sub.add_parser(name, parents=g, help="fixed-shape velocity field" if name ==
                           "shape-solve" else "slice patch, measure and flow cloud")
        p.add_argument("--a", help="shape vector file (CSV or JSON)")
        p.add_argument("--shape", help="scenario shape name")
        p.add_argument("--alpha", type=float)
        p.add_argument("--r", type=float)
        p.add_argument("--grid-spec", default="20,0.125,5",
                       help="scale,spacing,per_axis of a lattice around scale*a/|a|")
        if name == "shape-solve":
            p.add_argument("--points", help="CSV of cone points")
        else:
            p.add_argument("--fd-step", type=float, default=1e-3)
            p.add_argument("--saturate", type=int, help="backward steps for the cloud")

    p = sub.add_parser("dimension", parents=g, help="box-counting dimension of a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--no-window", action="store_true")

    p = sub.add_parser("compactness", parents=g, help="compactness experiment")
    p.add_argument("--state", default="0", help="limit datum")
    p.add_argument("--sequence", help="CSV of states (q, v) per row")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--ns", default="1,2,4,8")
    p.add_argument("--grid")
    p.add_argument("--grid-name", default="busemann")
    p.add_argument("--t-trunc", type=float, default=80.0)
    p.add_argument("--tmax", type=float, default=40.0)

    p = sub.add_parser("verify-all", parents=g, help="run the acceptance suite")
    p.add_argument("--criteria", help="comma-separated subset")
    p.add_argument("--twice", action="store_true", help="also check byte-identical reruns")
    return root


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run(args)
        result = HANDLERS[args.command](run)
        run.record()
    except DOMAIN_ERRORS as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True))
        return 1
    if args.command == "verify-all" and not result.get("passed", False):
        return 1
    return 0


def scenario_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


if __name__ == "__main__":
    sys.exit(main())
