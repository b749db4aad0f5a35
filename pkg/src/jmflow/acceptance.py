"""Acceptance suite: one function per criterion, each returning a
:class:`CriterionResult` and writing its data under an output directory.

Files written here never contain timings, so two runs with the same seed
can be compared byte for byte.
"""
from __future__ import annotations

import csv
import filecmp
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .action import ActionOptions, DEFAULT, PhiCache, euler_lagrange_residual, fit_modulus, \
    phi_fixed_time, phi_free
from .core import MassSystem, PhaseState, energy, mass_norm, pairwise_distances, potential, \
    reduced_basis
from .dynamics import SingularityReport, integrate, kepler_period_check
from .horofunctions import BusemannEvaluator, busemann_estimate, cone_lattice, \
    domination_check, field_on_lattice, viscosity_residual
from .parallel import parallel_map
from .rays import RayOptions, compactness_experiment, dilation_sequence
from .scenario import BUNDLED, load_scenario
from .shape import ConeSpec, limit_shape, solve_many
from .slice import box_counting_dimension, differential_of_field, flow_saturate, \
    hausdorff_measure_patch, phase_coordinates, solved_field


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        keys = ", ".join(f"{k}={_short(v)}" for k, v in self.metrics.items()
                         if not isinstance(v, (list, dict)))
        return f"criterion {self.number:2d} {tag}  {self.title}  [{keys}]  ({self.seconds:.1f} s)"


def _short(v):
    return f"{v:.3g}" if isinstance(v, float) else str(v)


@dataclass
class Context:
    out: Path
    seed: int = 0
    threads: int = 1
    cache: PhiCache = field(default_factory=lambda: PhiCache(directory=""))
    shared: dict = field(default_factory=dict)

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _random_config(rng, ms, box=1.0, min_dist=0.3):
    while True:
        x = rng.uniform(-box, box, ms.n)
        if pairwise_distances(ms, x).min() >= min_dist:
            return x


# ---------------------------------------------------------------- 1

def dynamics_oracle(ctx: Context) -> CriterionResult:
    sc = load_scenario("kepler-hyperbolic")
    rel, t_ret = kepler_period_check(sc.ms, sc.state("circular"), math.pi * math.sqrt(2))
    drifts = {}
    for name in BUNDLED:
        s = load_scenario(name)
        for st_name, st in s.states.items():
            tr = integrate(s.ms, st, 100.0)
            d = tr.energy_drift_regular if isinstance(tr, SingularityReport) else tr.drift
            drifts[f"{name}/{st_name}"] = float(d)
    worst = max(drifts.values())
    m = {"period_rel_error": float(rel), "return_time": float(t_ret),
         "max_drift": worst, "drifts": drifts}
    write_json(ctx.path("c01_dynamics.json"), m)
    return CriterionResult(1, "dynamics oracle", rel <= 1e-6 and worst <= 1e-8, m)


# ---------------------------------------------------------------- 2

def metric_axioms(ctx: Context, n_triples: int = 50) -> CriterionResult:
    ms = MassSystem([1.0, 1.0, 1.0], 2)
    rng = np.random.default_rng(ctx.seed)
    triples = [[_random_config(rng, ms) for _ in range(3)] for _ in range(n_triples)]
    jobs = [(i, h) for i in range(n_triples) for h in (0.0, 0.5, 2.0)]

    def one(job):
        i, h = job
        x, y, z = triples[i]
        f = lambda a, b: phi_free(ms, h, a, b, DEFAULT, ctx.cache).value  # noqa: E731
        xy, yx, xz, zy, xx = f(x, y), f(y, x), f(x, z), f(z, y), f(x, x)
        return (i, h, xy, yx, xz, zy, xx, abs(xy - yx) / max(xy, 1e-300),
                xy - xz - zy)

    rows = parallel_map(one, jobs, threads=ctx.threads)
    write_csv(ctx.path("c02_metric.csv"),
              ["triple", "h", "xy", "yx", "xz", "zy", "xx", "sym_rel", "triangle_excess"], rows)
    sym = max(r[7] for r in rows)
    tri = max(r[8] for r in rows)
    diag = max(r[6] for r in rows)
    m = {"max_symmetry_rel": sym, "max_triangle_violation": max(tri, 0.0),
         "max_self_distance": diag, "cases": len(rows)}
    return CriterionResult(2, "metric axioms of phi_h", sym <= 1e-5 and tri <= 1e-4
                           and diag <= 1e-6, m)


# ---------------------------------------------------------------- 3

def minimizer_correctness(ctx: Context) -> CriterionResult:
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    rng = np.random.default_rng(ctx.seed + 5)
    x, y = _random_config(rng, ms), _random_config(rng, ms)
    h = 0.5
    Ms = [32, 64, 128, 256]
    res = [euler_lagrange_residual(ms, phi_free(ms, h, x, y, ActionOptions(m_final=M)).inner.minimizer)
           for M in Ms]
    orders = [math.log2(a / b) for a, b in zip(res, res[1:])]
    full = phi_free(ms, h, x, y, DEFAULT, ctx.cache)
    curve = full.inner.minimizer
    ts = np.linspace(0, curve.T, 7)[1:-1]
    add = []
    for t in ts:
        z = curve.interpolate(t)
        a = phi_free(ms, h, x, z, DEFAULT, ctx.cache).value
        b = phi_free(ms, h, z, y, DEFAULT, ctx.cache).value
        add.append(abs(a + b - full.value) / full.value)
    m = {"el_residuals": res, "min_order": min(orders), "max_additivity_rel": max(add),
         "phi": full.value}
    write_json(ctx.path("c03_minimizers.json"), m)
    return CriterionResult(3, "minimizer correctness", min(orders) >= 1.8 and max(add) <= 1e-4, m)


# ---------------------------------------------------------------- 4

def modulus_family(ctx: Context, h_max: float = 1.0, n_cal: int = 24, n_val: int = 100):
    if "modulus" in ctx.shared:
        return ctx.shared["modulus"]
    ms = MassSystem([1.0, 1.0, 1.0], 2)
    rng = np.random.default_rng(ctx.seed + 4)
    cal = [(_random_config(rng, ms), _random_config(rng, ms)) for _ in range(n_cal)]
    val = [(_random_config(rng, ms), _random_config(rng, ms), float(rng.uniform(0, h_max)))
           for _ in range(n_val)]

    def sample(job):
        (x, y), T = job
        l = mass_norm(ms, y - x)
        return (l, T, phi_fixed_time(ms, x, y, T).value)

    jobs = [(p, T) for p in cal for T in (0.25, 1.0, 4.0)]
    samples = parallel_map(sample, jobs, threads=ctx.threads)
    fit = fit_modulus(samples, h_max)

    def check(job):
        x, y, h = job
        l = mass_norm(ms, y - x)
        return (l, h, phi_free(ms, h, x, y, DEFAULT, ctx.cache).value, fit.mu(l))

    rows = parallel_map(check, val, threads=ctx.threads)
    ctx.shared["modulus"] = (fit, samples, rows)
    return ctx.shared["modulus"]


def uniform_modulus(ctx: Context) -> CriterionResult:
    fit, samples, rows = modulus_family(ctx)
    write_csv(ctx.path("c04_calibration.csv"), ["l", "T", "phi_T"], samples)
    write_csv(ctx.path("c04_validation.csv"), ["l", "h", "phi_h", "mu"], rows)
    viol = [r for r in rows if r[2] > r[3] + 1e-6]
    m = {"violations": len(viol), "validation_pairs": len(rows),
         "max_ratio": max(r[2] / r[3] for r in rows), **fit.to_dict()}
    return CriterionResult(4, "uniform modulus", not viol and len(rows) >= 100, m)


# ---------------------------------------------------------------- 5

def busemann_domination(ctx: Context) -> CriterionResult:
    sc = load_scenario("kepler-hyperbolic")
    ms, s0 = sc.ms, sc.state("escape")
    h = energy(ms, s0)
    ray = integrate(ms, s0, 170.0)
    lat = sc.grids["busemann"]
    fld = busemann_estimate(ms, ray, h, lat.points(), opts=DEFAULT, cache=ctx.cache,
                            threads=ctx.threads, lattice=lat)
    G = len(fld.grid)
    pairs = [(i, j) for i in range(G) for j in range(G) if i != j]
    dom, _ = domination_check(ms, fld, pairs, DEFAULT, ctx.cache, ctx.threads)
    ev = BusemannEvaluator.along_ray(ms, ray, h, 160.0, opts=DEFAULT, cache=ctx.cache)
    from .rays import calibration_check
    cal = calibration_check(ev, ray, h, np.linspace(0.0, 10.0, 6))
    inc = float(np.nanmax(fld.increments))
    write_csv(ctx.path("c05_busemann.csv"),
              [f"x{c}" for c in range(ms.n)] + ["u", "increment"], fld.to_rows())
    m = {"max_increment": inc, "max_domination_violation": max(dom, 0.0),
         "max_ray_identity": cal.max_residual, "truncations": list(fld.truncations)}
    return CriterionResult(5, "Busemann convergence and domination",
                           inc <= 1e-4 and dom <= 1e-3 and cal.max_residual <= 1e-3, m)


# ---------------------------------------------------------------- 6

def viscosity(ctx: Context, spacings=(0.04, 0.02, 0.01)) -> CriterionResult:
    sc = load_scenario("kepler-hyperbolic")
    ms, s0 = sc.ms, sc.state("escape")
    h = energy(ms, s0)
    ray = integrate(ms, s0, 170.0)
    meds, rows = [], []
    for s in spacings:
        lat = cone_lattice(ms, s0.q, s, 5)
        fld = field_on_lattice(ms, ray, h, lat, 160.0, DEFAULT, ctx.cache, ctx.threads)
        rep = viscosity_residual(ms, fld, h)
        meds.append(rep.median_abs)
        rows.append((s, rep.median_abs, int((~rep.mask).sum())))
    write_csv(ctx.path("c06_viscosity.csv"), ["spacing", "median_abs_residual", "points"], rows)
    ratios = [a / b for a, b in zip(meds, meds[1:])]
    m = {"medians": meds, "min_halving_ratio": min(ratios), "final_median": meds[-1]}
    return CriterionResult(6, "viscosity residual", min(ratios) >= 2.0 and meds[-1] <= 5e-3, m)


# ---------------------------------------------------------------- 7

def compactness(ctx: Context, eps: float = 0.1,
                ns=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512)) -> CriterionResult:
    sc = load_scenario("kepler-hyperbolic")
    ms, s0 = sc.ms, sc.state("escape")
    fit, _, _ = modulus_family(ctx)
    seq = dilation_sequence(ms, s0, eps, ns)
    grid = sc.grid_points("busemann")
    rep = compactness_experiment(ms, seq, s0, grid, list(ns), fit, t_trunc=80.0,
                                 ray_opts=RayOptions(T_max=40.0, threads=ctx.threads),
                                 cache=ctx.cache)
    c = eps * mass_norm(ms, s0.q)
    C = eps * potential(ms, s0.q)  # |U(x(1+e)) - U(x)| <= e U(x)
    d = [x[2] for x in rep.cauchy]
    energy_ok = all(g <= C / n + 1e-12 for n, g in zip(ns, rep.energy_gaps))
    decreasing = all(b < a for a, b in zip(d, d[1:]))
    bound_ok = all(di <= fit.mu(c / n) + 2e-3 for (n, _, di) in rep.cauchy)
    dist_ok = min(rep.min_distances) >= 0.5 * rep.limit_min_distance
    m = {**rep.to_dict(), "C_bound": C, "c": c, "energy_ok": energy_ok,
         "cauchy_decreasing": decreasing, "cauchy_within_mu": bound_ok,
         "distances_ok": dist_ok}
    write_json(ctx.path("c07_compactness.json"), m)
    ok = energy_ok and decreasing and bound_ok and dist_ok and rep.calibration_residual <= 2e-3
    return CriterionResult(7, "compactness experiment", ok, m)


# ---------------------------------------------------------------- 8

def chazy(ctx: Context) -> CriterionResult:
    rows = []
    ok = True
    for name, st in (("kepler-hyperbolic", "escape"), ("kepler-hyperbolic", "oblique"),
                     ("three-body-lagrange-expanding", "homothetic")):
        sc = load_scenario(name)
        e = limit_shape(sc.ms, sc.state(st))
        good = e.energy_gap <= 1e-4 and e.p is not None and e.p <= 2 / 3 + 0.15
        ok &= good
        rows.append((f"{name}/{st}", e.h, e.energy_gap, e.p, e.method))
    sc = load_scenario("kepler-parabolic")
    e = limit_shape(sc.ms, sc.state("parabolic"))
    ok &= e.p is not None and abs(e.p - 2 / 3) <= 0.05
    rows.append(("kepler-parabolic/parabolic", e.h, e.energy_gap, e.p, e.method))
    write_csv(ctx.path("c08_chazy.csv"), ["state", "h", "energy_gap", "p", "method"], rows)
    m = {"max_energy_gap": max(r[2] for r in rows[:-1]),
         "max_hyperbolic_p": max(r[3] for r in rows[:-1]), "parabolic_p": rows[-1][3]}
    return CriterionResult(8, "Chazy asymptotics", ok, m)


# ---------------------------------------------------------------- 9

def _two_body_cone():
    sc = load_scenario("kepler-hyperbolic")
    sh = sc.shapes["axis"]
    return sc.ms, ConeSpec(sc.ms, sh.a, sh.alpha, sh.r)


def fixed_shape(ctx: Context) -> CriterionResult:
    ms, cone = _two_body_cone()
    lat = cone_lattice(ms, 5 * cone.a, 0.25, 5)
    sols = solve_many(ms, cone, lat.points(), threads=ctx.threads)
    conv = [s for s in sols if s.converged and s.residual <= 1e-6]
    frac = len(conv) / len(sols)
    sc3 = load_scenario("three-body-lagrange-expanding")
    sh = sc3.shapes["equilateral"]
    cone3 = ConeSpec(sc3.ms, sh.a, sh.alpha, sh.r)
    lat3 = cone_lattice(sc3.ms, 20 * cone3.a, 0.5, 5, dims=2)
    sols3 = solve_many(sc3.ms, cone3, lat3.points(), threads=ctx.threads)
    frac3 = sum(s.converged for s in sols3) / len(sols3)
    # two solved rays with the same shape; Busemann fields on a shared grid
    h = 0.5 * mass_norm(ms, cone.a) ** 2
    starts = [sols[12], sols[0]]
    grid = cone_lattice(ms, 5 * cone.a, 0.25, 3).points()
    fields = []
    for s in starts:
        ray = integrate(ms, PhaseState(ms, s.x, s.v), 170.0)
        f = busemann_estimate(ms, ray, h, grid, (160.0,), opts=DEFAULT, cache=ctx.cache,
                              threads=ctx.threads)
        fields.append(f.values)
    diff = fields[0] - fields[1]
    spread = float(np.max(np.abs(diff - np.median(diff))))
    write_csv(ctx.path("c09_solves.csv"),
              [f"x{c}" for c in range(ms.n)] + [f"v{c}" for c in range(ms.n)]
              + ["residual", "status"],
              [list(s.x) + list(s.v) + [s.residual, s.status] for s in sols])
    m = {"converged_fraction": frac, "three_body_converged_fraction": frac3,
         "max_residual": max(s.residual for s in conv), "busemann_spread": spread}
    return CriterionResult(9, "fixed-shape solve and uniqueness shadow",
                           frac >= 0.95 and spread <= 2e-3, m)


# ---------------------------------------------------------------- 10

def geometric_measure(ctx: Context, sheet: int = 64, sheet3: int = 36) -> CriterionResult:
    ms, cone = _two_body_cone()
    lat = cone_lattice(ms, 20 * cone.a, 1 / 8, 5)
    patch = differential_of_field(ms, lat.points(), solved_field(ms, cone), 1e-3,
                                  threads=ctx.threads, lattice=lat, cone=cone)
    meas = hausdorff_measure_patch(patch, lat.spacing ** ms.k)
    J = patch.jacobians[patch.kept]
    j_ok = bool(J.size and J.min() >= 1 - 1e-9)
    m_ok = meas.volume <= meas.value <= meas.max_jacobian * meas.volume * (1 + 1e-12)
    write_csv(ctx.path("c10_patch.csv"),
              [f"x{c}" for c in range(ms.n)] + [f"v{c}" for c in range(ms.n)]
              + ["jacobian", "asymmetry", "dropped"], patch.rows())

    # two-body cloud: dense graph, saturated by the backward flow
    D = 2.0
    big = cone_lattice(ms, 20 * cone.a, D / (sheet - 1), sheet)
    sols = solve_many(ms, cone, big.points(), threads=ctx.threads)
    ok_s = [s for s in sols if s.converged]
    X = np.array([s.x for s in ok_s])
    V = np.array([s.v for s in ok_s])
    cloud = flow_saturate(ms, X, V, 8, threads=ctx.threads)
    tscale = D / mass_norm(ms, cone.a)
    dim2 = box_counting_dimension(phase_coordinates(ms, cloud.q, cloud.v, tscale),
                                  seed=ctx.seed, threads=ctx.threads)

    # three-body graph: solved on a 5^4 lattice, densified by interpolation
    sc3 = load_scenario("three-body-lagrange-expanding")
    sh = sc3.shapes["equilateral"]
    ms3 = sc3.ms
    cone3 = ConeSpec(ms3, sh.a, sh.alpha, sh.r)
    D3 = 2.0
    coarse = cone_lattice(ms3, 20 * cone3.a, D3 / 4, 5)
    sols3 = solve_many(ms3, cone3, coarse.points(), threads=ctx.threads)
    dim4 = None
    if all(s.converged for s in sols3):
        axes = [np.linspace(-D3 / 2, D3 / 2, 5)] * ms3.k
        Vc = np.array([s.v for s in sols3]).reshape((5,) * ms3.k + (ms3.n,))
        interp = RegularGridInterpolator(axes, Vc)
        fine = np.stack(np.meshgrid(*[np.linspace(-D3 / 2, D3 / 2, sheet3)] * ms3.k,
                                    indexing="ij"), -1).reshape(-1, ms3.k)
        B = reduced_basis(ms3)
        q3 = 20 * cone3.a[None, :] + fine @ B.T
        pc3 = phase_coordinates(ms3, q3, interp(fine), D3 / mass_norm(ms3, cone3.a), B)
        dim4 = box_counting_dimension(pc3, seed=ctx.seed, threads=ctx.threads)
    m = {"min_jacobian": float(J.min()), "max_jacobian": meas.max_jacobian,
         "measure": meas.value, "volume": meas.volume, "slope_k2": dim2.slope,
         "slope_k4": dim4.slope if dim4 else math.nan,
         "three_body_converged": dim4 is not None,
         "counts_k2": dim2.counts, "counts_k4": dim4.counts if dim4 else [],
         "backward_failures": len(cloud.failures)}
    write_json(ctx.path("c10_dimension.json"), m)
    ok = j_ok and m_ok and abs(dim2.slope - 2) <= 0.3
    if dim4 is not None:
        ok &= abs(dim4.slope - 4) <= 0.5
    return CriterionResult(10, "geometric measure", ok, m)


CRITERIA = {1: dynamics_oracle, 2: metric_axioms, 3: minimizer_correctness,
            4: uniform_modulus, 5: busemann_domination, 6: viscosity, 7: compactness,
            8: chazy, 9: fixed_shape, 10: geometric_measure}


def run_criteria(out, seed=0, threads=1, numbers=None, echo=None):
    """Run criteria 1..10 (or ``numbers``) writing data under ``out``."""
    ctx = Context(Path(out), seed, threads)
    results = []
    for k in sorted(numbers or CRITERIA):
        t0 = time.perf_counter()
        try:
            r = CRITERIA[k](ctx)
        except Exception as exc:  # a crash is a failed criterion, not a crashed suite
            r = CriterionResult(k, CRITERIA[k].__name__, False,
                                {"error": f"{type(exc).__name__}: {exc}"})
        r.seconds = time.perf_counter() - t0
        results.append(r)
        if echo:
            echo(r.line())
    write_json(ctx.path("summary.json"),
               {str(r.number): {"title": r.title, "passed": r.passed, "metrics": r.metrics}
                for r in results})
    return results


def compare_dirs(a, b):
    """Names of files that differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    names = sorted({p.name for p in a.iterdir()} | {p.name for p in b.iterdir()})
    return [n for n in names
            if not ((a / n).exists() and (b / n).exists()
                    and filecmp.cmp(a / n, b / n, shallow=False))]


def determinism(out_a, out_b, seed=0, threads=1, numbers=None, echo=None):
    """Criterion 11: two independent runs produce identical files."""
    t0 = time.perf_counter()
    run_criteria(out_a, seed, threads, numbers)
    run_criteria(out_b, seed, threads, numbers)
    diff = compare_dirs(out_a, out_b)
    n_files = len(os.listdir(out_a))
    r = CriterionResult(11, "determinism", not diff, {"files": n_files, "differing": diff},
                        time.perf_counter() - t0)
    if echo:
        echo(r.line())
    return r
