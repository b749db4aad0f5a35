"""Ray certificates, calibration residuals and the compactness experiment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .action import ActionOptions, DEFAULT, PhiCache, phi_free, ModulusFit
from .core import (MassSystem, PhaseState, energy, kinetic, potential,
                   pairwise_distances, mass_norm)
from .dynamics import Trajectory, integrate, SingularityReport
from .parallel import parallel_map


@dataclass(frozen=True)
class RayOptions:
    T_max: float = 100.0
    gap_tol: float = 1e-4
    h_slack: float = 1e-9
    min_window: float = 0.5
    threads: int = 1


@dataclass(frozen=True, eq=False)
class RayCertificate:
    windows: list
    gaps: list  # signed relative gaps (A_h - phi_h) / phi_h, nan when inconclusive
    verdict: str  # minimizing | non-minimizing | inconclusive
    T_max: float
    reason: str = ""
    h: float = 0.0

    @property
    def max_gap(self):
        g = [abs(x) for x in self.gaps if not math.isnan(x)]
        return max(g) if g else math.nan

    def to_dict(self):
        return {"windows": [list(w) for w in self.windows],
                "gaps": [None if math.isnan(g) else g for g in self.gaps],
                "verdict": self.verdict, "T_max": self.T_max, "reason": self.reason,
                "h": self.h}


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    times: np.ndarray
    residuals: np.ndarray
    excluded: np.ndarray

    @property
    def max_residual(self):
        r = self.residuals[~self.excluded]
        return float(r.max()) if r.size else math.nan


class PolygonPath:
    """Piecewise-linear path with constant velocity on each segment; offers
    the same ``position``/``action_h`` interface as a trajectory."""

    def __init__(self, ms, times, nodes, h=0.0, sub=64):
        self.ms = ms
        self.times = np.asarray(times, float)
        self.nodes = np.asarray(nodes, float)
        self.h = float(h)
        self.sub = sub

    @property
    def t_end(self):
        return float(self.times[-1])

    def position(self, t):
        return np.array([np.interp(t, self.times, self.nodes[:, c])
                         for c in range(self.nodes.shape[1])])

    def action_h(self, a, b, h=None):
        h = self.h if h is None else h
        from scipy.integrate import quad
        total = 0.0
        knots = [a] + [t for t in self.times if a < t < b] + [b]
        for t0, t1 in zip(knots[:-1], knots[1:]):
            p0, p1 = self.position(t0), self.position(t1)
            v = (p1 - p0) / (t1 - t0)
            kin = 0.5 * float(np.dot(self.ms.mrep * v, v)) * (t1 - t0)
            pot = quad(lambda s: potential(self.ms, p0 + (s - t0) * v), t0, t1,
                       epsabs=1e-13, epsrel=1e-12, limit=200)[0]
            total += kin + pot + h * (t1 - t0)
        return total


def dyadic_windows(T, min_len=0.5):
    """[0, T], [T/2, T], [T/4, T/2], ... down to length min_len."""
    out = [(0.0, float(T))]
    b = float(T)
    while b / 2 >= min_len:
        out.append((b / 2, b))
        b /= 2
    return out


def verify_minimizing(ms: MassSystem, traj, h: float, windows, gap_tol: float = 1e-4,
                      opts: ActionOptions = DEFAULT, cache: PhiCache | None = None,
                      threads: int = 1) -> RayCertificate:
    """Compare the action of each window with the free-time potential
    between its endpoints."""
    if not h >= 0:
        raise ValueError("energy must be nonnegative")
    th = getattr(traj, "h", h)
    if isinstance(traj, Trajectory) and abs(th - h) > 1e-6 * max(1.0, abs(h)):
        raise ValueError(f"trajectory energy {th} differs from h = {h}")
    windows = [(float(a), float(b)) for a, b in windows]

    def gap(w, o=opts):
        a, b = w
        try:
            A = traj.action_h(a, b, h)
            r = phi_free(ms, h, traj.position(a), traj.position(b), o, cache)
        except Exception:
            return math.nan
        if r.value <= 0:
            return math.nan
        return (A - r.value) / r.value

    gaps = parallel_map(gap, windows, threads=threads)
    verdict, reason = _verdict(gaps, gap_tol)
    if verdict == "non-minimizing":
        # the sign of a large gap must survive a finer discretization
        fine = replace(opts, m_final=2 * opts.m_final, m_coarse=2 * opts.m_coarse)
        big = [w for w, g in zip(windows, gaps) if not math.isnan(g) and g > 10 * gap_tol]
        again = [gap(w, fine) for w in big]
        if not any(g > 10 * gap_tol for g in again if not math.isnan(g)):
            verdict, reason = "inconclusive", "gap not stable under refinement"
    return RayCertificate(windows, [float(g) for g in gaps], verdict,
                          max(b for _, b in windows), reason, float(h))


def _verdict(gaps, tol):
    if any(not math.isnan(g) and g > 10 * tol for g in gaps):
        return "non-minimizing", "window action exceeds the potential"
    if any(math.isnan(g) for g in gaps):
        return "inconclusive", "potential evaluation failed on some window"
    if all(abs(g) <= tol for g in gaps):
        return "minimizing", ""
    return "inconclusive", "gaps above tolerance but below the rejection level"


def gr_membership(ms: MassSystem, s: PhaseState, opts: RayOptions = RayOptions(),
                  action_opts: ActionOptions = DEFAULT, cache=None, traj=None):
    """Numerical proxy for membership of a datum in the geodesic-ray set:
    integrate to ``T_max`` and certify dyadic windows."""
    h = energy(ms, s)
    if h < -opts.h_slack:
        raise ValueError(f"energy {h:.6g} is negative")
    h = max(h, 0.0)
    if traj is None:
        traj = integrate(ms, s, opts.T_max)
    if isinstance(traj, SingularityReport):
        return RayCertificate([], [], "non-minimizing", opts.T_max,
                              "collision-approach", h)
    wins = dyadic_windows(opts.T_max, opts.min_window)
    return verify_minimizing(ms, traj, h, wins, opts.gap_tol, action_opts, cache, opts.threads)


def calibration_check(u, traj, h: float, times=None) -> CalibrationReport:
    """Residuals |u(g(t)) - u(g(0)) - A_h(g|[0, t])| along the trajectory.

    ``u`` is a callable on configurations; points where it raises or returns
    a non-finite value are excluded.
    """
    times = np.asarray(traj.times if times is None else times, dtype=float)
    t0 = float(times[0])

    def val(t):
        try:
            v = float(u(traj.position(t)))
        except (ValueError, RuntimeError):
            return math.nan
        return v

    u0 = val(t0)
    res, exc = [], []
    for t in times:
        v = val(t)
        A = traj.action_h(t0, t, h) if t > t0 else 0.0
        r = abs(v - u0 - A)
        res.append(r if math.isfinite(r) else math.nan)
        exc.append(not math.isfinite(r))
    return CalibrationReport(times, np.array(res), np.array(exc))


class MembershipError(RuntimeError):
    def __init__(self, index, reason):
        super().__init__(f"sequence member {index}: {reason}")
        self.index = index
        self.reason = reason


@dataclass(frozen=True, eq=False)
class CompactnessReport:
    ns: list
    energies: list
    energy_gaps: list
    min_distances: list
    limit_min_distance: float
    potential_bound_ok: list
    cauchy: list  # (n, m, sup_K |u_n - u_m|)
    mu_bounds: list
    calibration_residual: float
    certificates: list = field(default_factory=list)
    grid_values: np.ndarray | None = None
    C_energy: float = math.nan
    to_reference: list = field(default_factory=list)  # sup_K |u_n - u_ref|
    reference_calibration: float = math.nan

    def to_dict(self):
        return {"ns": self.ns, "energies": self.energies, "energy_gaps": self.energy_gaps,
                "min_distances": self.min_distances,
                "limit_min_distance": self.limit_min_distance,
                "potential_bound_ok": self.potential_bound_ok,
                "cauchy": [list(c) for c in self.cauchy], "mu_bounds": self.mu_bounds,
                "calibration_residual": self.calibration_residual,
                "C_energy": self.C_energy, "to_reference": self.to_reference,
                "reference_calibration": self.reference_calibration,
                "verdicts": [c.verdict for c in self.certificates]}


def compactness_experiment(ms: MassSystem, sequence, s0: PhaseState, grid, ns=None,
                           modulus: ModulusFit | None = None, t_trunc: float = 80.0,
                           calib_window: float = 5.0, ray_opts: RayOptions = RayOptions(),
                           action_opts: ActionOptions = DEFAULT, cache=None,
                           certify: bool = True):
    """Energies, distance bounds, Busemann Cauchy differences and limit
    calibration for a sequence of data converging to ``s0``.

    The limit field is the Busemann function of the member with the largest
    label; the ray of ``s0`` is calibrated against it over
    ``[0, calib_window]``. As a reference, the Busemann function of ``s0``
    itself is also evaluated on the grid.

    ``ns`` labels the members (defaults to 1, 2, ...); Cauchy differences
    are reported for label pairs (n, 2n) when both are present, otherwise
    for consecutive members.
    """
    from .horofunctions import BusemannEvaluator
    seq = list(sequence)
    ns = list(range(1, len(seq) + 1)) if ns is None else list(ns)
    cache = PhiCache() if cache is None else cache
    grid = np.atleast_2d(np.asarray(grid, float))
    h0 = energy(ms, s0)
    energies, gaps, dmin, pot_ok, certs = [], [], [], [], []
    for idx, s in enumerate(seq):
        U = potential(ms, s.q)
        K = kinetic(ms, s.v)
        ok = U <= K + ray_opts.h_slack
        pot_ok.append(bool(ok))
        if not ok:
            raise MembershipError(idx, f"U(x_n) = {U:.6g} exceeds |v_n|^2/2 = {K:.6g}; "
                                  "negative energy, so no geodesic ray starts here")
        energies.append(K - U)
        gaps.append(abs(K - U - h0))
        dmin.append(float(pairwise_distances(ms, s.q).min()))
        if certify:
            c = gr_membership(ms, s, ray_opts, action_opts, cache)
            certs.append(c)
            if c.verdict != "minimizing":
                raise MembershipError(idx, f"ray certificate {c.verdict} ({c.reason})")
    horizon = max(t_trunc, calib_window)
    rays = []
    for idx, s in enumerate(seq):
        tr = integrate(ms, s, horizon)
        if isinstance(tr, SingularityReport):
            raise MembershipError(idx, "collision-approach")
        rays.append(tr)
    values, fields = [], []
    for tr, hn in zip(rays, energies):
        ev = BusemannEvaluator(ms, tr.position(t_trunc), max(hn, 0.0), action_opts, cache)
        fields.append(ev)
        values.append(np.array([ev(x) for x in grid]))
    values = np.array(values)
    pos = {n: i for i, n in enumerate(ns)}
    pairs = [(n, 2 * n) for n in ns if 2 * n in pos]
    if not pairs:
        pairs = list(zip(ns[:-1], ns[1:]))
    cauchy, mu = [], []
    for n, m in pairs:
        d = float(np.max(np.abs(values[pos[n]] - values[pos[m]])))
        cauchy.append((n, m, d))
        if modulus is not None:
            r = mass_norm(ms, seq[pos[n]].q - s0.q) + mass_norm(ms, seq[pos[n]].v - s0.v)
            mu.append(float(modulus.mu(r)))
    limit = integrate(ms, s0, horizon)
    if isinstance(limit, SingularityReport):
        raise MembershipError(-1, "limit datum: collision-approach")
    ts = np.linspace(0.0, calib_window, 6)
    last = int(np.argmax(ns))
    rep = calibration_check(fields[last], limit, max(h0, 0.0), ts)
    ref = BusemannEvaluator(ms, limit.position(t_trunc), max(h0, 0.0), action_opts, cache)
    u_ref = np.array([ref(x) for x in grid])
    to_ref = [float(np.max(np.abs(v - u_ref))) for v in values]
    ref_rep = calibration_check(ref, limit, max(h0, 0.0), ts)
    C = max(n * g for n, g in zip(ns, gaps)) if gaps else math.nan
    return CompactnessReport(ns, energies, gaps, dmin,
                             float(pairwise_distances(ms, s0.q).min()), pot_ok, cauchy, mu,
                             rep.max_residual, certs, values, float(C), to_ref,
                             ref_rep.max_residual)


def dilation_sequence(ms, s0: PhaseState, eps: float, ns):
    """x_n = x_0 (1 + eps/n) with unchanged velocities."""
    return [PhaseState(ms, s0.q * (1 + eps / n), s0.v) for n in ns]
