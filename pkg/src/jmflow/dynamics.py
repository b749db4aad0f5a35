"""Integration of Newton's equations with energy and singularity monitoring."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .core import (MassSystem, PhaseState, CollisionError, check_collision_free,
                   characteristic_length, potential_batch, min_distance_batch)
from .parallel import parallel_map


class StepFailure(RuntimeError):
    """Step size underflow or step budget exhausted."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class CollisionApproach(RuntimeError):
    def __init__(self, report):
        super().__init__(f"collision approach near t = {report.t_star:.10g}")
        self.report = report


@dataclass(frozen=True)
class IntegrateOptions:
    rtol: float = 1e-12
    atol: float = 1e-12
    drift_bound: float = 1e-8
    kepler_eta: float = 0.1
    max_steps: int = 5_000_000
    refine_attempts: int = 2
    coll_rel_tol: float = 1e-10
    backend: str | None = None


DEFAULT_OPTIONS = IntegrateOptions()


@dataclass(frozen=True)
class SingularityReport:
    t_star: float
    classification: str  # "none" | "collision-approach" | "step-failure"
    min_distance: float
    inertia_trend: float  # dI/dt at the last recorded state
    inertia_terminal: float
    energy_drift_regular: float
    times: np.ndarray = field(repr=False, default=None)
    states: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"t_star": self.t_star, "classification": self.classification,
                "min_distance": self.min_distance,
                "inertia_trend": self.inertia_trend,
                "inertia_terminal": self.inertia_terminal,
                "energy_drift_regular": self.energy_drift_regular}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution.  ``lag_action[k]`` is the integral of |v|^2/2 + U
    from ``times[0]`` to ``times[k]``."""
    ms: MassSystem
    times: np.ndarray
    q: np.ndarray
    v: np.ndarray
    energies: np.ndarray
    lag_action: np.ndarray
    drift: float
    valid: bool
    n_steps: int
    opts: IntegrateOptions = DEFAULT_OPTIONS

    @property
    def h(self) -> float:
        return float(self.energies[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def state(self, k) -> PhaseState:
        return PhaseState(self.ms, self.q[k], self.v[k])

    def _locate(self, t):
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return min(max(k, 0), len(self.times) - 1)

    def at(self, t):
        """Exact (re-integrated) state and action accumulator at time t."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-9:
            raise ValueError(f"t = {t} outside [{self.times[0]}, {self.times[-1]}]")
        k = self._locate(t)
        if t == self.times[k]:
            return self.state(k), float(self.lag_action[k])
        y0 = np.concatenate([self.q[k], self.v[k], [self.lag_action[k]]])
        y = _advance(self.ms, y0, float(self.times[k]), float(t), self.opts)
        n = self.ms.n
        return PhaseState(self.ms, y[:n], y[n:2 * n]), float(y[2 * n])

    def position(self, t) -> np.ndarray:
        return self.at(t)[0].q

    def action_h(self, t1, t2, h=None) -> float:
        """A_h of the restriction to [t1, t2]."""
        h = self.h if h is None else h
        a1 = self.at(t1)[1]
        a2 = self.at(t2)[1]
        return (a2 - a1) + h * (t2 - t1)

    def momentum(self) -> np.ndarray:
        mv = self.v.reshape(len(self.times), self.ms.N, self.ms.dim) * self.ms.masses[None, :, None]
        return mv.sum(axis=1)

    def angular_momentum(self) -> np.ndarray:
        """Planar component sum m_i (x_i ^ v_i) over the first two axes."""
        T = len(self.times)
        X = self.q.reshape(T, self.ms.N, self.ms.dim)
        V = self.v.reshape(T, self.ms.N, self.ms.dim)
        c = X[..., 0] * V[..., 1] - X[..., 1] * V[..., 0]
        return (c * self.ms.masses[None, :]).sum(axis=1)


def _advance(ms, y0, t0, t1, opts, coll_tol=0.0):
    st = kernels.dop853(ms.masses, ms.dim, y0, t0, t1, rtol=opts.rtol,
                        atol=opts.atol, kepler_eta=opts.kepler_eta,
                        coll_tol=coll_tol, max_steps=opts.max_steps,
                        backend=opts.backend)
    if st[0] == 1:
        raise CollisionApproach(SingularityReport(st[9], "collision-approach", st[10],
                                                  float("nan"), float("nan"), float("nan")))
    if st[0] != 0:
        raise StepFailure(f"integration stopped with status {st[0]} at t = {st[1]}")
    return st[2]


def _energies(ms, Q, V):
    kin = 0.5 * np.einsum("ij,ij->i", V * ms.mrep[None, :], V)
    return kin - potential_batch(ms, Q)


def _rel_drift(E, h0):
    if E.size == 0:
        return 0.0
    return float(np.max(np.abs(E - h0)) / max(1.0, abs(h0)))


def _run(ms, s0, t_end, opts, sample_times):
    y = np.concatenate([s0.q, s0.v, [0.0]])
    ctol = opts.coll_rel_tol * characteristic_length(ms, s0.q)
    kw = dict(rtol=opts.rtol, atol=opts.atol, kepler_eta=opts.kepler_eta,
              coll_tol=ctol, backend=opts.backend)
    if sample_times is None:
        st = kernels.dop853(ms.masses, ms.dim, y, 0.0, t_end, max_steps=opts.max_steps,
                            record=True, **kw)
        return st[0], st[6], st[7], st[4], st[9], st[10]
    ts = [0.0]
    ys = [y]
    steps = 0
    t = 0.0
    for tn in sample_times:
        if tn == t:
            continue
        st = kernels.dop853(ms.masses, ms.dim, y, t, float(tn),
                            max_steps=max(opts.max_steps - steps, 1), **kw)
        steps += st[4]
        if st[0] != 0:
            return st[0], np.array(ts), np.array(ys), steps, st[9], st[10]
        y = st[2]
        t = float(tn)
        ts.append(t)
        ys.append(y)
    return 0, np.array(ts), np.array(ys), steps, float("nan"), float("nan")


def integrate(ms: MassSystem, s0: PhaseState, t_end: float,
              opts: IntegrateOptions = DEFAULT_OPTIONS, sample_times=None,
              strict: bool = False):
    """Integrate from ``s0`` over [0, t_end].

    Returns a :class:`Trajectory`, or a :class:`SingularityReport` when a
    collision approach is detected.  When the energy drift exceeds
    ``opts.drift_bound`` the tolerances are tightened and the run repeated;
    if that does not help the trajectory comes back with ``valid=False``
    (or :class:`StepFailure` is raised when ``strict``).
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    check_collision_free(ms, s0.q, "initial state")
    if sample_times is not None:
        sample_times = np.asarray(sample_times, dtype=float)
        if np.any(np.diff(sample_times) <= 0) or sample_times[0] < 0 or sample_times[-1] > t_end + 1e-12:
            raise ValueError("sample_times must be increasing inside [0, t_end]")
        if sample_times[-1] < t_end:
            sample_times = np.append(sample_times, t_end)
    n = ms.n
    cur = opts
    for attempt in range(opts.refine_attempts + 1):
        status, ts, ys, steps, t_star, rmin = _run(ms, s0, t_end, cur, sample_times)
        Q, V = ys[:, :n], ys[:, n:2 * n]
        E = _energies(ms, Q, V)
        h0 = E[0]
        if status == 1:
            return _singularity(ms, ts, Q, V, E, t_star, rmin, "collision-approach")
        if status in (2, 3):
            rep = _singularity(ms, ts, Q, V, E, float(ts[-1]), rmin, "step-failure")
            raise StepFailure(f"step failure at t = {ts[-1]:.10g} (status {status})", rep)
        drift = _rel_drift(E, h0)
        if drift <= opts.drift_bound:
            break
        if attempt < opts.refine_attempts:
            cur = replace(cur, rtol=max(cur.rtol * 1e-2, 1e-15), atol=max(cur.atol * 1e-2, 1e-16))
    valid = drift <= opts.drift_bound
    if strict and not valid:
        raise StepFailure(f"energy drift {drift:.3g} exceeds bound {opts.drift_bound:.3g}")
    return Trajectory(ms, ts, Q, V, E, ys[:, 2 * n].copy(), drift, valid, int(steps), cur)


def _singularity(ms, ts, Q, V, E, t_star, rmin, kind):
    I = np.einsum("ij,ij->i", Q * ms.mrep[None, :], Q)
    trend = 2.0 * float(np.dot(Q[-1] * ms.mrep, V[-1]))  # dI/dt
    r = min_distance_batch(ms, Q)
    regular = r >= 1e-3 * r[0]
    drift = _rel_drift(E[regular], E[0])
    return SingularityReport(float(t_star), kind, float(rmin), trend, float(I[-1]),
                             drift, ts, np.hstack([Q, V]))


def flow_map(ms: MassSystem, s0: PhaseState, t: float,
             opts: IntegrateOptions = DEFAULT_OPTIONS) -> PhaseState:
    """Time-t map of the Newtonian flow (t may be negative)."""
    if t == 0:
        return s0
    check_collision_free(ms, s0.q, "initial state")
    ctol = opts.coll_rel_tol * characteristic_length(ms, s0.q)
    y0 = np.concatenate([s0.q, s0.v, [0.0]])
    y = _advance(ms, y0, 0.0, float(t), opts, coll_tol=ctol)
    n = ms.n
    return PhaseState(ms, y[:n], y[n:2 * n])


def continuous_dependence_probe(ms, s0, perturbations, T, n_samples=201,
                                opts: IntegrateOptions = DEFAULT_OPTIONS, threads=1):
    """Sup over [0, T] of position and velocity distances (mass norm) between
    the base trajectory and each perturbed one.

    ``perturbations`` is a sequence of ``(dq, dv)`` pairs.  Failed rows carry
    an ``error`` string instead of distances.
    """
    times = np.linspace(0.0, T, n_samples)
    base = integrate(ms, s0, T, opts, sample_times=times)
    if not isinstance(base, Trajectory):
        raise CollisionApproach(base)

    def row(pert):
        dq, dv = pert
        out = {"size": float(np.sqrt(np.sum(ms.mrep * np.square(ms.flat(dq)))
                                     + np.sum(ms.mrep * np.square(ms.flat(dv)))))}
        try:
            s = PhaseState(ms, s0.q + ms.flat(dq), s0.v + ms.flat(dv))
            tr = integrate(ms, s, T, opts, sample_times=times)
        except (CollisionError, StepFailure, ValueError) as exc:
            out["error"] = f"{type(exc).__name__}: {exc}"
            return out
        if not isinstance(tr, Trajectory):
            out["error"] = f"collision-approach at t = {tr.t_star:.6g}"
            return out
        w = np.sqrt(ms.mrep)[None, :]
        out["sup_q"] = float(np.max(np.linalg.norm((tr.q - base.q) * w, axis=1)))
        out["sup_v"] = float(np.max(np.linalg.norm((tr.v - base.v) * w, axis=1)))
        return out

    return parallel_map(row, list(perturbations), threads=threads)


def _fmt(x):
    return repr(float(x))


def export_trajectory(traj: Trajectory, csv_path, meta_path=None, extra=None):
    """CSV rows (t, positions, velocities, energy) plus a JSON sidecar."""
    ms = traj.ms
    header = (["t"] + [f"q{i}_{l}" for i in range(ms.N) for l in range(ms.dim)]
              + [f"v{i}_{l}" for i in range(ms.N) for l in range(ms.dim)] + ["energy"])
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj.times)):
            w.writerow([_fmt(traj.times[k])] + [_fmt(x) for x in traj.q[k]]
                       + [_fmt(x) for x in traj.v[k]] + [_fmt(traj.energies[k])])
    if meta_path is not None:
        meta = {"drift": traj.drift, "steps": traj.n_steps, "valid": traj.valid,
                "classification": "none", "samples": len(traj.times),
                "masses": ms.masses.tolist(), "dim": ms.dim}
        if extra:
            meta.update(extra)
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def kepler_period_check(ms, s0, period, opts=DEFAULT_OPTIONS):
    """Return the relative error of the return time to the initial
    configuration, located by a root of the radial-velocity sign change."""
    from scipy.optimize import brentq
    x0 = s0.q

    def phase(t):
        s = flow_map(ms, s0, t, opts)
        return float(np.dot(ms.mrep * (s.q - x0), s.v))

    a, b = 0.9 * period, 1.1 * period
    t = brentq(phase, a, b, xtol=1e-14, rtol=1e-15)
    return abs(t - period) / period, t


__all__ = ["Trajectory", "SingularityReport", "IntegrateOptions", "StepFailure",
           "CollisionApproach", "integrate", "flow_map", "continuous_dependence_probe",
           "export_trajectory"]
