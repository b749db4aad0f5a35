"""Normalized Busemann functions along rays, horofunction limits, domination
and Hamilton-Jacobi residual checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .action import ActionOptions, DEFAULT, PhiCache, phi_free
from .core import MassSystem, potential, reduced_basis
from .parallel import parallel_map

DEFAULT_SCHEDULE = (5.0, 10.0, 20.0, 40.0, 80.0, 160.0)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Regular lattice ``center + basis @ (spacing * index)`` in reduced
    coordinates; ``shape`` gives the number of points per axis."""
    center: np.ndarray
    basis: np.ndarray  # (n, m) mass-orthonormal columns
    spacing: float
    shape: tuple

    def offsets(self):
        axes = [np.arange(s) - (s - 1) / 2 for s in self.shape]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1) * self.spacing

    def points(self):
        return self.center[None, :] + self.offsets() @ self.basis.T


def cone_lattice(ms: MassSystem, center, spacing, per_axis, dims=None):
    """Lattice around ``center`` spanned by the first ``dims`` reduced
    directions (all of them by default)."""
    B = reduced_basis(ms)
    if dims is not None:
        B = B[:, :dims]
    return Lattice(np.asarray(center, float), B, float(spacing), (per_axis,) * B.shape[1])


@dataclass(frozen=True, eq=False)
class HorofunctionField:
    grid: np.ndarray  # (G, n)
    values: np.ndarray  # (G,)
    h: float
    truncations: tuple
    increments: np.ndarray  # |u_last - u_previous| per point
    history: np.ndarray  # (len(truncations), G)
    converged: bool
    status: str = "converged"
    excluded: np.ndarray | None = None
    lattice: Lattice | None = None
    anchor: str = "origin"
    meta: dict = field(default_factory=dict)

    @property
    def max_increment(self):
        inc = self.increments[~self._mask()] if self.increments.size else self.increments
        return float(np.max(inc)) if inc.size else 0.0

    def _mask(self):
        return self.excluded if self.excluded is not None else np.zeros(len(self.values), bool)

    def to_rows(self):
        for g, v, inc in zip(self.grid, self.values, self.increments):
            yield list(g) + [v, inc]


class BusemannEvaluator:
    """Callable x -> phi_h(0, p) - phi_h(x, p) for a fixed far point p."""

    def __init__(self, ms, far_point, h, opts: ActionOptions = DEFAULT, cache=None):
        self.ms, self.p, self.h, self.opts = ms, np.asarray(far_point, float), float(h), opts
        self.cache = cache
        self.origin = np.zeros(ms.n)
        self.anchor = phi_free(ms, self.h, self.origin, self.p, opts, cache).value

    def __call__(self, x):
        x = self.ms.flat(x)
        if not np.any(x):
            return 0.0
        return self.anchor - phi_free(self.ms, self.h, x, self.p, self.opts, self.cache).value

    @classmethod
    def along_ray(cls, ms, ray, h, t, **kw):
        return cls(ms, ray.position(t), h, **kw)


def _field_values(ms, grid, h, p, opts, cache, threads):
    ev = BusemannEvaluator(ms, p, h, opts, cache)

    def one(x):
        try:
            return ev(x)
        except Exception:  # phi failure excludes the point
            return math.nan

    return np.array(parallel_map(one, list(grid), threads=threads))


def busemann_estimate(ms: MassSystem, ray, h: float, grid,
                      trunc_schedule=DEFAULT_SCHEDULE, tol: float = 1e-4,
                      opts: ActionOptions = DEFAULT, cache: PhiCache | None = None,
                      threads: int = 1, lattice: Lattice | None = None) -> HorofunctionField:
    """Truncated normalized Busemann values u_t(x) = phi_h(0, g(t)) - phi_h(x, g(t))
    for each truncation time t of the schedule; the last iterate is kept."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if cache is None:
        cache = PhiCache()
    sched = tuple(float(t) for t in trunc_schedule)
    if sched[-1] > ray.t_end + 1e-9:
        raise ValueError(f"ray horizon {ray.t_end} shorter than truncation {sched[-1]}")
    hist = np.array([_field_values(ms, grid, h, ray.position(t), opts, cache, threads)
                     for t in sched])
    excluded = np.any(~np.isfinite(hist), axis=0)
    inc = np.abs(hist[-1] - hist[-2]) if len(sched) > 1 else np.zeros(len(grid))
    inc = np.where(excluded, np.nan, inc)
    ok = inc[~excluded]
    converged = bool(ok.size and np.max(ok) <= tol)
    status = "converged" if converged else "not-converged"
    return HorofunctionField(grid, hist[-1], float(h), sched, inc, hist, converged, status,
                             excluded, lattice, meta={"tol": tol})


def horofunction_from_sequence(ms: MassSystem, h_seq, p_seq, grid,
                               opts: ActionOptions = DEFAULT, cache=None, threads=1):
    """Evaluate u_n(x) = phi_{h_n}(0, p_n) - phi_{h_n}(x, p_n) on the grid.

    Returns ``(field, cauchy)`` where ``cauchy[k]`` is the sup over the grid
    of |u_{k+1} - u_k|.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    h_seq = [float(h) for h in h_seq]
    if any(h < 0 for h in h_seq):
        raise ValueError("energies must be nonnegative")
    norms = [float(np.sqrt(np.dot(ms.mrep * ms.flat(p), ms.flat(p)))) for p in p_seq]
    if any(b <= a for a, b in zip(norms, norms[1:])):
        raise ValueError("|p_n| must increase")
    cache = PhiCache() if cache is None else cache
    hist = np.array([_field_values(ms, grid, h, p, opts, cache, threads)
                     for h, p in zip(h_seq, p_seq)])
    cauchy = [float(np.nanmax(np.abs(hist[k + 1] - hist[k]))) for k in range(len(hist) - 1)]
    excluded = np.any(~np.isfinite(hist), axis=0)
    inc = np.abs(hist[-1] - hist[-2]) if len(hist) > 1 else np.zeros(len(grid))
    field_ = HorofunctionField(grid, hist[-1], h_seq[-1], tuple(norms), inc, hist,
                               True, "sequence", excluded)
    return field_, cauchy


def domination_check(ms: MassSystem, fld: HorofunctionField, pairs,
                     opts: ActionOptions = DEFAULT, cache=None, threads=1):
    """Max over index pairs (i, j) of u(x_j) - u(x_i) - phi_h(x_i, x_j).

    Returns ``(max_violation, slacks)``; a single-point sample gives
    ``-phi_h(x, x) = 0``.
    """
    pairs = list(pairs)
    if not pairs:
        return 0.0, []

    def one(p):
        i, j = p
        d = phi_free(ms, fld.h, fld.grid[i], fld.grid[j], opts, cache).value
        return float(fld.values[j] - fld.values[i] - d)

    slacks = parallel_map(one, pairs, threads=threads)
    return float(max(slacks)), slacks


@dataclass(frozen=True, eq=False)
class ViscosityReport:
    gradients: np.ndarray  # (G, m) lattice-coordinate gradient of -u (nan where masked)
    residuals: np.ndarray  # (G,)
    mask: np.ndarray  # True = excluded
    spacing: float
    partial: bool  # lattice spans fewer directions than the reduced space

    @property
    def median_abs(self):
        r = np.abs(self.residuals[~self.mask])
        return float(np.median(r)) if r.size else math.nan

    def quantiles(self, qs=(0.1, 0.5, 0.9)):
        r = np.abs(self.residuals[~self.mask])
        return {str(q): float(np.quantile(r, q)) for q in qs} if r.size else {}

    def summary(self):
        return {"spacing": self.spacing, "median_abs": self.median_abs,
                "points": int((~self.mask).sum()), "masked": int(self.mask.sum()),
                "partial": self.partial, "quantiles": self.quantiles()}


def viscosity_residual(ms: MassSystem, fld: HorofunctionField, h: float | None = None,
                       jump: float = 3.0) -> ViscosityReport:
    """Central-difference residual |D w|_*^2 / 2 - U - h of w = -u on the lattice."""
    lat = fld.lattice
    if lat is None:
        raise ValueError("field is not on a regular lattice")
    h = fld.h if h is None else h
    shape = lat.shape
    w = -np.asarray(fld.values, dtype=float).reshape(shape)
    m = len(shape)
    G = w.size
    grads = np.full(shape + (m,), np.nan)
    inner = np.ones(shape, bool)
    for ax in range(m):
        sl = [slice(None)] * m
        sl[ax] = slice(1, -1)
        fwd = np.roll(w, -1, axis=ax)
        bwd = np.roll(w, 1, axis=ax)
        g = (fwd - bwd) / (2 * lat.spacing)
        grads[..., ax][tuple(sl)] = g[tuple(sl)]
        edge = np.zeros(shape, bool)
        idx = [slice(None)] * m
        idx[ax] = 0
        edge[tuple(idx)] = True
        idx[ax] = -1
        edge[tuple(idx)] = True
        inner &= ~edge
    gn = np.sqrt(np.sum(grads ** 2, axis=-1))
    mask = ~inner | ~np.isfinite(gn)
    # singular points: gradient norm jumps by more than `jump` between neighbours
    for ax in range(m):
        a = np.roll(gn, -1, axis=ax)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(gn / a, a / gn)
        bad = np.isfinite(ratio) & (ratio > jump)
        mask |= bad | np.roll(bad, 1, axis=ax)
    pts = lat.points()
    U = np.array([potential(ms, p) for p in pts]).reshape(shape)
    res = 0.5 * gn ** 2 - U - h
    res = np.where(mask, np.nan, res)
    return ViscosityReport(grads.reshape(G, m), res.ravel(), mask.ravel(), lat.spacing,
                           lat.basis.shape[1] < ms.k)


def field_on_lattice(ms, ray, h, lattice: Lattice, t_trunc, opts=DEFAULT, cache=None, threads=1):
    """Busemann values at a single truncation, laid out on a lattice."""
    return busemann_estimate(ms, ray, h, lattice.points(), (t_trunc,), opts=opts,
                             cache=cache, threads=threads, lattice=lattice)
