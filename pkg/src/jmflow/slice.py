"""Geometry of the fixed-shape slice: differential of the velocity field,
graph Jacobians, patch measures, backward-flow clouds and box counting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import linregress

from . import kernels
from .core import MassSystem, characteristic_length, reduced_basis
from .dynamics import DEFAULT_OPTIONS, IntegrateOptions
from .horofunctions import Lattice
from .parallel import parallel_map
from .shape import ConeSpec, SolveOptions, cone_contains, solve_velocity_field


@dataclass(frozen=True, eq=False)
class SlicePatch:
    points: np.ndarray  # (G, n) base configurations
    velocities: np.ndarray  # (G, n), nan rows for dropped points
    differentials: np.ndarray  # (G, k, k) in reduced coordinates
    jacobians: np.ndarray  # (G,)
    asymmetry: np.ndarray  # (G,) max |forward - backward| difference quotient
    dropped: dict = field(default_factory=dict)  # index -> reason
    fd_step: float = math.nan
    lattice: Lattice | None = None

    @property
    def kept(self):
        return np.array([i not in self.dropped for i in range(len(self.points))])

    def graph(self):
        """(x, v) pairs of the kept points."""
        k = self.kept
        return self.points[k], self.velocities[k]

    def rows(self):
        for i, (x, v, J, a) in enumerate(zip(self.points, self.velocities, self.jacobians,
                                             self.asymmetry)):
            yield list(x) + list(v) + [J, a, self.dropped.get(i, "")]


def graph_jacobian(DV) -> float:
    """sqrt(det(I + DV^T DV)) as the product of sqrt(1 + s^2) over the
    singular values of DV."""
    DV = np.asarray(DV, dtype=float)
    if DV.ndim != 2 or DV.shape[0] != DV.shape[1]:
        raise ValueError("DV must be square")
    if not np.all(np.isfinite(DV)):
        raise ValueError("DV has non-finite entries")
    s = np.linalg.svd(DV, compute_uv=False)
    return float(math.exp(0.5 * np.sum(np.log1p(s * s))))


def solved_field(ms: MassSystem, cone: ConeSpec, opts: SolveOptions = SolveOptions()):
    """x -> V_a(x); raises when the solve is rejected."""
    def V(x):
        return solve_velocity_field(ms, cone, x, opts).v
    return V


def differential_of_field(ms: MassSystem, points, velocity_field, fd_step: float,
                          basis=None, threads: int = 1, lattice: Lattice | None = None,
                          cone: ConeSpec | None = None) -> SlicePatch:
    """Central differences of ``velocity_field`` along the reduced basis.

    A point is dropped when the field fails at it or at any of its 2k
    neighbours, or when it lies outside ``cone``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    B = reduced_basis(ms) if basis is None else np.asarray(basis, float)
    k = B.shape[1]

    def coords(u):
        return B.T @ (ms.mrep * u)

    def one(x):
        if cone is not None and not cone_contains(cone, x)[0]:
            return None, "outside cone"
        try:
            v0 = np.asarray(velocity_field(x), float)
            plus = [np.asarray(velocity_field(x + fd_step * B[:, j]), float) for j in range(k)]
            minus = [np.asarray(velocity_field(x - fd_step * B[:, j]), float) for j in range(k)]
        except Exception as exc:  # any solver failure drops the point
            return None, f"{type(exc).__name__}: {exc}"
        c0 = coords(v0)
        D = np.empty((k, k))
        asym = 0.0
        for j in range(k):
            cp, cm = coords(plus[j]), coords(minus[j])
            D[:, j] = (cp - cm) / (2 * fd_step)
            asym = max(asym, float(np.max(np.abs((cp - c0) - (c0 - cm)))) / fd_step)
        return (v0, D, asym), ""

    out = parallel_map(one, list(pts), threads=threads)
    G, n = pts.shape
    V = np.full((G, n), np.nan)
    DV = np.full((G, k, k), np.nan)
    J = np.full(G, np.nan)
    A = np.full(G, np.nan)
    dropped = {}
    for i, (res, why) in enumerate(out):
        if res is None:
            dropped[i] = why
            continue
        V[i], DV[i], A[i] = res
        J[i] = graph_jacobian(DV[i])
    return SlicePatch(pts, V, DV, J, A, dropped, float(fd_step), lattice)


@dataclass(frozen=True)
class MeasureEstimate:
    value: float
    volume: float  # Lebesgue measure of the kept cells
    max_jacobian: float
    dropped_fraction: float
    reliable: bool


def hausdorff_measure_patch(patch: SlicePatch, cell_volume: float) -> MeasureEstimate:
    """Riemann sum of the graph Jacobian over the kept lattice cells."""
    keep = patch.kept
    J = patch.jacobians[keep]
    frac = 1.0 - keep.mean() if len(keep) else 1.0
    vol = float(J.size * cell_volume)
    val = float(np.sum(J) * cell_volume)
    mj = float(J.max()) if J.size else math.nan
    return MeasureEstimate(val, vol, mj, float(frac), bool(frac <= 0.1 and np.isfinite(val)))


@dataclass(frozen=True, eq=False)
class PhaseCloud:
    q: np.ndarray  # (P, n)
    v: np.ndarray  # (P, n)
    steps: np.ndarray  # backward time index n of each point
    source: np.ndarray  # index of the graph point it came from
    failures: list  # (source index, first failing step, reason)


def flow_saturate(ms: MassSystem, graph_q, graph_v, n_max: int = 8,
                  opts: IntegrateOptions = DEFAULT_OPTIONS, threads: int = 1) -> PhaseCloud:
    """Union over n = 0..n_max of the time -n images of the graph points.

    A point stops contributing at its first backward singularity.
    """
    graph_q = np.atleast_2d(np.asarray(graph_q, float))
    graph_v = np.atleast_2d(np.asarray(graph_v, float))
    n = ms.n

    def one(idx):
        y = np.concatenate([graph_q[idx], graph_v[idx], [0.0]])
        ctol = opts.coll_rel_tol * characteristic_length(ms, graph_q[idx])
        states = [(0, y[:n].copy(), y[n:2 * n].copy())]
        fail = None
        t = 0.0
        for step in range(1, n_max + 1):
            st = kernels.dop853(ms.masses, ms.dim, y, t, -float(step), rtol=opts.rtol,
                                atol=opts.atol, kepler_eta=opts.kepler_eta, coll_tol=ctol,
                                max_steps=opts.max_steps, backend=opts.backend)
            if st[0] != 0:
                fail = (idx, step, "collision-approach" if st[0] == 1 else f"status {st[0]}")
                break
            y, t = st[2], -float(step)
            states.append((step, y[:n].copy(), y[n:2 * n].copy()))
        return states, fail

    res = parallel_map(one, range(len(graph_q)), threads=threads)
    Q, V, S, src, fails = [], [], [], [], []
    for idx, (states, fail) in enumerate(res):
        for step, q, v in states:
            Q.append(q)
            V.append(v)
            S.append(step)
            src.append(idx)
        if fail is not None:
            fails.append(fail)
    return PhaseCloud(np.array(Q).reshape(-1, n), np.array(V).reshape(-1, n),
                      np.array(S, int), np.array(src, int), fails)


def phase_coordinates(ms: MassSystem, q, v, time_scale: float, basis=None) -> np.ndarray:
    """Reduced coordinates (positions, time_scale * velocities), shape (P, 2k)."""
    B = reduced_basis(ms) if basis is None else basis
    Q = np.atleast_2d(q) * ms.mrep[None, :] @ B
    V = np.atleast_2d(v) * ms.mrep[None, :] @ B
    return np.hstack([Q, time_scale * V])


@dataclass(frozen=True)
class DimensionEstimate:
    scales: list
    counts: list
    slope: float
    band: tuple  # slope -/+ two standard errors
    n_points: int

    def to_dict(self):
        return {"scales": self.scales, "counts": self.counts, "slope": self.slope,
                "band": list(self.band), "n_points": self.n_points}


_MIX = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9,
                 0x27D4EB2F165667C5, 0x85EBCA77C2B2AE63, 0xFF51AFD7ED558CCD,
                 0xC4CEB9FE1A85EC53, 0x94D049BB133111EB], dtype=np.uint64)


def _cell_keys(points, eps, origin):
    """One 64-bit key per point: a wrapping multiply-add hash of its cell index."""
    c = np.floor((points - origin) / eps).astype(np.int64).view(np.uint64)
    dim = c.shape[1]
    mix = np.resize(_MIX, dim) * (np.arange(dim, dtype=np.uint64) // 8 * 2 + 1)
    with np.errstate(over="ignore"):
        return (c * mix[None, :]).sum(axis=1, dtype=np.uint64)


def _count(points, eps, origin, threads, chunk=200000):
    def cells(lo):
        return np.unique(_cell_keys(points[lo:lo + chunk], eps, origin))

    parts = parallel_map(cells, range(0, len(points), chunk), threads=threads)
    return int(len(np.unique(np.concatenate(parts)))) if parts else 0


def default_scales(cloud, n_scales: int = 4, fill: float = 4.0, threads: int = 1):
    """Dyadic scales from the smallest multiple 2^j of the median
    nearest-neighbour distance (j >= 1) whose boxes hold ``fill`` points on
    average, so the finest count is not limited by sampling."""
    d, _ = cKDTree(cloud).query(cloud, k=2)
    base = 2.0 * float(np.median(d[:, 1]))
    if base <= 0:
        raise ValueError("degenerate cloud: repeated points")
    lo = cloud.min(axis=0)
    while _count(cloud, base, lo, threads) * fill > len(cloud):
        base *= 2
    return [base * 2 ** j for j in range(n_scales)]


def box_counting_dimension(cloud, scales=None, window: bool = True, n_offsets: int = 4,
                           seed: int = 0, threads: int = 1,
                           min_points: int = 1000) -> DimensionEstimate:
    """Fit log N(eps) against log(1/eps) over dyadic scales.

    With ``window`` the count is restricted to a cube of side twice the
    largest scale, centred near the cloud point closest to the centroid and
    aligned with every box grid; this removes the edge term (D/eps + 1)^k
    that biases whole-cloud counts downward. Counts are averaged over
    seeded sub-box shifts of the grid origin, which keeps them monotone for
    nested scales.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if len(cloud) < min_points:
        raise ValueError(f"cloud has {len(cloud)} points, need {min_points}")
    if scales is None:
        scales = default_scales(cloud, threads=threads)
    elif isinstance(scales, (int, np.integer)):
        scales = default_scales(cloud, int(scales), threads=threads)
    scales = sorted(float(s) for s in scales)
    if len(scales) < 4:
        raise ValueError("at least four scales are needed")
    rng = np.random.default_rng(seed)
    shifts = rng.uniform(0.0, 1.0, size=(n_offsets, cloud.shape[1]))
    if window:
        side = 2 * scales[-1]
        c = cloud.mean(axis=0)
        center = cloud[int(np.argmin(np.sum((cloud - c) ** 2, axis=1)))]
    counts = []
    for eps in scales:
        cs = []
        for sh in shifts:
            if window:
                corner = center - side / 2 + sh * scales[0]
                inside = np.all((cloud >= corner) & (cloud < corner + side), axis=1)
                pts = cloud[inside]
                cs.append(_count(pts, eps, corner, threads) if len(pts) else 0)
            else:
                cs.append(_count(cloud, eps, cloud.min(axis=0) - sh * scales[-1], threads))
        counts.append(float(np.mean(cs)))
    if counts[0] <= 1:
        raise ValueError("degenerate cloud: one box at the finest scale")
    fit = linregress(-np.log(scales), np.log(counts))
    s = float(fit.slope)
    return DimensionEstimate(scales, counts, s, (s - 2 * fit.stderr, s + 2 * fit.stderr),
                             len(cloud))
