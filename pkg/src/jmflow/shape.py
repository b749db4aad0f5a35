"""Asymptotic limit shapes, cones and the fixed-shape velocity field."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import kernels
from .core import (MassSystem, PhaseState, energy, mass_inner, mass_norm, potential,
                   reduce_to_center_of_mass, reduced_basis, check_collision_free)
from .parallel import parallel_map


class NonConvergence(RuntimeError):
    pass


class ConeExit(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeOptions:
    horizon: float = 200.0
    rtol: float = 1e-13
    h_tol: float = 1e-9  # energies below this are treated as parabolic
    n_fit: int = 40
    h_slack: float = 1e-9
    backend: str | None = None


@dataclass(frozen=True, eq=False)
class LimitShapeEstimate:
    a: np.ndarray
    p: float | None
    fit_residual: float
    horizon: float
    h: float
    energy_gap: float  # | |a|^2/2 - h |
    method: str


def _flow(ms, q, v, T, opts, record_times=None):
    y0 = np.concatenate([q, v, [0.0]])
    if record_times is None:
        st = kernels.dop853(ms.masses, ms.dim, y0, 0.0, T, rtol=opts.rtol, atol=opts.rtol,
                            backend=opts.backend)
        if st[0] != 0:
            raise RuntimeError(f"integration failed with status {st[0]}")
        return st[2]
    out = []
    t = 0.0
    y = y0
    for tn in record_times:
        if tn > t:
            st = kernels.dop853(ms.masses, ms.dim, y, t, float(tn), rtol=opts.rtol,
                                atol=opts.rtol, backend=opts.backend)
            if st[0] != 0:
                raise RuntimeError(f"integration failed with status {st[0]}")
            y, t = st[2], float(tn)
        out.append(y.copy())
    return np.array(out)


def straight_tail(ms: MassSystem, q, v):
    """Velocity change accumulated after the current time if every pair
    kept moving on straight lines (closed-form pair integrals)."""
    X, V = ms.bodies(q), ms.bodies(v)
    out = np.zeros_like(X)
    for i, j in zip(*ms.pairs):
        D0 = X[j] - X[i]
        W = V[j] - V[i]
        c = float(D0 @ D0)
        w = math.sqrt(float(W @ W))
        b = float(D0 @ W)
        sc = math.sqrt(c)
        den = w * sc + b
        if w == 0 or den <= 0:
            continue
        F = D0 / (sc * den) + W / (w * den)
        out[i] += ms.masses[j] * F
        out[j] -= ms.masses[i] * F
    return out.ravel()


def _asymptotic_velocity(ms, q, v, T, opts):
    """Tail-corrected velocity at T and T/2 combined by Richardson in 1/T^2."""
    yh = _flow(ms, q, v, T / 2, opts)
    n = ms.n
    a_half = yh[n:2 * n] + straight_tail(ms, yh[:n], yh[n:2 * n])
    st = kernels.dop853(ms.masses, ms.dim, yh, T / 2, T, rtol=opts.rtol, atol=opts.rtol,
                        backend=opts.backend)
    if st[0] != 0:
        raise RuntimeError("integration failed")
    y = st[2]
    a_full = y[n:2 * n] + straight_tail(ms, y[:n], y[n:2 * n])
    return (4 * a_full - a_half) / 3, y


def limit_shape(ms: MassSystem, s: PhaseState, horizon: float | None = None,
                opts: ShapeOptions = ShapeOptions()) -> LimitShapeEstimate:
    """Estimate a in g(t) = a t + c t^p over the last half of the horizon.

    The state is first moved to the centre-of-mass frame.
    """
    T = opts.horizon if horizon is None else float(horizon)
    h = energy(ms, s)
    if h < -opts.h_slack:
        raise ValueError(f"negative energy {h:.6g}")
    check_collision_free(ms, s.q)
    r = reduce_to_center_of_mass(ms, s)
    q, v = r.q.copy(), r.v.copy()
    ts = np.geomspace(T / 2, T, opts.n_fit)
    Y = _flow(ms, q, v, T, opts, record_times=ts)  # raises on collision
    n = ms.n
    G = Y[:, :n]
    if h > opts.h_tol:
        a, _ = _asymptotic_velocity(ms, q, v, T, opts)
        method = "tail-richardson"
    else:
        a = np.zeros(n)
        method = "parabolic"
    R = G - ts[:, None] * a[None, :]
    norms = np.sqrt(np.sum(ms.mrep[None, :] * R * R, axis=1))
    p, resid = _fit_power(ts, R, ms)
    if p is None or not np.all(np.isfinite(norms)):
        a = G[-1] / T
        method = "endpoint"
    gap = abs(0.5 * mass_inner(ms, a, a) - h)
    return LimitShapeEstimate(a, p, resid, T, h, gap, method)


def _fit_power(ts, R, ms):
    """Least squares R(t) ~ c t^p (vector c, scalar p); returns (p, rel. residual)."""
    W = np.sqrt(ms.mrep)[None, :] * R
    scale = float(np.sqrt(np.sum(W * W)))
    if scale <= 1e-14 * len(ts):
        return None, math.nan

    def cost(p):
        f = ts ** p
        c = (f @ W) / (f @ f)
        E = W - f[:, None] * c[None, :]
        return float(np.sum(E * E))

    r = minimize_scalar(cost, bounds=(-2.0, 1.5), method="bounded",
                        options={"xatol": 1e-8})
    return float(r.x), math.sqrt(max(r.fun, 0.0)) / scale


def asymptotic_shape(ms, q, v, opts: ShapeOptions = ShapeOptions()):
    """Just the limit velocity (no fit), as used inside the shooting solver."""
    a, _ = _asymptotic_velocity(ms, q, v, opts.horizon, opts)
    return a


# ---------------------------------------------------------------- cones

@dataclass(frozen=True, eq=False)
class ConeSpec:
    ms: MassSystem
    a: np.ndarray
    alpha: float
    r: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.r > 0:
            raise ValueError("r must be positive")
        object.__setattr__(self, "a", self.ms.flat(self.a).astype(float))


def cone_contains(cone: ConeSpec, x):
    """Return ``(inside, cosine)``; cosine is nan for x = 0."""
    ms = cone.ms
    x = ms.flat(x)
    nx, na = mass_norm(ms, x), mass_norm(ms, cone.a)
    if nx == 0 or na == 0:
        return False, math.nan
    cos = mass_inner(ms, x, cone.a) / (nx * na)
    return bool(cos >= cone.alpha and nx > cone.r), float(cos)


@dataclass(frozen=True)
class SolveOptions:
    shoot_tol: float = 1e-6
    inner_tol: float = 1e-11
    max_iter: int = 40
    fd_rel: float = 1e-6
    horizon: float = 200.0
    n_check: int = 200
    rtol: float = 1e-13
    backend: str | None = None

    def shape_opts(self):
        return ShapeOptions(horizon=self.horizon, rtol=self.rtol, backend=self.backend)


@dataclass(frozen=True, eq=False)
class ShapeSolve:
    x: np.ndarray
    v: np.ndarray
    residual: float
    iterations: int
    status: str  # converged | non-convergence | cone-exit
    energy: float
    min_cosine: float = math.nan

    @property
    def converged(self):
        return self.status == "converged"


def solve_velocity_field(ms: MassSystem, cone: ConeSpec, x, opts: SolveOptions = SolveOptions(),
                         v_start=None, raise_errors: bool = True) -> ShapeSolve:
    """Find v with asymptotic velocity a from x by damped Newton shooting.

    The unknown lives in the reduced space (mass-orthonormal coordinates);
    the Jacobian is built from forward differences of step fd_rel (1 + |v|).
    """
    x = ms.flat(x).astype(float)
    inside, _ = cone_contains(cone, x)
    if not inside:
        raise ValueError("x is not in the cone")
    if mass_norm(ms, cone.a) == 0:
        raise ValueError("a = 0: the hyperbolic regime needs positive energy")
    check_collision_free(ms, x)
    so = opts.shape_opts()
    B = reduced_basis(ms)
    Mw = ms.mrep

    def coords(u):
        return B.T @ (Mw * u)

    target = coords(cone.a)
    z = coords(cone.a if v_start is None else ms.flat(v_start))

    def F(zv):
        try:
            return coords(asymptotic_shape(ms, x, B @ zv, so)) - target
        except RuntimeError:
            return None

    Fz = F(z)
    if Fz is None:
        raise NonConvergence("integration failed at the initial guess")
    it = 0
    for it in range(1, opts.max_iter + 1):
        fn = float(np.linalg.norm(Fz))
        if fn <= opts.inner_tol:
            break
        eps = opts.fd_rel * (1 + float(np.linalg.norm(z)))
        J = np.empty((len(z), len(z)))
        for c in range(len(z)):
            dz = z.copy()
            dz[c] += eps
            Fc = F(dz)
            if Fc is None:
                raise NonConvergence("integration failed in the Jacobian")
            J[:, c] = (Fc - Fz) / eps
        step = np.linalg.lstsq(J, -Fz, rcond=None)[0]
        lam = 1.0
        improved = False
        for _ in range(25):
            Fn = F(z + lam * step)
            if Fn is not None and np.linalg.norm(Fn) < fn:
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        z, Fz = z + lam * step, Fn
    res = float(np.linalg.norm(Fz))
    v = B @ z
    h = 0.5 * mass_inner(ms, v, v) - potential(ms, x)
    if res > opts.shoot_tol:
        out = ShapeSolve(x, v, res, it, "non-convergence", h)
        if raise_errors:
            raise NonConvergence(f"shape residual {res:.3g} after {it} iterations")
        return out
    mc = _min_cosine(ms, cone, x, v, opts)
    status = "converged" if mc >= cone.alpha else "cone-exit"
    out = ShapeSolve(x, v, res, it, status, h, mc)
    if status == "cone-exit" and raise_errors:
        raise ConeExit(f"trajectory leaves the cone (min cosine {mc:.4f})")
    return out


def _min_cosine(ms, cone, x, v, opts):
    ts = np.linspace(0.0, opts.horizon, opts.n_check)
    Y = _flow(ms, x, v, opts.horizon, opts.shape_opts(), record_times=ts[1:])
    cs = [cone_contains(cone, y[:ms.n])[1] for y in Y]
    return float(min([cone_contains(cone, x)[1]] + cs))


def energy_consistency(ms: MassSystem, solve: ShapeSolve, cone: ConeSpec) -> float:
    """| |v|^2/2 - U(x) - |a|^2/2 |."""
    h = 0.5 * mass_inner(ms, solve.v, solve.v) - potential(ms, solve.x)
    return abs(h - 0.5 * mass_inner(ms, cone.a, cone.a))


def solve_many(ms, cone, points, opts: SolveOptions = SolveOptions(), threads=1):
    """Per-point solves; failures become non-raising ShapeSolve records."""
    def one(x):
        try:
            return solve_velocity_field(ms, cone, x, opts, raise_errors=False)
        except (NonConvergence, ValueError, RuntimeError) as exc:
            return ShapeSolve(ms.flat(x), np.full(ms.n, np.nan), math.inf, 0,
                              f"failed: {exc}", math.nan)
    return parallel_map(one, list(points), threads=threads)
