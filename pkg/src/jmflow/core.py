"""Configuration-space primitives for the Newtonian N-body problem (G = 1).

Positions and velocities are stored flat, body by body: ``x[i*d + l]`` is
coordinate ``l`` of body ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

COLLISION_REL_TOL = 1e-10
CM_TOL = 1e-12


class CollisionError(ValueError):
    """Raised when a configuration is (numerically) on the collision set."""


@dataclass(frozen=True, eq=False)
class MassSystem:
    masses: np.ndarray
    dim: int = 2

    def __post_init__(self):
        m = np.array(self.masses, dtype=float).ravel()
        if m.shape[0] < 2:
            raise ValueError("a mass system needs at least two bodies")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValueError("masses must be finite and strictly positive")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError("dimension must be an integer >= 2")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "dim", int(self.dim))

    @property
    def N(self) -> int:
        return self.masses.shape[0]

    @property
    def n(self) -> int:
        """Length of a flat configuration vector."""
        return self.N * self.dim

    @property
    def k(self) -> int:
        """Dimension of the centre-of-mass reduced space."""
        return self.dim * (self.N - 1)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @cached_property
    def mrep(self) -> np.ndarray:
        """Masses repeated per coordinate, aligned with flat vectors."""
        r = np.repeat(self.masses, self.dim)
        r.setflags(write=False)
        return r

    @cached_property
    def pairs(self):
        return np.triu_indices(self.N, 1)

    def flat(self, x) -> np.ndarray:
        a = np.asarray(x, dtype=float)
        if a.size != self.n:
            raise ValueError(f"expected {self.N} bodies in dimension {self.dim}, "
                             f"got array of shape {a.shape}")
        return a.reshape(self.n)

    def bodies(self, x) -> np.ndarray:
        return self.flat(x).reshape(self.N, self.dim)

    def to_dict(self):
        return {"masses": [float(v) for v in self.masses], "dim": self.dim}

    def __eq__(self, other):
        return (isinstance(other, MassSystem) and self.dim == other.dim
                and np.array_equal(self.masses, other.masses))

    def __hash__(self):
        return hash((self.dim, self.masses.tobytes()))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Configuration:
    ms: MassSystem
    positions: np.ndarray

    def __post_init__(self):
        q = _frozen(self.ms.flat(self.positions))
        if not np.all(np.isfinite(q)):
            raise ValueError("configuration has non-finite entries")
        object.__setattr__(self, "positions", q)

    @cached_property
    def min_distance(self) -> float:
        return float(pairwise_distances(self.ms, self.positions).min())

    @property
    def collision_free(self) -> bool:
        return self.min_distance > collision_tol(self.ms, self.positions)


@dataclass(frozen=True, eq=False)
class PhaseState:
    ms: MassSystem
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = self.q.positions if isinstance(self.q, Configuration) else self.q
        q = _frozen(self.ms.flat(q))
        v = _frozen(self.ms.flat(self.v))
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise ValueError("phase state has non-finite entries")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)

    @property
    def config(self) -> Configuration:
        return Configuration(self.ms, self.q)

    def to_dict(self):
        return {"q": self.ms.bodies(self.q).tolist(), "v": self.ms.bodies(self.v).tolist()}


@dataclass(frozen=True, eq=False)
class ReducedConfiguration(Configuration):
    """A configuration whose centre of mass sits at the origin."""

    def __post_init__(self):
        super().__post_init__()
        X = self.ms.bodies(self.positions)
        cm = self.ms.masses @ X
        scale = float(self.ms.masses @ np.linalg.norm(X, axis=1))
        if np.linalg.norm(cm) > CM_TOL * max(scale, 1e-300) and scale > 0:
            raise ValueError("centre of mass is not at the origin")


# ---------------------------------------------------------------- metric

def mass_inner(ms: MassSystem, x, y) -> float:
    """Mass inner product sum_i m_i (x_i, y_i)."""
    return float(np.dot(ms.mrep * ms.flat(x), ms.flat(y)))


def mass_norm(ms: MassSystem, x) -> float:
    return float(np.sqrt(max(mass_inner(ms, x, x), 0.0)))


def dual_norm(ms: MassSystem, p) -> float:
    """Norm of a covector: sqrt(sum_i |p_i|^2 / m_i)."""
    p = ms.flat(p)
    return float(np.sqrt(np.dot(p / ms.mrep, p)))


# ---------------------------------------------------------------- potential

def pairwise_distances(ms: MassSystem, q) -> np.ndarray:
    X = ms.bodies(q)
    i, j = ms.pairs
    return np.linalg.norm(X[j] - X[i], axis=1)


def characteristic_length(ms: MassSystem, q) -> float:
    return float(pairwise_distances(ms, q).max())


def collision_tol(ms: MassSystem, q) -> float:
    return COLLISION_REL_TOL * characteristic_length(ms, q)


def check_collision_free(ms: MassSystem, q, what="configuration"):
    r = pairwise_distances(ms, q)
    if not r.min() > COLLISION_REL_TOL * r.max():
        raise CollisionError(f"{what} is at a collision (min distance {r.min():.3g})")


def potential(ms: MassSystem, q) -> float:
    """Newtonian potential U = sum_{i<j} m_i m_j / |q_i - q_j|."""
    q = q.positions if isinstance(q, Configuration) else q
    r = pairwise_distances(ms, q)
    if not r.min() > COLLISION_REL_TOL * r.max():
        raise CollisionError(f"collision: min distance {r.min():.3g}")
    i, j = ms.pairs
    return float(np.sum(ms.masses[i] * ms.masses[j] / r))


def potential_gradient(ms: MassSystem, q) -> np.ndarray:
    """Euclidean gradient of U; body i gets m_i times its acceleration."""
    return ms.mrep * acceleration(ms, q)


def acceleration(ms: MassSystem, q) -> np.ndarray:
    X = ms.bodies(q)
    i, j = ms.pairs
    D = X[j] - X[i]
    r = np.linalg.norm(D, axis=1)
    if not r.min() > COLLISION_REL_TOL * r.max():
        raise CollisionError(f"collision: min distance {r.min():.3g}")
    W = D / (r ** 3)[:, None]
    acc = np.zeros_like(X)
    np.add.at(acc, i, ms.masses[j][:, None] * W)
    np.add.at(acc, j, -ms.masses[i][:, None] * W)
    return acc.ravel()


def potential_hessian(ms: MassSystem, q) -> np.ndarray:
    """Dense Hessian of U at q (n x n)."""
    X = ms.bodies(q)
    N, d = X.shape
    H = np.zeros((N, d, N, d))
    i, j = ms.pairs
    for a, b in zip(i, j):
        D = X[a] - X[b]
        r = np.linalg.norm(D)
        blk = ms.masses[a] * ms.masses[b] * (3 * np.outer(D, D) / r ** 5 - np.eye(d) / r ** 3)
        H[a, :, a, :] += blk
        H[b, :, b, :] += blk
        H[a, :, b, :] -= blk
        H[b, :, a, :] -= blk
    return H.reshape(N * d, N * d)


def potential_batch(ms: MassSystem, Q) -> np.ndarray:
    """U for each row of a (T, n) array, without collision checks."""
    Q = np.asarray(Q, dtype=float).reshape(-1, ms.N, ms.dim)
    i, j = ms.pairs
    r = np.linalg.norm(Q[:, j] - Q[:, i], axis=2)
    return (ms.masses[i] * ms.masses[j] / r).sum(axis=1)


def min_distance_batch(ms: MassSystem, Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=float).reshape(-1, ms.N, ms.dim)
    i, j = ms.pairs
    return np.linalg.norm(Q[:, j] - Q[:, i], axis=2).min(axis=1)


# ---------------------------------------------------------------- energies

def kinetic(ms: MassSystem, v) -> float:
    return 0.5 * mass_inner(ms, v, v)


def energy(ms: MassSystem, s: PhaseState) -> float:
    """Total energy h = |v|^2/2 - U(q)."""
    return kinetic(ms, s.v) - potential(ms, s.q)


def moment_of_inertia(ms: MassSystem, q) -> float:
    q = q.positions if isinstance(q, Configuration) else q
    return mass_inner(ms, q, q)


def center_of_mass(ms: MassSystem, x) -> np.ndarray:
    return ms.masses @ ms.bodies(x) / ms.total_mass


def reduce_to_center_of_mass(ms: MassSystem, s: PhaseState) -> PhaseState:
    """Shift positions and velocities so both mass-weighted means vanish."""
    X = ms.bodies(s.q) - center_of_mass(ms, s.q)
    V = ms.bodies(s.v) - center_of_mass(ms, s.v)
    return PhaseState(ms, X.ravel(), V.ravel())


def project_reduced(ms: MassSystem, x) -> np.ndarray:
    """Orthogonal projection (mass metric) onto the reduced space."""
    return (ms.bodies(x) - center_of_mass(ms, x)).ravel()


def reduced_basis(ms: MassSystem) -> np.ndarray:
    """Columns form a mass-orthonormal basis of the reduced space.

    Deterministic: Gram-Schmidt on the coordinate directions of bodies
    0..N-2, each first projected onto the reduced space.
    """
    cols = []
    for i in range(ms.N - 1):
        for l in range(ms.dim):
            e = np.zeros(ms.n)
            e[i * ms.dim + l] = 1.0
            e = project_reduced(ms, e)
            for c in cols:
                e = e - mass_inner(ms, c, e) * c
            for c in cols:  # second pass for orthogonality to rounding
                e = e - mass_inner(ms, c, e) * c
            cols.append(e / mass_norm(ms, e))
    return np.column_stack(cols)


def to_reduced_coords(ms: MassSystem, x, basis=None) -> np.ndarray:
    B = reduced_basis(ms) if basis is None else basis
    return B.T @ (ms.mrep * ms.flat(x))


def from_reduced_coords(ms: MassSystem, z, basis=None) -> np.ndarray:
    B = reduced_basis(ms) if basis is None else basis
    return B @ np.asarray(z, dtype=float)
