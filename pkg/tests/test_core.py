import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jmflow.core import (CollisionError, MassSystem, PhaseState, energy, from_reduced_coords,
                         kinetic, mass_inner, mass_norm, moment_of_inertia, potential,
                         potential_gradient, potential_hessian, reduce_to_center_of_mass,
                         reduced_basis, to_reduced_coords)

PAIR = np.array([-0.5, 0.0, 0.5, 0.0])
finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
masses3 = arrays(float, 3, elements=st.floats(0.1, 5.0))


def spread_config(rng, N, d=2):
    while True:
        q = rng.uniform(-1, 1, N * d)
        X = q.reshape(N, d)
        if min(np.linalg.norm(X[i] - X[j]) for i in range(N) for j in range(i)) > 0.2:
            return q


def test_mass_inner_examples():
    ms = MassSystem([1, 1], 2)
    assert mass_inner(ms, [1, 0, 0, 0], [1, 0, 0, 0]) == pytest.approx(1.0)
    ms2 = MassSystem([2, 3], 2)
    x = [1, 0, 0, 0]
    y = [0, 0, -1, 0]
    assert mass_inner(ms2, x, y) == pytest.approx(0.0)
    # 2*1*1 + 3*1*(-1)
    assert mass_inner(ms2, [1, 0, 1, 0], [1, 0, -1, 0]) == pytest.approx(-1.0)


def test_potential_examples():
    ms = MassSystem([1, 1], 2)
    assert potential(ms, PAIR) == pytest.approx(1.0, rel=1e-15)
    assert potential(ms, 2 * PAIR) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(CollisionError):
        potential(ms, [0.3, 0.1, 0.3, 0.1])


def test_energy_examples():
    ms = MassSystem([1, 1], 2)
    assert energy(ms, PhaseState(ms, PAIR, [0, -1, 0, 1])) == pytest.approx(0.0, abs=1e-15)
    assert energy(ms, PhaseState(ms, PAIR, np.zeros(4))) == pytest.approx(-1.0)


def test_moment_of_inertia_and_reduction():
    ms = MassSystem([1, 1], 2)
    assert moment_of_inertia(ms, PAIR) == pytest.approx(0.5)
    assert moment_of_inertia(ms, np.zeros(4)) == 0.0
    assert moment_of_inertia(ms, 3 * PAIR) == pytest.approx(4.5)
    s = PhaseState(ms, [0, 0, 1, 0], [0, 0, 0, 0])
    r = reduce_to_center_of_mass(ms, s)
    np.testing.assert_allclose(r.q, PAIR, atol=1e-15)
    assert potential(ms, r.q) == pytest.approx(potential(ms, s.q))
    again = reduce_to_center_of_mass(ms, r)
    np.testing.assert_array_equal(again.q, r.q)


@given(masses3, arrays(float, 6, elements=finite), arrays(float, 6, elements=finite))
def test_mass_inner_symmetric_positive(m, x, y):
    ms = MassSystem(m, 2)
    assert mass_inner(ms, x, y) == pytest.approx(mass_inner(ms, y, x), rel=1e-12, abs=1e-12)
    nx = mass_inner(ms, x, x)
    assert nx >= 0
    if np.any(x != 0):
        assert nx > 0
    assert mass_norm(ms, x) == pytest.approx(np.sqrt(nx), rel=1e-12, abs=1e-300)


@given(masses3, st.integers(0, 2**31), st.floats(0.2, 5.0),
       arrays(float, 2, elements=finite))
def test_potential_translation_and_homogeneity(m, seed, lam, shift):
    ms = MassSystem(m, 2)
    q = spread_config(np.random.default_rng(seed), 3)
    U = potential(ms, q)
    assert potential(ms, q + np.tile(shift, 3)) == pytest.approx(U, rel=1e-12)
    assert potential(ms, lam * q) == pytest.approx(U / lam, rel=1e-12)


@given(masses3, st.integers(0, 2**31), arrays(float, 6, elements=finite))
def test_reduction_lowers_energy(m, seed, v):
    ms = MassSystem(m, 2)
    q = spread_config(np.random.default_rng(seed), 3)
    s = PhaseState(ms, q, v)
    r = reduce_to_center_of_mass(ms, s)
    P = (v.reshape(3, 2) * m[:, None]).sum(axis=0)
    drop = float(P @ P) / (2 * m.sum())
    assert energy(ms, r) == pytest.approx(energy(ms, s) - drop, rel=1e-12, abs=1e-12)
    assert energy(ms, r) <= energy(ms, s) + 1e-12
    assert kinetic(ms, r.v) <= kinetic(ms, s.v) + 1e-12


def test_gradient_and_hessian_match_finite_differences():
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    q = spread_config(np.random.default_rng(3), 3)
    g = potential_gradient(ms, q)
    H = potential_hessian(ms, q)
    e = 1e-6
    for i in range(6):
        dq = np.zeros(6)
        dq[i] = e
        fd = (potential(ms, q + dq) - potential(ms, q - dq)) / (2 * e)
        assert g[i] == pytest.approx(fd, rel=1e-7, abs=1e-8)
        fdg = (potential_gradient(ms, q + dq) - potential_gradient(ms, q - dq)) / (2 * e)
        np.testing.assert_allclose(H[:, i], fdg, rtol=1e-5, atol=1e-6)


def test_reduced_basis_is_mass_orthonormal():
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    B = reduced_basis(ms)
    assert B.shape == (6, 4)
    G = B.T @ (ms.mrep[:, None] * B)
    np.testing.assert_allclose(G, np.eye(4), atol=1e-13)
    z = np.array([0.3, -0.2, 1.0, 0.5])
    np.testing.assert_allclose(to_reduced_coords(ms, from_reduced_coords(ms, z)), z, atol=1e-13)
