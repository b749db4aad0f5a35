import math

import numpy as np
import pytest

from jmflow.core import MassSystem, PhaseState, mass_inner, mass_norm, reduced_basis
from jmflow.dynamics import flow_map
from jmflow.scenario import load_scenario
from jmflow.shape import (ConeSpec, SolveOptions, cone_contains, energy_consistency,
                          limit_shape, solve_velocity_field)

AXIS = np.array([-1 / math.sqrt(2), 0.0, 1 / math.sqrt(2), 0.0])


@pytest.fixture(scope="module")
def hyper():
    return load_scenario("kepler-hyperbolic")


@pytest.fixture(scope="module")
def axis_cone(hyper):
    return ConeSpec(hyper.ms, AXIS, 0.9, 1.0)


@pytest.fixture(scope="module")
def axis_solve(hyper, axis_cone):
    return solve_velocity_field(hyper.ms, axis_cone, 5 * AXIS)


@pytest.mark.parametrize("state", ["escape", "oblique"])
def test_kepler_asymptotic_speed(hyper, state):
    ms, s = hyper.ms, hyper.state(state)
    est = limit_shape(ms, s)
    v_inf = math.sqrt(2 * est.h)  # reduced pair: |a|_m^2 / 2 = h
    assert mass_norm(ms, est.a) == pytest.approx(v_inf, abs=1e-4)
    assert est.energy_gap <= 1e-4
    assert est.p is not None and est.p <= 2 / 3 + 0.15


def test_escape_shape_is_radial(hyper):
    est = limit_shape(hyper.ms, hyper.state("escape"))
    np.testing.assert_allclose(est.a, AXIS * 1.0, atol=1e-5)


def test_parabolic_exponent():
    sc = load_scenario("kepler-parabolic")
    est = limit_shape(sc.ms, sc.state())
    assert est.method == "parabolic"
    assert mass_norm(sc.ms, est.a) == 0.0
    assert est.p == pytest.approx(2 / 3, abs=0.05)


def test_nearly_free_motion():
    ms = MassSystem([1.0, 1.0], 2)
    v = np.array([-1.0, 0.3, 1.0, -0.3])
    s = PhaseState(ms, [-500.0, 0, 500.0, 0], v)
    est = limit_shape(ms, s, horizon=20.0)
    np.testing.assert_allclose(est.a, v, atol=1e-3)


def test_negative_energy_and_collision_rejected(hyper):
    with pytest.raises(ValueError):
        limit_shape(hyper.ms, hyper.state("circular"))
    sc = load_scenario("collision-headon")
    with pytest.raises(RuntimeError):
        limit_shape(sc.ms, sc.state("inward"), horizon=20.0)


def test_cone_examples(hyper, axis_cone):
    ms = hyper.ms
    ok, cos = cone_contains(axis_cone, 3 * AXIS)
    assert ok and cos == pytest.approx(1.0)
    perp = np.array([0.0, -1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])
    assert mass_inner(ms, perp, AXIS) == 0.0
    ok, cos = cone_contains(axis_cone, 3 * perp)
    assert not ok and cos == pytest.approx(0.0)
    assert not cone_contains(axis_cone, 0.5 * AXIS)[0]  # inside the removed ball
    ok, cos = cone_contains(axis_cone, np.zeros(4))
    assert not ok and math.isnan(cos)
    with pytest.raises(ValueError):
        ConeSpec(ms, AXIS, 1.0, 1.0)


def test_axis_solve(hyper, axis_cone, axis_solve):
    ms = hyper.ms
    sol = axis_solve
    assert sol.converged and sol.residual <= 1e-6
    nv = mass_norm(ms, sol.v)
    cos = mass_inner(ms, sol.v, AXIS) / nv
    assert 1 - cos <= 1e-5
    assert energy_consistency(ms, sol, axis_cone) <= 1e-4


def test_near_boundary_solve(hyper):
    cone = ConeSpec(hyper.ms, AXIS, 0.97, 1.0)
    B = reduced_basis(hyper.ms)
    ax = B.T @ (hyper.ms.mrep * AXIS)
    perp = B @ np.array([-ax[1], ax[0]])
    x = 5 * (0.975 * AXIS + math.sqrt(1 - 0.975 ** 2) * perp)
    assert cone_contains(cone, x)[0]
    sol = solve_velocity_field(hyper.ms, cone, x)
    assert sol.converged and sol.min_cosine >= 0.97


def test_zero_shape_rejected(hyper):
    with pytest.raises(ValueError):
        solve_velocity_field(hyper.ms, ConeSpec(hyper.ms, np.zeros(4), 0.9, 1.0), 5 * AXIS)
    with pytest.raises(ValueError):
        solve_velocity_field(hyper.ms, ConeSpec(hyper.ms, AXIS, 0.9, 1.0),
                             [0.0, -3.0, 0.0, 3.0])


def test_energy_consistency_linear_in_perturbation(hyper, axis_cone, axis_solve):
    ms = hyper.ms
    base = energy_consistency(ms, axis_solve, axis_cone)
    errs = []
    for d in (1e-3, 5e-4, 2.5e-4):
        v = axis_solve.v * (1 + d)
        pert = type(axis_solve)(axis_solve.x, v, 0.0, 0, "converged", 0.0)
        errs.append(energy_consistency(ms, pert, axis_cone) - base)
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_shape_map_continuity(hyper):
    ms, s = hyper.ms, hyper.state("oblique")
    a0 = limit_shape(ms, s).a
    dv = np.array([0.0, 1.0, 0.0, -1.0])
    change = []
    for d in (1e-3, 5e-4, 2.5e-4):
        a = limit_shape(ms, PhaseState(ms, s.q, s.v + d * dv)).a
        change.append(mass_norm(ms, a - a0))
    assert change[0] > change[1] > change[2] > 0
    assert change[0] / change[1] == pytest.approx(2.0, rel=0.1)


def test_flow_invariance(hyper, axis_cone, axis_solve):
    ms = hyper.ms
    s1 = flow_map(ms, PhaseState(ms, axis_solve.x, axis_solve.v), 1.0)
    again = solve_velocity_field(ms, axis_cone, s1.q, SolveOptions())
    np.testing.assert_allclose(again.v, s1.v, atol=1e-4)
