import csv
import json
import math

import numpy as np
import pytest

from jmflow.core import MassSystem, PhaseState, energy
from jmflow.dynamics import (SingularityReport, Trajectory, continuous_dependence_probe,
                             export_trajectory, flow_map, integrate, kepler_period_check)

PAIR = np.array([-0.5, 0.0, 0.5, 0.0])
CIRC_V = np.array([0.0, -1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])
PERIOD = math.pi * math.sqrt(2)


@pytest.fixture
def ms():
    return MassSystem([1.0, 1.0], 2)


def test_circular_period(ms):
    s = PhaseState(ms, PAIR, CIRC_V)
    err, t = kepler_period_check(ms, s, PERIOD)
    assert err <= 1e-6
    back = flow_map(ms, s, PERIOD)
    np.testing.assert_allclose(back.q, s.q, atol=1e-5)
    np.testing.assert_allclose(back.v, s.v, atol=1e-5)


def test_head_on_collapse_time(ms):
    # free fall from rest at separation r0 with total mass M: t = (pi/2) sqrt(r0^3 / (2 M))
    s = PhaseState(ms, [-1.0, 0, 1.0, 0], np.zeros(4))
    rep = integrate(ms, s, 5.0)
    assert isinstance(rep, SingularityReport)
    assert rep.classification == "collision-approach"
    t_ff = 0.5 * math.pi * math.sqrt(2.0 ** 3 / (2 * 2.0))
    assert rep.t_star == pytest.approx(t_ff, rel=1e-4)
    assert rep.inertia_trend < 0


def test_hyperbolic_escape_is_valid_and_speeds_up_toward_limit(ms):
    s = PhaseState(ms, PAIR, [-math.sqrt(1.5), 0, math.sqrt(1.5), 0])
    tr = integrate(ms, s, 100.0, sample_times=np.linspace(0, 100, 51))
    assert isinstance(tr, Trajectory) and tr.valid
    assert tr.drift <= 1e-8
    speed = np.linalg.norm(tr.v, axis=1)
    assert np.all(np.diff(speed) < 0)  # decelerating outward
    # relative speed tends to sqrt(4h/m_reduced-scaled) = 2 sqrt(h) for equal unit masses
    assert speed[-1] / math.sqrt(2) * 2 == pytest.approx(2 * math.sqrt(energy(ms, s)), rel=0.02)


def test_flow_group_and_reversibility(ms):
    s = PhaseState(ms, [-1, 0, 1, 0], [-0.7, 0.4, 0.7, -0.4])
    assert flow_map(ms, s, 0.0) is s
    a = flow_map(ms, flow_map(ms, s, 0.7), 0.8)
    b = flow_map(ms, s, 1.5)
    np.testing.assert_allclose(a.q, b.q, atol=1e-9)
    back = flow_map(ms, flow_map(ms, s, 1.0), -1.0)
    np.testing.assert_allclose(back.q, s.q, atol=1e-6)
    np.testing.assert_allclose(back.v, s.v, atol=1e-6)


def test_three_body_conservation_laws():
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    s = PhaseState(ms, [1, 0, -1, 1, 0, -1], [0.3, 0.5, -0.6, 0.1, 0.2, -0.4])
    tr = integrate(ms, s, 20.0, sample_times=np.linspace(0, 20, 81))
    assert isinstance(tr, Trajectory)
    assert tr.drift <= 1e-8
    P = tr.momentum()
    np.testing.assert_allclose(P, np.repeat(P[:1], len(P), axis=0), atol=1e-8)
    L = tr.angular_momentum()
    assert np.max(np.abs(L - L[0])) <= 1e-8 * max(1.0, abs(L[0]))


def test_continuous_dependence(ms):
    s = PhaseState(ms, PAIR, [-1.2, 0.2, 1.2, -0.2])
    e = 1e-5
    perts = [(np.zeros(4), np.zeros(4))] + [
        (np.zeros(4), np.array([0, 0, eps, 0])) for eps in (e, e / 2, e / 4)]
    perts.append((np.array([1.0, 0, 0, 0]), np.zeros(4)))  # lands on the other body
    rows = continuous_dependence_probe(ms, s, perts, 5.0)
    assert rows[0]["sup_q"] == 0.0 and rows[0]["sup_v"] == 0.0
    sup = [r["sup_q"] for r in rows[1:4]]
    assert sup[1] <= 0.51 * sup[0] and sup[2] <= 0.51 * sup[1]
    assert "error" in rows[4]


def test_export_round_trip(ms, tmp_path):
    s = PhaseState(ms, PAIR, CIRC_V)
    tr = integrate(ms, s, 1.0, sample_times=[0.0, 0.5, 1.0])
    export_trajectory(tr, tmp_path / "t.csv", tmp_path / "t.json")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0][0] == "t" and len(rows) == 4
    np.testing.assert_array_equal([float(x) for x in rows[2][1:5]], tr.q[1])
    meta = json.load(open(tmp_path / "t.json"))
    assert meta["valid"] and meta["samples"] == 3


def test_bad_inputs(ms):
    s = PhaseState(ms, PAIR, CIRC_V)
    with pytest.raises(ValueError):
        integrate(ms, s, 0.0)
