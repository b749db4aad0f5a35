import math

import numpy as np
import pytest

from jmflow.action import phi_free
from jmflow.core import MassSystem, PhaseState
from jmflow.dynamics import integrate
from jmflow.rays import (MembershipError, PolygonPath, RayOptions, calibration_check,
                         compactness_experiment, dilation_sequence, dyadic_windows,
                         gr_membership, verify_minimizing)
from jmflow.scenario import load_scenario


@pytest.fixture(scope="module")
def hyper():
    return load_scenario("kepler-hyperbolic")


@pytest.fixture(scope="module")
def escape_cert(hyper):
    return gr_membership(hyper.ms, hyper.state("escape"), RayOptions(T_max=50.0))


def test_escape_is_minimizing(escape_cert):
    assert escape_cert.verdict == "minimizing"
    assert max(abs(g) for g in escape_cert.gaps) <= 1e-4
    assert escape_cert.h >= -1e-9


def test_nested_windows_gap_monotone(escape_cert):
    outer = escape_cert.gaps[0]
    assert escape_cert.windows[0] == (0.0, 50.0)
    for g in escape_cert.gaps[1:]:
        assert g <= outer + 1e-6 or abs(g) <= 1e-6


def test_negative_energy_rejected(hyper):
    with pytest.raises(ValueError):
        gr_membership(hyper.ms, hyper.state("circular"))


def test_collision_datum_is_not_a_ray():
    sc = load_scenario("collision-headon")
    cert = gr_membership(sc.ms, sc.state("inward"), RayOptions(T_max=10.0))
    assert cert.verdict == "non-minimizing"
    assert cert.reason == "collision-approach"


def test_corner_path_is_not_minimizing():
    ms = MassSystem([1.0, 1.0], 2)
    x = np.array([-1.0, 0, 1.0, 0])
    z = np.array([-1.0, 1.5, 1.0, -1.5])
    y = np.array([-2.0, 0, 2.0, 0])
    path = PolygonPath(ms, [0.0, 1.0, 2.0], [x, z, y], h=0.5)
    cert = verify_minimizing(ms, path, 0.5, [(0.0, 2.0)])
    assert cert.verdict == "non-minimizing"
    assert cert.gaps[0] > 1e-3


def test_dyadic_windows():
    w = dyadic_windows(8.0, 1.0)
    assert w == [(0.0, 8.0), (4.0, 8.0), (2.0, 4.0), (1.0, 2.0)]


def test_zero_field_calibration_residual_grows(hyper):
    ms, s = hyper.ms, hyper.state("escape")
    tr = integrate(ms, s, 4.0, sample_times=np.linspace(0, 4, 9))
    rep = calibration_check(lambda x: 0.0, tr, 0.5)
    r = rep.residuals
    assert r[0] == 0.0
    assert np.all(np.diff(r) > 0)
    np.testing.assert_allclose(r[1:], [tr.action_h(0, t) for t in tr.times[1:]], rtol=1e-12)


def test_busemann_field_calibrates_its_ray(hyper):
    from jmflow.horofunctions import BusemannEvaluator
    ms, s = hyper.ms, hyper.state("escape")
    tr = integrate(ms, s, 40.0)
    u = BusemannEvaluator.along_ray(ms, tr, 0.5, 40.0)
    rep = calibration_check(u, tr, 0.5, times=np.linspace(0, 20, 5))
    assert rep.max_residual <= 1e-3
    # restricting to a later subinterval leaves the residual small
    rep2 = calibration_check(u, tr, 0.5, times=np.linspace(5, 20, 4))
    assert rep2.max_residual <= 1e-3


def test_constant_sequence_has_zero_gaps(hyper):
    ms, s0 = hyper.ms, hyper.state("escape")
    grid = hyper.grid_points("busemann")[:2]
    rep = compactness_experiment(ms, [s0, s0], s0, grid, [1, 2], t_trunc=20.0,
                                 certify=False)
    assert rep.energy_gaps == [0.0, 0.0]
    assert rep.cauchy[0][2] == 0.0
    assert rep.calibration_residual <= 1e-3


def test_dilation_sequence_energy_gaps_shrink(hyper):
    ms, s0 = hyper.ms, hyper.state("escape")
    seq = dilation_sequence(ms, s0, 0.1, [1, 2, 4])
    rep = compactness_experiment(ms, seq, s0, hyper.grid_points("busemann")[:3], [1, 2, 4],
                                 t_trunc=20.0, certify=False)
    g = rep.energy_gaps
    assert g[0] > g[1] > g[2] > 0
    assert g[1] / g[2] == pytest.approx(2.0, rel=0.1)
    d = [c[2] for c in rep.cauchy]
    assert d[0] > d[1]


def test_sequence_running_into_collision_is_rejected(hyper):
    ms, s0 = hyper.ms, hyper.state("escape")
    v = s0.v
    seq = [PhaseState(ms, s0.q / n, v) for n in (1, 4, 16)]
    with pytest.raises(MembershipError) as exc:
        compactness_experiment(ms, seq, s0, [s0.q], certify=False)
    assert exc.value.index == 1  # U = 4 already exceeds |v|^2/2 = 1.5
    assert "negative energy" in exc.value.reason


def test_phi_between_ray_points_matches_action(hyper):
    ms, s = hyper.ms, hyper.state("escape")
    tr = integrate(ms, s, 6.0)
    r = phi_free(ms, 0.5, tr.position(1.0), tr.position(6.0))
    assert r.value == pytest.approx(tr.action_h(1.0, 6.0), rel=1e-6)
    assert math.isfinite(r.T_star) and r.T_star == pytest.approx(5.0, rel=1e-3)
