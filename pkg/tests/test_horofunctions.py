import numpy as np
import pytest

from jmflow.action import PhiCache
from jmflow.core import MassSystem, mass_inner, potential
from jmflow.dynamics import integrate
from jmflow.horofunctions import (HorofunctionField, busemann_estimate, cone_lattice,
                                  domination_check, horofunction_from_sequence,
                                  viscosity_residual)
from jmflow.scenario import load_scenario


@pytest.fixture(scope="module")
def setup():
    sc = load_scenario("kepler-hyperbolic")
    ms, s = sc.ms, sc.state("escape")
    ray = integrate(ms, s, 40.0)
    grid = np.vstack([np.zeros(4), ray.position(0.0), ray.position(2.0),
                      sc.grid_points("busemann")[:3]])
    cache = PhiCache()
    fld = busemann_estimate(ms, ray, 0.5, grid, (5.0, 10.0, 20.0, 40.0), cache=cache)
    return ms, ray, grid, fld, cache


def test_origin_normalization(setup):
    _, _, _, fld, _ = setup
    assert np.all(fld.history[:, 0] == 0.0)


def test_ray_identity(setup):
    _, ray, _, fld, _ = setup
    assert fld.values[2] - fld.values[1] == pytest.approx(ray.action_h(0.0, 2.0), abs=1e-3)


def test_truncation_increments_decay(setup):
    _, _, _, fld, _ = setup
    steps = np.abs(np.diff(fld.history, axis=0))[:, 3:].max(axis=1)
    assert np.all(np.diff(steps) < 0)
    assert fld.converged and fld.max_increment <= 1e-4


def test_sequence_along_ray_matches_estimate(setup):
    ms, ray, grid, fld, cache = setup
    ps = [ray.position(t) for t in (5.0, 10.0, 20.0, 40.0)]
    seq, cauchy = horofunction_from_sequence(ms, [0.5] * 4, ps, grid, cache=cache)
    np.testing.assert_allclose(seq.values, fld.values, atol=1e-6)
    assert seq.values[0] == 0.0
    assert cauchy[-1] < cauchy[0]
    with pytest.raises(ValueError):
        horofunction_from_sequence(ms, [0.5, 0.5], ps[::-1][:2], grid)


def test_domination(setup):
    ms, _, grid, fld, cache = setup
    worst, slacks = domination_check(ms, fld, [(3, 3)], cache=cache)
    assert worst == 0.0
    worst, slacks = domination_check(ms, fld, [(1, 2), (3, 4), (4, 5), (5, 3)], cache=cache)
    assert worst <= 1e-3
    assert slacks[0] == pytest.approx(0.0, abs=1e-3)  # pair along the ray saturates


def lattice_field(ms, lat, values, h):
    G = len(values)
    return HorofunctionField(lat.points(), np.asarray(values, float), h, (0.0,), np.zeros(G),
                             np.zeros((1, G)), True, lattice=lat)


def test_constant_field_residual():
    ms = MassSystem([1.0, 1.0], 2)
    lat = cone_lattice(ms, [-0.5, 0, 0.5, 0], 0.01, 5)
    rep = viscosity_residual(ms, lattice_field(ms, lat, np.zeros(25), 0.5))
    kept = ~rep.mask
    U = np.array([potential(ms, p) for p in lat.points()])
    np.testing.assert_allclose(rep.residuals[kept], -U[kept] - 0.5, rtol=1e-12)
    assert kept.sum() == 9


def test_linear_field_residual_wiring():
    ms = MassSystem([1.0, 1.0], 2)
    c = np.array([-0.6, 0.2, 0.6, -0.2])  # zero total momentum, |c|_m^2 = 0.8
    lat = cone_lattice(ms, [-0.5, 0, 0.5, 0], 0.05, 5)
    pts = lat.points()
    u = -np.array([mass_inner(ms, c, p) for p in pts])  # w = -u is linear
    h = 0.4 - 1.0  # residual vanishes at the centre, where U = 1
    rep = viscosity_residual(ms, lattice_field(ms, lat, u, h))
    assert np.count_nonzero(~rep.mask) == 9
    for i in (12, 6, 18):  # centre and two diagonal neighbours
        expected = 0.4 - potential(ms, pts[i]) - h
        assert rep.residuals[i] == pytest.approx(expected, abs=1e-12)
    assert rep.residuals[12] == pytest.approx(0.0, abs=1e-12)
    assert rep.residuals[6] * rep.residuals[18] < 0  # one closer, one farther apart


def test_viscosity_needs_lattice(setup):
    ms, _, _, fld, _ = setup
    with pytest.raises(ValueError):
        viscosity_residual(ms, fld)
