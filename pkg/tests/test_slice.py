import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jmflow.core import MassSystem, PhaseState, mass_norm, reduced_basis
from jmflow.dynamics import flow_map
from jmflow.horofunctions import cone_lattice
from jmflow.shape import ConeSpec, limit_shape
from jmflow.slice import (_count, box_counting_dimension, differential_of_field, flow_saturate,
                          graph_jacobian, hausdorff_measure_patch, phase_coordinates,
                          solved_field)

AXIS = np.array([-1 / math.sqrt(2), 0.0, 1 / math.sqrt(2), 0.0])


def test_graph_jacobian_examples():
    assert graph_jacobian(np.zeros((4, 4))) == 1.0
    assert graph_jacobian(np.eye(4)) == pytest.approx(4.0, rel=1e-14)
    u = np.array([1.0, 2.0, 0.0])
    v = np.array([0.5, -1.0, 3.0])
    sigma = 0.7
    expected = math.sqrt(1 + sigma ** 2 * (u @ u) * (v @ v))
    assert graph_jacobian(sigma * np.outer(u, v)) == pytest.approx(expected, rel=1e-13)
    with pytest.raises(ValueError):
        graph_jacobian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        graph_jacobian(np.array([[np.nan]]))


@given(arrays(float, (4, 4), elements=st.floats(-50, 50)))
def test_graph_jacobian_at_least_one(DV):
    J = graph_jacobian(DV)
    assert J >= 1 - 1e-9
    assert J == pytest.approx(math.sqrt(np.linalg.det(np.eye(4) + DV.T @ DV)), rel=1e-8)


def unit_cube(ms, per_axis=4):
    # cell centres of a unit cube in reduced coordinates
    lat = cone_lattice(ms, np.zeros(ms.n), 1.0 / per_axis, per_axis)
    return lat.points(), (1.0 / per_axis) ** ms.k


@pytest.mark.parametrize("field,expected", [("constant", 1.0), ("identity", 4.0)])
def test_synthetic_measures(field, expected):
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    pts, cell = unit_cube(ms)
    c = np.linspace(0.1, 0.6, ms.n)
    V = (lambda x: c) if field == "constant" else (lambda x: x)
    patch = differential_of_field(ms, pts, V, 1e-3)
    if field == "constant":
        assert np.all(patch.differentials == 0)
    else:
        np.testing.assert_allclose(patch.differentials, np.broadcast_to(np.eye(4), (256, 4, 4)),
                                   atol=1e-10)
    est = hausdorff_measure_patch(patch, cell)
    assert est.volume == pytest.approx(1.0)
    assert est.value == pytest.approx(expected, rel=1e-9)
    assert est.reliable


def test_dropped_points_flag_unreliable():
    ms = MassSystem([1.0, 1.0], 2)
    pts = np.array([[-1.0, 0, 1.0, 0], [-2.0, 0, 2.0, 0]])

    def V(x):
        if x[2] > 1.5:
            raise RuntimeError("no solve")
        return np.zeros(4)

    patch = differential_of_field(ms, pts, V, 1e-3)
    assert list(patch.dropped) == [1]
    assert not hausdorff_measure_patch(patch, 1.0).reliable


@pytest.fixture(scope="module")
def kepler_patch():
    ms = MassSystem([1.0, 1.0], 2)
    cone = ConeSpec(ms, AXIS, 0.9, 1.0)
    lat = cone_lattice(ms, 5 * AXIS, 0.25, 3)
    patch = differential_of_field(ms, lat.points(), solved_field(ms, cone), 1e-3,
                                  lattice=lat, cone=cone)
    return ms, cone, lat, patch


def test_kepler_patch_bounds(kepler_patch):
    ms, cone, lat, patch = kepler_patch
    assert not patch.dropped
    assert np.all(patch.jacobians >= 1 - 1e-9)
    est = hausdorff_measure_patch(patch, lat.spacing ** 2)
    assert est.volume <= est.value <= est.max_jacobian * est.volume
    assert math.isfinite(est.value)


def test_axis_reflection_symmetry(kepler_patch):
    ms, cone, lat, patch = kepler_patch
    centre = 4
    np.testing.assert_allclose(lat.points()[centre], 5 * AXIS)
    B = reduced_basis(ms)
    a = B.T @ (ms.mrep * AXIS)
    a /= np.linalg.norm(a)
    S = 2 * np.outer(a, a) - np.eye(2)  # reflection fixing the axis
    D = patch.differentials[centre]
    assert np.linalg.norm(D @ S - S @ D) <= 1e-3


def test_central_difference_order():
    ms = MassSystem([1.0, 1.0], 2)
    cone = ConeSpec(ms, AXIS, 0.9, 1.0)
    x = [5 * AXIS + np.array([0.0, 0.3, 0.0, -0.3])]
    V = solved_field(ms, cone)
    D = [differential_of_field(ms, x, V, s).differentials[0] for s in (0.2, 0.1, 0.05)]
    e1 = np.abs(D[0] - D[1]).max()
    e2 = np.abs(D[1] - D[2]).max()
    assert e1 / e2 == pytest.approx(4.0, rel=0.2)


def test_flow_saturate(kepler_patch):
    ms, cone, lat, patch = kepler_patch
    q, v = patch.graph()
    zero = flow_saturate(ms, q, v, n_max=0)
    np.testing.assert_array_equal(zero.q, q)
    np.testing.assert_array_equal(zero.v, v)
    cloud = flow_saturate(ms, q[:3], v[:3], n_max=3)
    assert len(cloud.q) == 12 and not cloud.failures
    for i in np.flatnonzero(cloud.steps == 3):
        fwd = flow_map(ms, PhaseState(ms, cloud.q[i], cloud.v[i]), 3.0)
        np.testing.assert_allclose(fwd.q, q[cloud.source[i]], atol=1e-4)
        np.testing.assert_allclose(fwd.v, v[cloud.source[i]], atol=1e-4)
        a = limit_shape(ms, PhaseState(ms, cloud.q[i], cloud.v[i])).a
        assert mass_norm(ms, a - AXIS) <= 1e-3


def test_flow_saturate_records_backward_collision():
    ms = MassSystem([1.0, 1.0], 2)
    # radially separating at zero energy: ejected from collision a third of a unit ago
    cloud = flow_saturate(ms, [[-0.5, 0, 0.5, 0]], [[-1.0, 0, 1.0, 0]], n_max=4)
    assert len(cloud.q) == 1
    assert cloud.failures == [(0, 1, "collision-approach")]


def test_phase_coordinates_shape():
    ms = MassSystem([1.0, 2.0, 3.0], 2)
    P = phase_coordinates(ms, np.ones((5, 6)), np.ones((5, 6)), 2.0)
    assert P.shape == (5, 8)


def test_box_counting_segment():
    t = np.linspace(0, 1, 20000)
    direction = np.array([1, 2, -1, 0.5, 0.3, -2, 1, 1.5])
    cloud = t[:, None] * direction[None, :]
    est = box_counting_dimension(cloud)
    assert est.slope == pytest.approx(1.0, abs=0.1)
    assert all(a >= b for a, b in zip(est.counts, est.counts[1:]))


def test_box_counting_flat_four():
    # four dyadic scales with a window inside the flat need about 33 points per axis
    g = np.linspace(0, 1, 36)
    mesh = np.stack(np.meshgrid(g, g, g, g, indexing="ij"), -1).reshape(-1, 4)
    cloud = np.hstack([mesh, np.full((len(mesh), 4), 0.25)])
    est = box_counting_dimension(cloud)
    assert est.slope == pytest.approx(4.0, abs=0.2)
    assert all(a >= b for a, b in zip(est.counts, est.counts[1:]))
    assert est.band[0] <= est.slope <= est.band[1]


def test_box_counting_errors():
    with pytest.raises(ValueError):
        box_counting_dimension(np.zeros((2000, 8)))
    with pytest.raises(ValueError):
        box_counting_dimension(np.random.default_rng(0).uniform(size=(10, 8)))
    cloud = np.random.default_rng(0).uniform(size=(2000, 2))
    with pytest.raises(ValueError):
        box_counting_dimension(cloud, scales=[0.1, 0.2, 0.4])


@given(st.integers(0, 2**31), st.floats(0.05, 0.8))
def test_hashed_count_matches_row_unique(seed, eps):
    pts = np.random.default_rng(seed).normal(size=(3000, 8))
    origin = pts.min(axis=0)
    expected = len(np.unique(np.floor((pts - origin) / eps).astype(np.int64), axis=0))
    assert _count(pts, eps, origin, threads=1) == expected
