import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from jmflow import kernels

backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
needs_cython = pytest.mark.skipif(kernels.BACKEND != "cython", reason="extension not built")
CIRC = np.array([-0.5, 0, 0.5, 0, 0, -1 / math.sqrt(2), 0, 1 / math.sqrt(2), 0.0])


def newton_rhs(masses, d):
    N = len(masses)

    def f(t, y):
        q = y[:N * d].reshape(N, d)
        a = np.zeros_like(q)
        for i in range(N):
            for j in range(N):
                if i != j:
                    r = q[j] - q[i]
                    a[i] += masses[j] * r / np.linalg.norm(r) ** 3
        return np.concatenate([y[N * d:], a.ravel()])
    return f


@needs_cython
@given(st.integers(0, 2**31))
def test_potential_acc_backends_agree(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.5, 3, 4)
    q = rng.uniform(-2, 2, 12)
    a = kernels.get_backend("python").potential_acc(m, 3, q)
    b = kernels.get_backend("cython").potential_acc(m, 3, q)
    assert a[0] == pytest.approx(b[0], rel=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-12)
    assert a[2] == pytest.approx(b[2], rel=1e-14)


@pytest.mark.parametrize("backend", backends)
def test_dop853_matches_scipy(backend):
    m = np.array([1.0, 2.0, 3.0])
    y0 = np.array([1.0, 0, -1, 1, 0, -1, 0.3, 0.5, -0.6, 0.1, 0.2, -0.4, 0.0])
    st_ = kernels.dop853(m, 2, y0, 0.0, 1.5, rtol=1e-12, atol=1e-12, backend=backend)
    assert st_[0] == 0
    ref = solve_ivp(newton_rhs(m, 2), (0, 1.5), y0[:12], method="DOP853", rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(st_[2][:12], ref.y[:, -1], atol=1e-9)


@pytest.mark.parametrize("backend", backends)
def test_dop853_circular_period(backend):
    T = math.pi * math.sqrt(2)
    st_ = kernels.dop853([1.0, 1.0], 2, CIRC, 0.0, T, rtol=1e-12, atol=1e-12, backend=backend)
    np.testing.assert_allclose(st_[2][:8], CIRC[:8], atol=1e-9)
    # action accumulator: |v|^2/2 + U = 1/2 + 1 along the circle
    assert st_[2][8] == pytest.approx(1.5 * T, rel=1e-10)


@needs_cython
def test_discrete_action_backends_agree():
    rng = np.random.default_rng(1)
    m = np.array([1.0, 2.0, 3.0])
    Q = np.linspace(rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6) + 3, 33)
    dt = np.full(32, 1 / 32)
    ga, gb = np.zeros_like(Q), np.zeros_like(Q)
    a = kernels.discrete_action(m, 2, Q, dt, 0.0, ga, backend="python")
    b = kernels.discrete_action(m, 2, Q, dt, 0.0, gb, backend="cython")
    assert a[0] == pytest.approx(b[0], rel=1e-13)
    assert a[3] == b[3]
    np.testing.assert_allclose(ga, gb, rtol=1e-11, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_environment_forces_fallback():
    env = dict(os.environ, JMFLOW_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "from jmflow import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
