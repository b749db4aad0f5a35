"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting the environment
variable ``JMFLOW_BACKEND=python`` forces the numpy fallback.  ``BACKEND``
names the active choice.
"""
import os

import numpy as np
from scipy.integrate._ivp import dop853_coefficients as _dc

from . import _fallback

_impl = _fallback
BACKEND = "python"
if os.environ.get("JMFLOW_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

# Dormand-Prince 8(5,3) tableau, trimmed to the 12 stages plus the FSAL slot.
TABLEAU = {
    "A": np.ascontiguousarray(_dc.A[:_dc.N_STAGES, :_dc.N_STAGES], dtype=float),
    "B": np.ascontiguousarray(_dc.B, dtype=float),
    "C": np.ascontiguousarray(_dc.C[:_dc.N_STAGES], dtype=float),
    "E3": np.ascontiguousarray(_dc.E3, dtype=float),
    "E5": np.ascontiguousarray(_dc.E5, dtype=float),
}


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def potential_acc(masses, d, q):
    return _impl.potential_acc(masses, d, q)


def dop853(masses, d, y0, t0, t1, *, rtol, atol, h_init=0.0, h_max=0.0,
           kepler_eta=0.1, coll_tol=0.0, max_steps=10_000_000, record=False,
           backend=None):
    impl = get_backend(backend)
    return impl.dop853(
        np.ascontiguousarray(masses, dtype=float), int(d),
        np.ascontiguousarray(y0, dtype=float), float(t0), float(t1),
        float(rtol), float(atol), float(h_init), float(h_max),
        float(kepler_eta), float(coll_tol), int(max_steps), bool(record),
        TABLEAU["A"], TABLEAU["B"], TABLEAU["C"], TABLEAU["E3"], TABLEAU["E5"])


def discrete_action(masses, d, Q, dt, barrier_tol, grad, backend=None):
    impl = get_backend(backend)
    return impl.discrete_action(masses, int(d), Q, dt, float(barrier_tol), grad)
