# cython: language_level=3
"""Compiled hot loops.

Three kernels live here: the Newtonian vector field (augmented with the
running Lagrangian action), an adaptive Dormand-Prince 8(5,3) stepper that
drives it, and the midpoint-rule discrete action with its gradient.  The
numpy module ``_fallback`` mirrors every signature.
"""
import numpy as np

from libc.math cimport sqrt, fabs, pow, isfinite
from libc.stdlib cimport malloc, free


cdef double _TINY = 1e-300


cdef inline double _pot_acc(const double* m, int N, int d, const double* q,
                            double* acc, double* rmin) noexcept nogil:
    cdef int i, j, k
    cdef double U = 0.0, r2, r, inv3, dx, rm = 1e300
    if acc != NULL:
        for k in range(N * d):
            acc[k] = 0.0
    for i in range(N):
        for j in range(i + 1, N):
            r2 = 0.0
            for k in range(d):
                dx = q[j * d + k] - q[i * d + k]
                r2 += dx * dx
            if r2 < _TINY:
                r2 = _TINY
            r = sqrt(r2)
            if r < rm:
                rm = r
            U += m[i] * m[j] / r
            if acc != NULL:
                inv3 = 1.0 / (r2 * r)
                for k in range(d):
                    dx = (q[j * d + k] - q[i * d + k]) * inv3
                    acc[i * d + k] += m[j] * dx
                    acc[j * d + k] -= m[i] * dx
    rmin[0] = rm
    return U


cdef inline void _rhs(const double* m, int N, int d, const double* y,
                      double* f, double* rmin) noexcept nogil:
    # y = (q, v, A); f = (v, acc, L)
    cdef int n = N * d, k, i
    cdef double U = _pot_acc(m, N, d, y, f + n, rmin)
    cdef double kin = 0.0
    for k in range(n):
        f[k] = y[n + k]
    for i in range(N):
        for k in range(d):
            kin += m[i] * y[n + i * d + k] * y[n + i * d + k]
    f[2 * n] = 0.5 * kin + U


def potential_acc(const double[::1] masses, int d, const double[::1] q):
    """Return ``(U, acc, rmin)`` at the flat configuration ``q``."""
    cdef int N = masses.shape[0]
    acc = np.empty(N * d)
    cdef double[::1] av = acc
    cdef double rmin
    cdef double U = _pot_acc(&masses[0], N, d, &q[0], &av[0], &rmin)
    return U, acc, rmin


cdef double _rms(const double* x, const double* scale, int n) noexcept nogil:
    cdef double s = 0.0, z
    cdef int k
    for k in range(n):
        z = x[k] / scale[k]
        s += z * z
    return sqrt(s / n)


def dop853(const double[::1] masses, int d, const double[::1] y0, double t0, double t1,
           double rtol, double atol, double h_init, double h_max,
           double kepler_eta, double coll_tol, long max_steps, bint record,
           const double[:, ::1] A, const double[::1] B, const double[::1] C,
           const double[::1] E3, const double[::1] E5):
    """Integrate the augmented N-body system from ``t0`` to ``t1``.

    Returns ``(status, t, y, h_next, n_acc, n_rej, rec_t, rec_y, rec_rmin,
    t_star, rmin_min)``.  ``status`` is 0 (reached ``t1``), 1 (collision
    approach), 2 (step failure) or 3 (step budget exhausted).
    """
    cdef int N = masses.shape[0]
    cdef int n = N * d
    cdef int S = 2 * n + 1
    cdef int NST = 12
    cdef const double* m = &masses[0]
    cdef double Mtot = 0.0
    cdef int i, j, k, s_idx
    for i in range(N):
        Mtot += m[i]

    cdef double sgn = 1.0 if t1 >= t0 else -1.0
    cdef double* K = <double*> malloc((NST + 1) * S * sizeof(double))
    cdef double* y = <double*> malloc(S * sizeof(double))
    cdef double* ynew = <double*> malloc(S * sizeof(double))
    cdef double* ytmp = <double*> malloc(S * sizeof(double))
    cdef double* scale = <double*> malloc(S * sizeof(double))
    cdef double* e3 = <double*> malloc(S * sizeof(double))
    cdef double* e5 = <double*> malloc(S * sizeof(double))

    for k in range(S):
        y[k] = y0[k]

    cdef double rmin, rmin_new, rmin_prev, rmin_min
    _rhs(m, N, d, y, K, &rmin)
    rmin_prev = rmin
    rmin_min = rmin

    cdef double h_abs, d0, d1, d2, h0, h1, span = fabs(t1 - t0)
    if h_init > 0:
        h_abs = h_init
    else:
        for k in range(S):
            scale[k] = atol + fabs(y[k]) * rtol
        d0 = _rms(y, scale, S)
        d1 = _rms(K, scale, S)
        if d0 < 1e-5 or d1 < 1e-5:
            h0 = 1e-6
        else:
            h0 = 0.01 * d0 / d1
        for k in range(S):
            ytmp[k] = y[k] + sgn * h0 * K[k]
        _rhs(m, N, d, ytmp, K + NST * S, &rmin_new)
        for k in range(S):
            e3[k] = (K[NST * S + k] - K[k])
        d2 = _rms(e3, scale, S) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = h0 * 1e-3
            if h1 < 1e-6:
                h1 = 1e-6
        else:
            h1 = pow(0.01 / (d1 if d1 > d2 else d2), 1.0 / 8.0)
        h_abs = 100 * h0
        if h1 < h_abs:
            h_abs = h1
    if span == 0.0:
        h_abs = 0.0

    # recording buffers
    cdef long cap = 256 if record else 1
    cdef long nrec = 0
    rec_t = np.empty(cap)
    rec_y = np.empty((cap, S))
    rec_r = np.empty(cap)
    cdef double[::1] rt = rec_t
    cdef double[:, ::1] ry = rec_y
    cdef double[::1] rr = rec_r
    if record:
        rt[0] = t0
        for k in range(S):
            ry[0, k] = y[k]
        rr[0] = rmin
        nrec = 1

    cdef double t_hi = t0, t_lo = 0.0, t_prev = t0
    cdef double rem, h, err5, err3, errn, denom, factor, yy, tt, a, kt
    cdef bint last, rejected = False, finite
    cdef long n_acc = 0, n_rej = 0, consec_rej = 0
    cdef int ncoll = 0, status = 0
    cdef double t_star = float("nan"), cap_h, r1, r2
    cdef double SAFETY = 0.9, MINF = 0.2, MAXF = 10.0

    while span > 0.0:
        rem = sgn * ((t1 - t_hi) - t_lo)
        if rem <= 0.0:
            break
        if n_acc >= max_steps:
            status = 3
            break
        if h_max > 0 and h_abs > h_max:
            h_abs = h_max
        if kepler_eta > 0:
            cap_h = kepler_eta * sqrt(rmin_prev * rmin_prev * rmin_prev / Mtot)
            if h_abs > cap_h:
                h_abs = cap_h
        last = False
        if h_abs >= rem:
            h_abs = rem
            last = True
        if h_abs < 1e-25 * (1.0 + fabs(t_hi)) or consec_rej > 60:
            status = 2
            break
        h = sgn * h_abs

        # stages
        for s_idx in range(1, NST):
            for k in range(S):
                kt = 0.0
                for j in range(s_idx):
                    a = A[s_idx, j]
                    if a != 0.0:
                        kt += a * K[j * S + k]
                ytmp[k] = y[k] + h * kt
            _rhs(m, N, d, ytmp, K + s_idx * S, &rmin_new)
        for k in range(S):
            kt = 0.0
            for j in range(NST):
                kt += B[j] * K[j * S + k]
            ynew[k] = y[k] + h * kt
        _rhs(m, N, d, ynew, K + NST * S, &rmin_new)

        finite = True
        for k in range(S):
            if not isfinite(ynew[k]) or not isfinite(K[NST * S + k]):
                finite = False
                break
        if finite:
            err5 = 0.0
            err3 = 0.0
            for k in range(S):
                scale[k] = atol + rtol * (fabs(y[k]) if fabs(y[k]) > fabs(ynew[k]) else fabs(ynew[k]))
                a = 0.0
                kt = 0.0
                for j in range(NST + 1):
                    a += E5[j] * K[j * S + k]
                    kt += E3[j] * K[j * S + k]
                a /= scale[k]
                kt /= scale[k]
                err5 += a * a
                err3 += kt * kt
            if err5 == 0.0 and err3 == 0.0:
                errn = 0.0
            else:
                denom = err5 + 0.01 * err3
                errn = h_abs * err5 / sqrt(denom * S)
        else:
            errn = 1e10

        if errn < 1.0:
            if errn == 0.0:
                factor = MAXF
            else:
                factor = SAFETY * pow(errn, -1.0 / 8.0)
                if factor > MAXF:
                    factor = MAXF
            if rejected and factor > 1.0:
                factor = 1.0
            rejected = False
            consec_rej = 0
            # accept
            t_prev = t_hi + t_lo
            if last:
                t_hi = t1
                t_lo = 0.0
            else:
                yy = h - t_lo
                tt = t_hi + yy
                t_lo = (tt - t_hi) - yy
                t_hi = tt
            for k in range(S):
                y[k] = ynew[k]
                K[k] = K[NST * S + k]
            n_acc += 1
            h_abs *= factor
            if rmin_new < rmin_min:
                rmin_min = rmin_new
            if record:
                if nrec >= cap:
                    cap *= 2
                    rec_t = np.resize(rec_t, cap)
                    rec_y = np.resize(rec_y, (cap, S))
                    rec_r = np.resize(rec_r, cap)
                    rt = rec_t
                    ry = rec_y
                    rr = rec_r
                rt[nrec] = t_hi + t_lo
                for k in range(S):
                    ry[nrec, k] = y[k]
                rr[nrec] = rmin_new
                nrec += 1
            if rmin_new < coll_tol and rmin_new < rmin_prev:
                ncoll += 1
            else:
                ncoll = 0
            if ncoll >= 10:
                r1 = pow(rmin_prev, 1.5)
                r2 = pow(rmin_new, 1.5)
                if r1 > r2:
                    t_star = (t_hi + t_lo) + r2 * ((t_hi + t_lo) - t_prev) / (r1 - r2)
                else:
                    t_star = t_hi + t_lo
                rmin_prev = rmin_new
                status = 1
                break
            rmin_prev = rmin_new
        else:
            factor = SAFETY * pow(errn, -1.0 / 8.0)
            if factor < MINF:
                factor = MINF
            h_abs *= factor
            rejected = True
            n_rej += 1
            consec_rej += 1

    yout = np.empty(S)
    cdef double[::1] yo = yout
    for k in range(S):
        yo[k] = y[k]
    free(K)
    free(y)
    free(ynew)
    free(ytmp)
    free(scale)
    free(e3)
    free(e5)
    if record:
        rec_t = rec_t[:nrec].copy()
        rec_y = rec_y[:nrec].copy()
        rec_r = rec_r[:nrec].copy()
    else:
        rec_t = rec_t[:0]
        rec_y = rec_y[:0]
        rec_r = rec_r[:0]
    return (status, t_hi + t_lo, yout, h_abs, n_acc, n_rej, rec_t, rec_y,
            rec_r, t_star, rmin_min)


def discrete_action(const double[::1] masses, int d, const double[:, ::1] Q, const double[::1] dt,
                    double barrier_tol, double[:, ::1] grad):
    """Midpoint-rule action of the polygon ``Q`` with step lengths ``dt``.

    Fills ``grad`` (same shape as ``Q``) and returns ``(value, kinetic,
    potential, flag, seg_rmin)`` where ``potential`` is the sum of
    ``dt_k * U(mid_k)`` and ``flag`` marks a midpoint or interior node closer
    to collision than ``barrier_tol``.
    """
    cdef int N = masses.shape[0]
    cdef int n = N * d
    cdef int M = dt.shape[0]
    cdef int k, c, i, j, l
    cdef const double* m = &masses[0]
    cdef double kin = 0.0, pot = 0.0, dq, w, U, rmin, seg_rmin = 1e300
    cdef double dd, ww, dw, s, r2, x
    cdef bint flag = False
    cdef double* mid = <double*> malloc(n * sizeof(double))
    cdef double* acc = <double*> malloc(n * sizeof(double))

    for k in range(M + 1):
        for c in range(n):
            grad[k, c] = 0.0

    for k in range(M):
        for i in range(N):
            w = m[i] / dt[k]
            for l in range(d):
                c = i * d + l
                dq = Q[k + 1, c] - Q[k, c]
                kin += 0.5 * w * dq * dq
                grad[k, c] -= w * dq
                grad[k + 1, c] += w * dq
                mid[c] = 0.5 * (Q[k + 1, c] + Q[k, c])
        U = _pot_acc(m, N, d, mid, acc, &rmin)
        if rmin < barrier_tol:
            flag = True
        pot += dt[k] * U
        for i in range(N):
            for l in range(d):
                c = i * d + l
                grad[k, c] += 0.5 * dt[k] * m[i] * acc[c]
                grad[k + 1, c] += 0.5 * dt[k] * m[i] * acc[c]
        # closest approach along the linear segment, pair by pair
        for i in range(N):
            for j in range(i + 1, N):
                dd = 0.0
                ww = 0.0
                dw = 0.0
                for l in range(d):
                    x = Q[k, i * d + l] - Q[k, j * d + l]
                    s = (Q[k + 1, i * d + l] - Q[k + 1, j * d + l]) - x
                    dd += x * x
                    ww += s * s
                    dw += x * s
                if ww > 0:
                    s = -dw / ww
                    if s < 0:
                        s = 0
                    elif s > 1:
                        s = 1
                else:
                    s = 0
                r2 = dd + 2 * s * dw + s * s * ww
                if r2 < 0:
                    r2 = 0
                r2 = sqrt(r2)
                if r2 < seg_rmin:
                    seg_rmin = r2
        if 0 < k:
            _pot_acc(m, N, d, &Q[k, 0], NULL, &rmin)
            if rmin < barrier_tol:
                flag = True
    free(mid)
    free(acc)
    return kin + pot, kin, pot, flag, seg_rmin
